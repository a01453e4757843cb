//! Balanced sampling, corpus planning and stratified train/test splitting.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::{affine_pixels, item_seed, sample_affine_params, AugmentConfig};
use super::features::{read_feature_file, FeatureRecord};
use super::image_io::{PadMode, Patch};
use super::records::{scan_dataset, PatchRecord};
use super::DataError;

pub const MANIFEST_FORMAT: u32 = 1;

/// Anything with an identity, a binary label and a source location.
pub trait LabeledItem {
    fn item_id(&self) -> String;
    fn label(&self) -> u8;
    fn source(&self) -> String;
}

impl LabeledItem for PatchRecord {
    fn item_id(&self) -> String {
        self.id()
    }
    fn label(&self) -> u8 {
        self.label
    }
    fn source(&self) -> String {
        self.source_path.display().to_string()
    }
}

fn class_seed(seed: u64, salt: u64, class: u8) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (class as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Draws exactly `n_per_class` items of each class without replacement.
/// Output lists class 0 then class 1, each in input order.
pub fn balance_sample<R: LabeledItem + Clone>(records: &[R], n_per_class: usize, seed: u64) -> Result<Vec<R>, DataError> {
    let mut out = Vec::with_capacity(2 * n_per_class);
    for class in 0..2u8 {
        let members: Vec<&R> = records.iter().filter(|r| r.label() == class).collect();
        if members.len() < n_per_class {
            return Err(DataError::Shortfall {
                class,
                available: members.len(),
                requested: n_per_class,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(class_seed(seed, 1, class));
        let mut picked = index::sample(&mut rng, members.len(), n_per_class).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| members[i].clone()));
    }
    Ok(out)
}

/// One planned corpus item: an original or the `copy`-th augmented variant of `parent`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub label: u8,
    pub parent: String,
    pub source: String,
    pub copy: Option<u32>,
}

impl CorpusEntry {
    pub fn augmented(&self) -> bool {
        self.copy.is_some()
    }
}

fn variant_range(cfg: &AugmentConfig) -> std::ops::Range<u32> {
    if cfg.keep_originals {
        1..cfg.copies_per_original.max(1)
    } else {
        0..cfg.copies_per_original
    }
}

/// Expands originals into corpus entries without touching pixels.
///
/// By default each original yields `copies_per_original` augmented variants and is
/// itself dropped; with `keep_originals` it yields itself plus `copies - 1` variants.
pub fn plan_corpus<R: LabeledItem>(originals: &[R], cfg: &AugmentConfig) -> Vec<CorpusEntry> {
    let mut out = Vec::new();
    for r in originals {
        let parent = r.item_id();
        if cfg.keep_originals {
            out.push(CorpusEntry {
                id: parent.clone(),
                label: r.label(),
                parent: parent.clone(),
                source: r.source(),
                copy: None,
            });
        }
        for copy in variant_range(cfg) {
            out.push(CorpusEntry {
                id: format!("{parent}_aug{copy}"),
                label: r.label(),
                parent: parent.clone(),
                source: r.source(),
                copy: Some(copy),
            });
        }
    }
    out
}

/// Materializes the planned corpus for already-decoded originals.
pub fn build_corpus(originals: &[Patch], cfg: &AugmentConfig) -> Vec<Patch> {
    let mut out = Vec::new();
    for p in originals {
        let parent = p.record.id();
        if cfg.keep_originals {
            out.push(p.clone());
        }
        for copy in variant_range(cfg) {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, &parent, copy));
            let params = sample_affine_params(cfg, &mut rng);
            out.push(Patch {
                pixels: affine_pixels(&p.pixels, &params),
                record: p.record.clone(),
                augmented_from: Some(parent.clone()),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitOrder {
    /// Split originals, then augment each side: no augmented sibling crosses the boundary.
    #[default]
    LeakFree,
    /// Augment first, then split the augmented corpus.
    Faithful,
}

fn train_quota(n: usize, ratio: f64) -> usize {
    // The epsilon keeps products like 14000 · 0.7 from flooring to 9799.
    ((n as f64) * ratio + 1e-9).floor() as usize
}

/// Assigns each item a side so that every class sends `⌊n·ratio⌋` members to train.
fn stratify<F: Fn(usize) -> u8>(count: usize, label_of: F, ratio: f64, seed: u64) -> Result<Vec<Split>, DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::InvalidRatio(ratio));
    }
    let mut sides = vec![Split::Test; count];
    for class in 0..2u8 {
        let mut members: Vec<usize> = (0..count).filter(|&i| label_of(i) == class).collect();
        if members.is_empty() {
            return Err(DataError::EmptyClass(class));
        }
        let quota = train_quota(members.len(), ratio);
        let mut rng = ChaCha8Rng::seed_from_u64(class_seed(seed, 2, class));
        members.shuffle(&mut rng);
        for &i in &members[..quota] {
            sides[i] = Split::Train;
        }
    }
    Ok(sides)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: u8,
    pub split: Split,
    pub augmented: bool,
    pub parent: String,
    pub copy: Option<u32>,
    pub source: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub negative: usize,
    pub positive: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.negative + self.positive
    }

    fn bump(&mut self, label: u8) {
        if label == 0 {
            self.negative += 1;
        } else {
            self.positive += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Directory tree of PNG patches following the public naming convention.
    PatchDir {
        root: PathBuf,
        #[serde(default)]
        strict: bool,
        #[serde(default)]
        pad: PadMode,
    },
    /// CSV of precomputed embedding vectors (`id,label,f0,...`).
    FeatureFile { path: PathBuf },
}

/// Everything that determines a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub source: DataSource,
    pub n_per_class: usize,
    pub augment: AugmentConfig,
    pub train_ratio: f64,
    pub order: SplitOrder,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(source: DataSource) -> Self {
        Self {
            source,
            n_per_class: 7000,
            augment: AugmentConfig::default(),
            train_ratio: 0.7,
            order: SplitOrder::LeakFree,
            seed: 0,
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: ClassCounts,
    pub test: ClassCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub interpolation: String,
    pub fill_mode: String,
    pub counts: SplitCounts,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    fn from_entries(config: &PipelineConfig, entries: Vec<ManifestEntry>) -> Self {
        let counts = tally(&entries);
        Self {
            format: MANIFEST_FORMAT,
            seed: config.seed,
            config_hash: config.hash(),
            config: config.clone(),
            interpolation: "bilinear".into(),
            fill_mode: "nearest_edge".into(),
            counts,
            entries,
        }
    }

    /// Distinct originals per class, i.e. the output of the balancing stage.
    pub fn balanced_counts(&self) -> ClassCounts {
        let mut seen = std::collections::HashSet::new();
        let mut counts = ClassCounts::default();
        for e in &self.entries {
            if seen.insert(e.parent.as_str()) {
                match e.label {
                    0 => counts.negative += 1,
                    _ => counts.positive += 1,
                }
            }
        }
        counts
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Checks stored counts against the entries and that ids are unique.
    pub fn verify(&self) -> Result<(), DataError> {
        if self.format != MANIFEST_FORMAT {
            return Err(DataError::Manifest(format!("unsupported format {}", self.format)));
        }
        if tally(&self.entries) != self.counts {
            return Err(DataError::Manifest("stored counts disagree with entries".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(DataError::Manifest(format!("duplicate id {}", e.id)));
            }
            if e.label > 1 {
                return Err(DataError::Manifest(format!("{}: label {} outside {{0,1}}", e.id, e.label)));
            }
        }
        if self.config_hash != self.config.hash() {
            return Err(DataError::Manifest("config hash does not match embedded config".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        let m: Self = serde_json::from_slice(&bytes).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
        m.verify()?;
        Ok(m)
    }

    /// SHA-256 of the serialized manifest.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_json()))
    }
}

fn tally(entries: &[ManifestEntry]) -> SplitCounts {
    let mut counts = SplitCounts {
        train: ClassCounts::default(),
        test: ClassCounts::default(),
    };
    for e in entries {
        match e.split {
            Split::Train => counts.train.bump(e.label),
            Split::Test => counts.test.bump(e.label),
        }
    }
    counts
}

fn tagged(entry: CorpusEntry, split: Split) -> ManifestEntry {
    ManifestEntry {
        augmented: entry.augmented(),
        id: entry.id,
        label: entry.label,
        split,
        parent: entry.parent,
        copy: entry.copy,
        source: entry.source,
    }
}

/// Stratified split of the corpus planned from `originals`.
pub fn split_corpus<R: LabeledItem>(originals: &[R], config: &PipelineConfig) -> Result<CorpusManifest, DataError> {
    let (ratio, seed) = (config.train_ratio, config.seed);
    let entries = match config.order {
        SplitOrder::Faithful => {
            let corpus = plan_corpus(originals, &config.augment);
            let sides = stratify(corpus.len(), |i| corpus[i].label, ratio, seed)?;
            corpus.into_iter().zip(sides).map(|(e, s)| tagged(e, s)).collect()
        }
        SplitOrder::LeakFree => {
            let sides = stratify(originals.len(), |i| originals[i].label(), ratio, seed)?;
            let mut entries = Vec::new();
            for (orig, side) in originals.iter().zip(sides) {
                let planned = plan_corpus(std::slice::from_ref(orig), &config.augment);
                entries.extend(planned.into_iter().map(|e| tagged(e, side)));
            }
            entries
        }
    };
    Ok(CorpusManifest::from_entries(config, entries))
}

/// Scan → balance → plan → split.
pub fn prepare(config: &PipelineConfig) -> Result<CorpusManifest, DataError> {
    config.augment.validate()?;
    match &config.source {
        DataSource::PatchDir { root, strict, .. } => {
            let records = scan_dataset(root, *strict)?;
            let balanced = balance_sample(&records, config.n_per_class, config.seed)?;
            split_corpus(&balanced, config)
        }
        DataSource::FeatureFile { path } => {
            let records: Vec<FeatureRecord> = read_feature_file(path)?;
            let balanced = balance_sample(&records, config.n_per_class, config.seed)?;
            // Augmentation is an image operation; feature vectors pass through as originals.
            let passthrough = PipelineConfig {
                augment: AugmentConfig {
                    copies_per_original: 0,
                    keep_originals: true,
                    ..config.augment.clone()
                },
                ..config.clone()
            };
            let mut m = split_corpus(&balanced, &passthrough)?;
            m.config = config.clone();
            m.config_hash = config.hash();
            Ok(m)
        }
    }
}
