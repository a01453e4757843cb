use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{affine_pixels, item_seed, sample_affine_params};
use super::corpus::{CorpusManifest, DataSource, Split};
use super::features::read_feature_file;
use super::image_io::decode_and_normalize;
use super::DataError;
use crate::tensor::Tensor;

/// In-memory labeled inputs with a common per-sample shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub sample_shape: Vec<usize>,
    pub data: Vec<f32>,
    pub labels: Vec<u8>,
    pub ids: Vec<String>,
}

impl Samples {
    pub fn new(sample_shape: &[usize]) -> Self {
        Self {
            sample_shape: sample_shape.to_vec(),
            data: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, id: impl Into<String>, label: u8, values: &[f32]) -> Result<(), DataError> {
        if values.len() != self.sample_len() {
            return Err(DataError::Manifest(format!(
                "sample has {} values, expected {:?}",
                values.len(),
                self.sample_shape
            )));
        }
        self.data.extend_from_slice(values);
        self.labels.push(label);
        self.ids.push(id.into());
        Ok(())
    }

    pub fn extend(&mut self, other: &Samples) -> Result<(), DataError> {
        for i in 0..other.len() {
            self.push(other.ids[i].clone(), other.labels[i], other.sample(i))?;
        }
        Ok(())
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        let mut out = Samples::new(&self.sample_shape);
        for &i in indices {
            out.push(self.ids[i].clone(), self.labels[i], self.sample(i)).expect("same shape");
        }
        out
    }

    /// Stacks the selected samples into a `[B, ...sample_shape]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data).expect("batch shape")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Loads the pixels (or feature vectors) of one side of the manifest,
/// regenerating augmented variants from their per-item seeds.
pub fn materialize(manifest: &CorpusManifest, split: Split) -> Result<Samples, DataError> {
    match &manifest.config.source {
        DataSource::PatchDir { pad, .. } => {
            let aug = &manifest.config.augment;
            let mut out = Samples::new(&[3, 50, 50]);
            let mut cached: Option<(String, Tensor)> = None;
            for e in manifest.entries_in(split) {
                let original = match &cached {
                    Some((src, t)) if *src == e.source => t.clone(),
                    _ => {
                        let t = decode_and_normalize(Path::new(&e.source), *pad)?;
                        cached = Some((e.source.clone(), t.clone()));
                        t
                    }
                };
                let pixels = match e.copy {
                    Some(copy) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(aug.seed, &e.parent, copy));
                        affine_pixels(&original, &sample_affine_params(aug, &mut rng))
                    }
                    None => original,
                };
                out.push(e.id.clone(), e.label, pixels.data())?;
            }
            Ok(out)
        }
        DataSource::FeatureFile { path } => {
            let records = read_feature_file(path)?;
            let dim = records[0].values.len();
            let by_id: HashMap<&str, &[f32]> = records.iter().map(|r| (r.id.as_str(), r.values.as_slice())).collect();
            let mut out = Samples::new(&[dim]);
            for e in manifest.entries_in(split) {
                let values = by_id
                    .get(e.parent.as_str())
                    .ok_or_else(|| DataError::Manifest(format!("{} missing from {}", e.parent, path.display())))?;
                out.push(e.id.clone(), e.label, values)?;
            }
            Ok(out)
        }
    }
}
