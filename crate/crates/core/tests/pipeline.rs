use std::collections::{HashMap, HashSet};

use idc_core::data::synthetic::{write_patch_dataset, PatchStyle};
use idc_core::data::{prepare, DataSource, PadMode, PipelineConfig, Split, SplitOrder};

fn config(root: &std::path::Path, n: usize, order: SplitOrder) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(DataSource::PatchDir {
        root: root.to_path_buf(),
        strict: true,
        pad: PadMode::Reject,
    });
    cfg.n_per_class = n;
    cfg.order = order;
    cfg.seed = 11;
    cfg
}

#[test]
fn scaled_population_counts() {
    // Same 198,738 : 78,786 imbalance, scaled down by ~500.
    let dir = tempfile::tempdir().unwrap();
    write_patch_dataset(dir.path(), 397, 158, PatchStyle::Flat, 0).unwrap();
    let m = prepare(&config(dir.path(), 100, SplitOrder::LeakFree)).unwrap();
    let bal = m.balanced_counts();
    assert_eq!((bal.negative, bal.positive), (100, 100));
    assert_eq!(m.entries.len(), 400);
    assert_eq!((m.counts.train.negative, m.counts.train.positive), (140, 140));
    assert_eq!((m.counts.test.negative, m.counts.test.positive), (60, 60));
}

#[test]
fn leak_free_keeps_every_parent_on_one_side() {
    let dir = tempfile::tempdir().unwrap();
    write_patch_dataset(dir.path(), 60, 60, PatchStyle::Flat, 0).unwrap();
    let m = prepare(&config(dir.path(), 50, SplitOrder::LeakFree)).unwrap();
    let mut side: HashMap<&str, Split> = HashMap::new();
    for e in &m.entries {
        assert!(e.augmented);
        let prev = side.insert(e.parent.as_str(), e.split);
        assert!(prev.is_none() || prev == Some(e.split), "{} straddles the split", e.parent);
    }
    assert_eq!(side.len(), 100);
}

#[test]
fn short_class_is_reported_with_shortfall() {
    let dir = tempfile::tempdir().unwrap();
    write_patch_dataset(dir.path(), 30, 9, PatchStyle::Flat, 0).unwrap();
    let err = prepare(&config(dir.path(), 10, SplitOrder::LeakFree)).unwrap_err();
    assert!(err.to_string().contains("short by 1"), "{err}");
}

#[test]
fn manifests_are_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    write_patch_dataset(dir.path(), 40, 40, PatchStyle::Flat, 0).unwrap();
    let cfg = config(dir.path(), 20, SplitOrder::LeakFree);
    let a = prepare(&cfg).unwrap();
    let b = prepare(&cfg).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let other = prepare(&PipelineConfig { seed: 12, ..cfg }).unwrap();
    let ids = |m: &idc_core::data::CorpusManifest| m.entries.iter().map(|e| e.parent.clone()).collect::<HashSet<_>>();
    assert_ne!(ids(&a), ids(&other));
}
