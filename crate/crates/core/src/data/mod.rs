//! Patch ingestion, class balancing, normalization, affine augmentation and
//! stratified splitting.

mod augment;
mod corpus;
mod features;
mod image_io;
mod records;
mod samples;
pub mod synthetic;

pub use augment::{affine_pixels, apply_affine, item_seed, sample_affine_params, AffineParams, AugmentConfig};
pub use corpus::{
    balance_sample, build_corpus, plan_corpus, prepare, split_corpus, ClassCounts, CorpusEntry, CorpusManifest,
    DataSource, ManifestEntry, PipelineConfig, Split, SplitOrder,
};
pub use features::{read_feature_file, write_feature_file, FeatureRecord};
pub use image_io::{decode_and_normalize, decode_bytes, encode_png, load_patch, PadMode, Patch, CHANNELS, PATCH_SIZE};
pub use records::{parse_patch_filename, scan_dataset, PatchRecord};
pub use samples::{materialize, Samples};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no patch images found under {0}")]
    EmptyDataset(PathBuf),
    #[error("{0}: filename does not follow <patient>_idx<k>_x<X>_y<Y>_class<C>.png")]
    UnparseableName(PathBuf),
    #[error("class {class} has {available} records, {requested} requested (short by {})", requested - available)]
    Shortfall {
        class: u8,
        available: usize,
        requested: usize,
    },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: String, message: String },
    #[error("{path}: expected {expected}x{expected} pixels, got {width}x{height}")]
    Size {
        path: String,
        width: u32,
        height: u32,
        expected: u32,
    },
    #[error("train ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("class {0} has no members")]
    EmptyClass(u8),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("feature file {path}, line {line}: {message}")]
    Features { path: PathBuf, line: usize, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}
