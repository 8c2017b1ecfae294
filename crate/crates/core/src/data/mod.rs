//! Feature files, padding, manifests and synthetic data.

mod format;
mod manifest;
mod record;
pub mod synth;

use std::path::PathBuf;

use thiserror::Error;

pub use format::{read_feature_file, write_feature_file, FormatError, FEATURE_MAGIC, FEATURE_VERSION};
pub(crate) use format::{check_magic, verify_crc, Reader};
pub use manifest::{header_path, load_records, read_manifest, write_manifest, Manifest};
pub use record::{label_from_gt, pad_or_clip, FeatureMatrix, GtInstance, PaddedVideo, VideoRecord};
pub use synth::{synthesize_dataset, synthesize_with_truth, SynthConfig, SynthVideo};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
}
