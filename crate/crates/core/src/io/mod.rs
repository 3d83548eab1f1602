//! On-disk formats: the `LWU1` weight container, JSON-lines feature files,
//! layer manifests and CSV score tables.

mod features;
mod manifest;
mod scores;
mod weights;

pub use features::{
    feature_set, group_features, parse_features, read_features, FeatureRecord, Label, MapRecord,
};
pub use manifest::{parse_manifest, read_manifest, LayerSpec};
pub use scores::{
    format_float, parse_scores, read_scores, write_category_scores, write_scores, CsvTable,
};
pub use weights::{
    decode_dense, decode_weights, encode_dense, encode_weights, load_dense, load_weights,
    save_dense, save_weights, DenseWeights, MAGIC,
};

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

/// Malformed file content. Byte positions are absolute offsets into the
/// file; line numbers are 1-based.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected \"LWU1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("truncated file at byte {position}: need {needed} bytes, {available} available")]
    Truncated {
        position: usize,
        needed: usize,
        available: usize,
    },

    #[error("header is not valid UTF-8 at byte {position}")]
    Utf8 { position: usize },

    #[error("malformed header JSON at byte {position}: {message}")]
    Json { position: usize, message: String },

    #[error("tensor {tensor} at byte {position} ({length} bytes) extends past end of file ({file_len} bytes)")]
    OutOfBounds {
        tensor: String,
        position: u64,
        length: u64,
        file_len: u64,
    },

    #[error("tensor {second} at byte {position} overlaps tensor {first}")]
    Overlap {
        first: String,
        second: String,
        position: u64,
    },

    #[error("schema violation at byte {position}: {message}")]
    Schema { position: usize, message: String },

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}
