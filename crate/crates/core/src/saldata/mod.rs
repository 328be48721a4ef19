//! Stimuli, fixations, ground-truth maps, synthetic pages and persistence.

use std::path::{Path, PathBuf};

mod dataset;
mod fiwi;
mod io;
mod map;
mod stimulus;
pub mod synth;

pub use dataset::{
    read_dataset, split_indices, synthetic_pages, write_dataset, Dataset, Sample, DATASET_MANIFEST,
};
pub use fiwi::load_fiwi;
pub use io::{
    decode_pgm, encode_fixations, encode_mask, encode_pgm, encode_ppm, load_fixations, load_map, load_mask,
    load_stimulus, parse_fixations, save_fixations, save_map, save_ppm,
};
pub use map::SaliencyMap;
pub use stimulus::{
    fixations_to_saliency, rescale_coord, Category, ElementKind, Fixation, FixationSet, Layout, Stimulus,
};
pub use synth::{synth_page, synth_page_sized};

/// Divides by the maximum; see [`SaliencyMap::normalize`].
pub fn normalize_map(map: &SaliencyMap) -> Result<SaliencyMap, DataError> {
    map.normalize()
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("extents mismatch (expected {expected:?}): {detail}")]
    Extents { expected: (usize, usize), detail: String },
    #[error("map has no positive value")]
    ZeroMap,
    #[error("unknown layout {0:?}")]
    UnknownLayout(String),
    #[error("pixel value {0} outside [0, 1]")]
    PixelRange(f64),
    #[error("fixation ({x}, {y}) outside {width}x{height}")]
    FixationOutOfBounds { x: usize, y: usize, width: usize, height: usize },
    #[error("stimulus {0:?} has no fixations")]
    NoFixations(String),
    #[error("sigma_fix must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("image decode failed: {0}")]
    Image(String),
    #[error("line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("no fixation file for stimulus {stimulus:?} (looked for {expected})")]
    MissingFixations { stimulus: String, expected: PathBuf },
    #[error("dataset manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    At {
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Attaches the file the error came from.
    pub fn at(self, path: &Path) -> Self {
        DataError::At {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping path context.
    pub fn root(&self) -> &DataError {
        match self {
            DataError::At { source, .. } => source.root(),
            e => e,
        }
    }
}
