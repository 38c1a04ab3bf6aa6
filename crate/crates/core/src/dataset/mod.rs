//! RGB-D frames, depth-derived occlusion labels and labeled patches.

mod cache;
mod frame;
mod patch;
mod split;
pub mod synth;
mod tum;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use cache::{read_patch_cache, write_patch_cache, CACHE_MAGIC, CACHE_VERSION};
pub use frame::{make_labels, LabelFrame, PixelLabel, RgbdFrame};
pub use patch::{
    balance, center_label, crop, extract_all, extract_patches, grid_positions, subsample, Channels, ExtractConfig,
    NormStats, Patch, PatchLabel, PatchSource, CENTER, PATCH_SIZE,
};
pub use split::{split_sequence, SplitSpec};
pub use synth::{synth_scene, SceneSpec, SyntheticFrame};
pub use tum::{load_sequence, read_label_png, write_depth_png, write_label_png, write_rgb_png, Sequence, DEPTH_SCALE, MAX_TIME_DIFF};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing index file {0}")]
    MissingIndex(PathBuf),
    #[error("{path}:{line}: {message}")]
    IndexSyntax { path: PathBuf, line: usize, message: String },
    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("no rgb/depth pairs within {0} s")]
    NoPairs(f64),
    #[error("frame buffers do not match {width}×{height} (rgb {rgb} bytes, depth {depth} values)")]
    FrameSize {
        width: usize,
        height: usize,
        rgb: usize,
        depth: usize,
    },
    #[error("label frame size does not match its frame")]
    LabelSize,
    #[error("frame {width}×{height} is smaller than a 32×32 patch")]
    FrameTooSmall { width: usize, height: usize },
    #[error("extraction stride must be at least 1")]
    InvalidStride,
    #[error("depth threshold must be positive, got {0}")]
    InvalidThreshold(f32),
    #[error("expected {expected} channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("split boundary {boundary} is degenerate for {frames} frames")]
    DegenerateSplit { boundary: usize, frames: usize },
    #[error("train fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error("invalid scene: {0}")]
    SceneSpec(String),
    #[error("{0}")]
    Format(String),
    #[error("patch cache is truncated")]
    TruncatedCache,
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DatasetError>;
