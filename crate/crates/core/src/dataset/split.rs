use super::{DatasetError, Result};

/// Contiguous train/test split: frames `[0, boundary)` train, the rest test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub boundary: usize,
}

impl SplitSpec {
    /// Boundary at `round(train_fraction · frames)`.
    pub fn from_fraction(train_fraction: f64, frames: usize) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(DatasetError::InvalidFraction(train_fraction));
        }
        let boundary = (train_fraction * frames as f64).round() as usize;
        Self::at(boundary, frames)
    }

    pub fn at(boundary: usize, frames: usize) -> Result<Self> {
        if boundary == 0 || boundary >= frames {
            return Err(DatasetError::DegenerateSplit { boundary, frames });
        }
        Ok(Self {
            train_fraction: boundary as f64 / frames as f64,
            boundary,
        })
    }
}

pub fn split_sequence<'a, T>(frames: &'a [T], spec: &SplitSpec) -> Result<(&'a [T], &'a [T])> {
    if spec.boundary == 0 || spec.boundary >= frames.len() {
        return Err(DatasetError::DegenerateSplit {
            boundary: spec.boundary,
            frames: frames.len(),
        });
    }
    Ok(frames.split_at(spec.boundary))
}
