use super::{DatasetError, Result};

/// Registered color and depth images of one time step.
///
/// `rgb` is interleaved row-major (H×W×3), `depth` is in meters with `0.0`
/// wherever `valid` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub id: usize,
    pub timestamp: f64,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

impl RgbdFrame {
    /// Builds a frame; non-positive or non-finite depth marks a pixel invalid.
    pub fn new(id: usize, timestamp: f64, width: usize, height: usize, rgb: Vec<u8>, mut depth: Vec<f32>) -> Result<Self> {
        let pixels = width * height;
        if rgb.len() != pixels * 3 || depth.len() != pixels {
            return Err(DatasetError::FrameSize {
                width,
                height,
                rgb: rgb.len(),
                depth: depth.len(),
            });
        }
        let valid: Vec<bool> = depth.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        for (d, &ok) in depth.iter_mut().zip(&valid) {
            if !ok {
                *d = 0.0;
            }
        }
        Ok(Self {
            id,
            timestamp,
            width,
            height,
            rgb,
            depth,
            valid,
        })
    }

    pub fn depth_at(&self, row: usize, col: usize) -> Option<f32> {
        let i = row * self.width + col;
        self.valid[i].then_some(self.depth[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PixelLabel {
    NoEdge,
    OcclusionEdge,
    Invalid,
}

impl PixelLabel {
    /// Gray level used in label images: 128 no edge, 255 occlusion, 0 invalid.
    pub fn gray(self) -> u8 {
        match self {
            PixelLabel::NoEdge => 128,
            PixelLabel::OcclusionEdge => 255,
            PixelLabel::Invalid => 0,
        }
    }

    pub fn from_gray(value: u8) -> Option<Self> {
        match value {
            128 => Some(PixelLabel::NoEdge),
            255 => Some(PixelLabel::OcclusionEdge),
            0 => Some(PixelLabel::Invalid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelFrame {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<PixelLabel>,
}

impl LabelFrame {
    pub fn filled(width: usize, height: usize, label: PixelLabel) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> PixelLabel {
        self.labels[row * self.width + col]
    }

    pub fn count(&self, label: PixelLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn to_gray(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.gray()).collect()
    }
}

const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Thresholds depth discontinuities.
///
/// A valid pixel with at least one valid 8-neighbor is an occlusion edge
/// when the largest absolute depth difference to its valid neighbors exceeds
/// `tau_depth`. Pixels that are invalid, or whose in-frame neighbors are all
/// invalid, are `Invalid`. Border pixels use the neighbors they have.
pub fn make_labels(frame: &RgbdFrame, tau_depth: f32) -> Result<LabelFrame> {
    if !(tau_depth > 0.0 && tau_depth.is_finite()) {
        return Err(DatasetError::InvalidThreshold(tau_depth));
    }
    let (w, h) = (frame.width, frame.height);
    let mut labels = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let Some(d) = frame.depth_at(row, col) else {
                labels.push(PixelLabel::Invalid);
                continue;
            };
            let mut any_valid = false;
            let mut max_diff = 0.0f32;
            for (dr, dc) in NEIGHBORS {
                let (r, c) = (row as isize + dr, col as isize + dc);
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    continue;
                }
                if let Some(q) = frame.depth_at(r as usize, c as usize) {
                    any_valid = true;
                    max_diff = max_diff.max((d - q).abs());
                }
            }
            labels.push(match (any_valid, max_diff > tau_depth) {
                (false, _) => PixelLabel::Invalid,
                (true, true) => PixelLabel::OcclusionEdge,
                (true, false) => PixelLabel::NoEdge,
            });
        }
    }
    Ok(LabelFrame {
        width: w,
        height: h,
        labels,
    })
}
