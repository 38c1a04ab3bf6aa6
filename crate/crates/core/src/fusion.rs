//! Full-frame inference: a constant-stride patch sweep whose per-patch
//! occlusion confidences are fused into a heatmap with Gaussian kernels.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{crop, Channels, DatasetError, NormStats, RgbdFrame, PATCH_SIZE};
use crate::model::CnnModel;
use crate::tensor::Tensor;
use crate::trainer::{occlusion_probabilities, TrainError};

/// Offset of a patch center from its top-left pixel, in both axes: the
/// lower-right pixel of the central 2×2 block.
pub const CENTER_OFFSET: usize = PATCH_SIZE / 2;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("normalization statistics are required for inference")]
    MissingStats,
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("model has {model} channels but statistics have {stats}")]
    ChannelMismatch { model: usize, stats: usize },
    #[error("no classifications to fuse")]
    Empty,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {message}")]
    Output { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Kernel-weighted mean of confidences.
    Normalized,
    /// Plain sum of confidence kernels, clamped to [0, 1].
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub sweep_stride: usize,
    pub fwhm: f64,
    pub patch_size: usize,
    pub mode: FusionMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            sweep_stride: 8,
            fwhm: 8.0,
            patch_size: PATCH_SIZE,
            mode: FusionMode::Normalized,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size != PATCH_SIZE {
            return Err(FusionError::Config(format!("patch_size must be {PATCH_SIZE}")));
        }
        if self.sweep_stride < 1 || self.sweep_stride > self.patch_size {
            return Err(FusionError::Config(format!(
                "sweep stride {} outside 1..={}",
                self.sweep_stride, self.patch_size
            )));
        }
        if !(self.fwhm > 0.0 && self.fwhm.is_finite()) {
            return Err(FusionError::Config(format!("fwhm must be positive, got {}", self.fwhm)));
        }
        Ok(())
    }
}

/// One swept patch: its center pixel and the Occlusion posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub row: usize,
    pub col: usize,
    pub confidence: f32,
}

/// Gaussian standard deviation with the given full width at half maximum.
pub fn sigma_from_fwhm(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Isotropic Gaussian with peak `confidence`, zero beyond radius `2·fwhm`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    pub confidence: f64,
    pub fwhm: f64,
    pub sigma: f64,
}

impl GaussianKernel {
    pub fn radius(&self) -> f64 {
        2.0 * self.fwhm
    }

    /// Kernel value at offset (dy, dx) pixels.
    pub fn value(&self, dy: f64, dx: f64) -> f64 {
        self.confidence * unit_gaussian(dy * dy + dx * dx, self.sigma, self.radius())
    }
}

fn unit_gaussian(r2: f64, sigma: f64, radius: f64) -> f64 {
    if r2 > radius * radius {
        0.0
    } else {
        (-r2 / (2.0 * sigma * sigma)).exp()
    }
}

pub fn gaussian_kernel(confidence: f64, fwhm: f64) -> GaussianKernel {
    GaussianKernel {
        confidence,
        fwhm,
        sigma: sigma_from_fwhm(fwhm),
    }
}

/// Number of patch positions (rows, cols) for a sweep.
pub fn grid_dims(height: usize, width: usize, stride: usize, patch: usize) -> (usize, usize) {
    if height < patch || width < patch || stride == 0 {
        return (0, 0);
    }
    ((height - patch) / stride + 1, (width - patch) / stride + 1)
}

const SWEEP_CHUNK: usize = 256;

/// Classifies every grid patch of `frame`. Patches are normalized with
/// `stats`, which must match the model's channel count.
pub fn sweep(model: &CnnModel, frame: &RgbdFrame, stats: Option<&NormStats>, cfg: &FusionConfig) -> Result<Vec<Classification>> {
    cfg.validate()?;
    let stats = stats.ok_or(FusionError::MissingStats)?;
    if stats.channels() != model.channels() {
        return Err(FusionError::ChannelMismatch {
            model: model.channels(),
            stats: stats.channels(),
        });
    }
    let channels = Channels::from_count(model.channels()).ok_or(FusionError::ChannelMismatch {
        model: model.channels(),
        stats: stats.channels(),
    })?;
    let (rows, cols) = grid_dims(frame.height, frame.width, cfg.sweep_stride, cfg.patch_size);
    if rows == 0 {
        return Err(DatasetError::FrameTooSmall {
            width: frame.width,
            height: frame.height,
        }
        .into());
    }
    let positions: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r * cfg.sweep_stride, c * cfg.sweep_stride)))
        .collect();
    let mut out = Vec::with_capacity(positions.len());
    let example = channels.count() * PATCH_SIZE * PATCH_SIZE;
    for group in positions.chunks(SWEEP_CHUNK) {
        let mut data = Vec::with_capacity(group.len() * example);
        for &(r, c) in group {
            let mut patch = crop(frame, r, c, channels)?;
            stats.apply(&mut patch)?;
            data.extend_from_slice(patch.data());
        }
        let batch = Tensor::new(&[group.len(), channels.count(), PATCH_SIZE, PATCH_SIZE], data).map_err(DatasetError::from)?;
        let probs = occlusion_probabilities(model, &batch)?;
        out.extend(group.iter().zip(probs).map(|(&(r, c), p)| Classification {
            row: r + CENTER_OFFSET,
            col: c + CENTER_OFFSET,
            confidence: p,
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub frame_id: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major fused confidence in [0, 1]; 0 where uncovered.
    pub values: Vec<f32>,
    /// Row-major Σ of unit-peak kernels reaching each pixel.
    pub coverage: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn covered(&self, row: usize, col: usize) -> bool {
        self.coverage[row * self.width + col] > 0.0
    }
}

/// Fuses classifications into a `width`×`height` heatmap. The result does not
/// depend on the order of `classifications`.
pub fn fuse(classifications: &[Classification], cfg: &FusionConfig, width: usize, height: usize, frame_id: usize) -> Result<Heatmap> {
    cfg.validate()?;
    if classifications.is_empty() {
        return Err(FusionError::Empty);
    }
    let mut sorted = classifications.to_vec();
    sorted.sort_by(|a, b| {
        (a.row, a.col)
            .cmp(&(b.row, b.col))
            .then(a.confidence.total_cmp(&b.confidence))
    });
    let sigma = sigma_from_fwhm(cfg.fwhm);
    let radius = 2.0 * cfg.fwhm;
    let reach = radius.floor() as i64;
    let side = (2 * reach + 1) as usize;
    let table: Vec<f64> = (0..side * side)
        .map(|k| {
            let dy = (k / side) as f64 - reach as f64;
            let dx = (k % side) as f64 - reach as f64;
            unit_gaussian(dy * dy + dx * dx, sigma, radius)
        })
        .collect();

    let mut num = vec![0.0f64; width * height];
    let mut den = vec![0.0f64; width * height];
    for c in &sorted {
        let conf = c.confidence as f64;
        let (cr, cc) = (c.row as i64, c.col as i64);
        let r0 = (cr - reach).max(0);
        let r1 = (cr + reach).min(height as i64 - 1);
        let c0 = (cc - reach).max(0);
        let c1 = (cc + reach).min(width as i64 - 1);
        for r in r0..=r1 {
            let trow = ((r - cr + reach) as usize) * side;
            for col in c0..=c1 {
                let g = table[trow + (col - cc + reach) as usize];
                let i = r as usize * width + col as usize;
                num[i] += conf * g;
                den[i] += g;
            }
        }
    }
    let values = num
        .iter()
        .zip(&den)
        .map(|(&n, &d)| match cfg.mode {
            _ if d <= 0.0 => 0.0,
            FusionMode::Normalized => (n / d).clamp(0.0, 1.0) as f32,
            FusionMode::Sum => n.clamp(0.0, 1.0) as f32,
        })
        .collect();
    Ok(Heatmap {
        frame_id,
        width,
        height,
        values,
        coverage: den,
    })
}

/// Covered pixels with value strictly above `threshold`.
pub fn binarize(heatmap: &Heatmap, threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(FusionError::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(heatmap
        .values
        .iter()
        .zip(&heatmap.coverage)
        .map(|(&v, &cov)| cov > 0.0 && v as f64 > threshold)
        .collect())
}

/// Red-yellow-blue ramp: 0 blue, 0.5 yellow, 1 red, linear in between.
pub fn false_color(value: f32) -> [u8; 3] {
    let v = value.clamp(0.0, 1.0);
    let (r, g, b) = if v < 0.5 {
        let t = v / 0.5;
        (t, t, 1.0 - t)
    } else {
        let t = (v - 0.5) / 0.5;
        (1.0, 1.0 - t, 0.0)
    };
    [r, g, b].map(|x| (255.0 * x).round() as u8)
}

pub fn gray_levels(heatmap: &Heatmap) -> Vec<u8> {
    heatmap.values.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect()
}

fn image_err(path: &Path, e: image::ImageError) -> FusionError {
    FusionError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// 8-bit grayscale heatmap, `round(255·value)`.
pub fn render_gray(heatmap: &Heatmap, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(heatmap.width as u32, heatmap.height as u32, gray_levels(heatmap)).expect("buffer size");
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn render_false_color(heatmap: &Heatmap, path: &Path) -> Result<()> {
    let data: Vec<u8> = heatmap.values.iter().flat_map(|&v| false_color(v)).collect();
    let img = RgbImage::from_raw(heatmap.width as u32, heatmap.height as u32, data).expect("buffer size");
    img.save(path).map_err(|e| image_err(path, e))
}

/// Binary mask as 0/255 grayscale.
pub fn render_mask(mask: &[bool], width: usize, height: usize, path: &Path) -> Result<()> {
    let data = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, data).expect("buffer size");
    img.save(path).map_err(|e| image_err(path, e))
}

/// One line of the timing sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub frame_id: usize,
    pub stride: usize,
    pub patches: usize,
    pub wall_time: f64,
}

pub fn append_timing(path: &Path, entry: &TimingEntry) -> Result<()> {
    let err = |e: std::io::Error| FusionError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
    let line = serde_json::to_string(entry).expect("timing entry serializes");
    writeln!(f, "{line}").map_err(err)
}

/// Sweep plus fusion for one frame, timing the whole pass.
pub fn infer_frame(model: &CnnModel, frame: &RgbdFrame, stats: Option<&NormStats>, cfg: &FusionConfig) -> Result<(Heatmap, TimingEntry)> {
    let start = Instant::now();
    let classes = sweep(model, frame, stats, cfg)?;
    let heatmap = fuse(&classes, cfg, frame.width, frame.height, frame.id)?;
    let timing = TimingEntry {
        frame_id: frame.id,
        stride: cfg.sweep_stride,
        patches: classes.len(),
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((heatmap, timing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, InitSchedule};

    fn cfg() -> FusionConfig {
        FusionConfig::default()
    }

    fn class(row: usize, col: usize, confidence: f32) -> Classification {
        Classification { row, col, confidence }
    }

    #[test]
    fn grid_counts() {
        assert_eq!(grid_dims(480, 640, 8, 32), (57, 77));
        assert_eq!(grid_dims(480, 640, 4, 32), (113, 153));
        assert_eq!(57 * 77, 4389);
        assert_eq!(113 * 153, 17289);
        assert_eq!(grid_dims(31, 640, 4, 32), (0, 0));
    }

    #[test]
    fn kernel_shape() {
        assert!((sigma_from_fwhm(8.0) - 3.3972).abs() < 1e-4);
        for fwhm in [2.0, 8.0, 13.5] {
            let k = gaussian_kernel(0.8, fwhm);
            assert_eq!(k.value(0.0, 0.0), 0.8);
            assert!((k.value(fwhm / 2.0, 0.0) - 0.4).abs() < 1e-9);
            assert!((k.value(0.0, -fwhm / 2.0) - 0.4).abs() < 1e-9);
            assert_eq!(k.value(2.0 * fwhm + 0.01, 0.0), 0.0);
            assert!(k.value(2.0 * fwhm, 0.0) / 0.8 < 1.6e-5);
        }
        let zero = gaussian_kernel(0.0, 8.0);
        assert_eq!(zero.value(1.0, 2.0), 0.0);
    }

    #[test]
    fn two_kernel_midpoint() {
        let hm = fuse(&[class(20, 20, 1.0), class(20, 28, 0.0)], &cfg(), 48, 40, 0).unwrap();
        assert!((hm.at(20, 24) - 0.5).abs() < 1e-6);
        assert!(hm.at(20, 20) > 0.5 && hm.at(20, 28) < 0.5);
    }

    #[test]
    fn single_kernel_is_flat_on_support() {
        let hm = fuse(&[class(30, 30, 0.7)], &cfg(), 64, 64, 3).unwrap();
        assert_eq!(hm.frame_id, 3);
        assert_eq!(hm.at(30, 30), 0.7);
        assert_eq!(hm.at(30, 30 + 16), 0.7);
        assert_eq!(hm.at(30, 30 + 17), 0.0);
        assert!(!hm.covered(30, 47));
        assert!(hm.covered(41, 41));
        assert!(!hm.covered(42, 42));
    }

    #[test]
    fn equal_confidences_give_constant_map() {
        let cs: Vec<_> = (0..4).flat_map(|r| (0..4).map(move |c| class(8 + 8 * r, 8 + 8 * c, 0.3))).collect();
        let hm = fuse(&cs, &cfg(), 40, 40, 0).unwrap();
        for (i, &v) in hm.values.iter().enumerate() {
            if hm.coverage[i] > 0.0 {
                assert!((v - 0.3).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sum_mode_clamps() {
        let c = FusionConfig {
            mode: FusionMode::Sum,
            ..cfg()
        };
        let hm = fuse(&[class(10, 10, 0.9), class(10, 11, 0.9)], &c, 20, 20, 0).unwrap();
        assert_eq!(hm.at(10, 10), 1.0);
        assert!(hm.at(10, 19) < 0.5);
    }

    #[test]
    fn binarize_is_strict() {
        let hm = fuse(&[class(10, 10, 0.5)], &cfg(), 20, 20, 0).unwrap();
        assert!(binarize(&hm, 0.5).unwrap().iter().all(|&m| !m));
        assert_eq!(binarize(&hm, 0.4).unwrap().iter().filter(|&&m| m).count(), hm.coverage.iter().filter(|&&c| c > 0.0).count());
        assert!(binarize(&hm, 1.0).is_err());
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(false_color(0.0), [0, 0, 255]);
        assert_eq!(false_color(0.5), [255, 255, 0]);
        assert_eq!(false_color(1.0), [255, 0, 0]);
    }

    #[test]
    fn renders() {
        let dir = tempfile::tempdir().unwrap();
        let mut hm = fuse(&[class(5, 5, 1.0)], &cfg(), 8, 6, 0).unwrap();
        hm.values.fill(1.0);
        let path = dir.path().join("h.png");
        render_gray(&hm, &path).unwrap();
        assert!(image::open(&path).unwrap().to_luma8().iter().all(|&v| v == 255));
        hm.values = (0..48).map(|i| i as f32 / 47.0).collect();
        render_gray(&hm, &path).unwrap();
        let back = image::open(&path).unwrap().to_luma8();
        for (b, v) in back.iter().zip(&hm.values) {
            assert!((*b as f32 / 255.0 - v).abs() <= 0.5 / 255.0 + 1e-6);
        }
        render_false_color(&hm, &dir.path().join("c.png")).unwrap();
        render_mask(&binarize(&hm, 0.5).unwrap(), 8, 6, &dir.path().join("m.png")).unwrap();
    }

    #[test]
    fn sweep_needs_stats() {
        let model = init_model(4, &InitSchedule::default(), 0).unwrap();
        let frame = RgbdFrame::new(0, 0.0, 40, 36, vec![50; 40 * 36 * 3], vec![1.0; 40 * 36]).unwrap();
        assert!(matches!(sweep(&model, &frame, None, &cfg()), Err(FusionError::MissingStats)));
        let stats = NormStats { means: vec![0.2, 0.2, 0.2, 1.0] };
        let out = sweep(&model, &frame, Some(&stats), &FusionConfig { sweep_stride: 4, ..cfg() }).unwrap();
        assert_eq!(out.len(), 3 * 2);
        assert_eq!((out[0].row, out[0].col), (16, 16));
        assert_eq!((out[5].row, out[5].col), (20, 24));
        let rgb_stats = NormStats { means: vec![0.0; 3] };
        assert!(matches!(
            sweep(&model, &frame, Some(&rgb_stats), &cfg()),
            Err(FusionError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn timing_sidecar_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        for stride in [4, 8] {
            append_timing(&path, &TimingEntry { frame_id: 0, stride, patches: 1, wall_time: 0.5 }).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let entries: Vec<TimingEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].stride, 8);
    }
}
