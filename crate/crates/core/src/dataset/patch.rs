//! 32×32 patch extraction, center-block labeling and input normalization.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatasetError, LabelFrame, PixelLabel, Result, RgbdFrame};
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 32;
/// First row/column of the central 2×2 block.
pub const CENTER: usize = PATCH_SIZE / 2 - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channels {
    Rgb,
    Rgbd,
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::Rgb => 3,
            Channels::Rgbd => 4,
        }
    }

    pub fn from_count(count: usize) -> Option<Self> {
        match count {
            3 => Some(Channels::Rgb),
            4 => Some(Channels::Rgbd),
            _ => None,
        }
    }
}

impl std::str::FromStr for Channels {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Channels::Rgb),
            "rgbd" => Ok(Channels::Rgbd),
            other => Err(format!("unknown channel set '{other}' (expected rgb or rgbd)")),
        }
    }
}

impl std::fmt::Display for Channels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Channels::Rgb => "rgb",
            Channels::Rgbd => "rgbd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatchLabel {
    NoOcclusion,
    Occlusion,
}

impl PatchLabel {
    pub fn class_index(self) -> usize {
        match self {
            PatchLabel::NoOcclusion => 0,
            PatchLabel::Occlusion => 1,
        }
    }

    pub fn from_class_index(index: usize) -> Self {
        if index == 1 {
            PatchLabel::Occlusion
        } else {
            PatchLabel::NoOcclusion
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchSource {
    pub frame_id: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// C×32×32, channel order R, G, B[, D].
    pub data: Tensor<f32>,
    pub label: PatchLabel,
    pub source: PatchSource,
}

impl Patch {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Keeps the leading `count` channels (RGB-D → RGB drops depth).
    pub fn select_channels(&self, count: usize) -> Result<Patch> {
        let have = self.channels();
        if count == 0 || count > have {
            return Err(DatasetError::ChannelMismatch {
                expected: count,
                actual: have,
            });
        }
        let plane = PATCH_SIZE * PATCH_SIZE;
        let data = Tensor::new(&[count, PATCH_SIZE, PATCH_SIZE], self.data.data()[..count * plane].to_vec())?;
        Ok(Patch { data, ..self.clone() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractConfig {
    pub stride: usize,
    pub max_invalid_fraction: f64,
    /// Occlusion pixels in the central 2×2 block needed for an Occlusion label.
    pub min_center_votes: usize,
    pub channels: Channels,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            stride: 16,
            max_invalid_fraction: 0.10,
            min_center_votes: 2,
            channels: Channels::Rgbd,
        }
    }
}

/// Patch label from the four center labels alone.
pub fn center_label(center: [PixelLabel; 4], min_votes: usize) -> PatchLabel {
    let votes = center.iter().filter(|&&l| l == PixelLabel::OcclusionEdge).count();
    if votes >= min_votes {
        PatchLabel::Occlusion
    } else {
        PatchLabel::NoOcclusion
    }
}

/// Stride-grid positions along one axis: `floor((extent − 32)/stride) + 1`.
pub fn grid_positions(extent: usize, stride: usize) -> usize {
    if extent < PATCH_SIZE || stride == 0 {
        0
    } else {
        (extent - PATCH_SIZE) / stride + 1
    }
}

fn patch_values(frame: &RgbdFrame, row: usize, col: usize, channels: Channels) -> Vec<f32> {
    let c = channels.count();
    let plane = PATCH_SIZE * PATCH_SIZE;
    let mut out = vec![0.0f32; c * plane];
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let src = (row + y) * frame.width + col + x;
            let dst = y * PATCH_SIZE + x;
            for ch in 0..3 {
                out[ch * plane + dst] = frame.rgb[src * 3 + ch] as f32 / 255.0;
            }
            if c == 4 {
                out[3 * plane + dst] = frame.depth[src];
            }
        }
    }
    out
}

/// Scaled (not yet mean-subtracted) patch at an arbitrary top-left corner.
pub fn crop(frame: &RgbdFrame, row: usize, col: usize, channels: Channels) -> Result<Tensor<f32>> {
    if row + PATCH_SIZE > frame.height || col + PATCH_SIZE > frame.width {
        return Err(DatasetError::FrameTooSmall {
            width: frame.width,
            height: frame.height,
        });
    }
    Ok(Tensor::new(
        &[channels.count(), PATCH_SIZE, PATCH_SIZE],
        patch_values(frame, row, col, channels),
    )?)
}

/// Extracts labeled patches on a stride grid, skipping pre-filtered ones.
///
/// A patch is rejected when any center pixel is `Invalid` or when the
/// fraction of `Invalid` pixels exceeds `max_invalid_fraction`. RGB values
/// are scaled to [0, 1] and depth is in meters.
pub fn extract_patches(frame: &RgbdFrame, labels: &LabelFrame, cfg: &ExtractConfig) -> Result<Vec<Patch>> {
    if cfg.stride == 0 {
        return Err(DatasetError::InvalidStride);
    }
    if frame.width < PATCH_SIZE || frame.height < PATCH_SIZE {
        return Err(DatasetError::FrameTooSmall {
            width: frame.width,
            height: frame.height,
        });
    }
    if labels.width != frame.width || labels.height != frame.height {
        return Err(DatasetError::LabelSize);
    }
    // Summed-area table of invalid labels.
    let (w, h) = (frame.width, frame.height);
    let mut integral = vec![0u32; (w + 1) * (h + 1)];
    for r in 0..h {
        let mut run = 0;
        for c in 0..w {
            run += (labels.at(r, c) == PixelLabel::Invalid) as u32;
            integral[(r + 1) * (w + 1) + c + 1] = integral[r * (w + 1) + c + 1] + run;
        }
    }
    let invalid_in = |r: usize, c: usize| {
        let (r1, c1) = (r + PATCH_SIZE, c + PATCH_SIZE);
        integral[r1 * (w + 1) + c1] + integral[r * (w + 1) + c] - integral[r * (w + 1) + c1] - integral[r1 * (w + 1) + c]
    };
    let max_invalid = cfg.max_invalid_fraction * (PATCH_SIZE * PATCH_SIZE) as f64;
    let mut patches = Vec::new();
    for gy in 0..grid_positions(h, cfg.stride) {
        for gx in 0..grid_positions(w, cfg.stride) {
            let (row, col) = (gy * cfg.stride, gx * cfg.stride);
            let center = [
                labels.at(row + CENTER, col + CENTER),
                labels.at(row + CENTER, col + CENTER + 1),
                labels.at(row + CENTER + 1, col + CENTER),
                labels.at(row + CENTER + 1, col + CENTER + 1),
            ];
            if center.contains(&PixelLabel::Invalid) || invalid_in(row, col) as f64 > max_invalid {
                continue;
            }
            patches.push(Patch {
                data: crop(frame, row, col, cfg.channels)?,
                label: center_label(center, cfg.min_center_votes),
                source: PatchSource {
                    frame_id: frame.id,
                    row,
                    col,
                },
            });
        }
    }
    Ok(patches)
}

/// Per-frame extraction in parallel, concatenated in frame order.
pub fn extract_all(frames: &[RgbdFrame], labels: &[LabelFrame], cfg: &ExtractConfig) -> Result<Vec<Patch>> {
    if frames.len() != labels.len() {
        return Err(DatasetError::LabelSize);
    }
    let per_frame: Vec<Vec<Patch>> = frames
        .par_iter()
        .zip(labels.par_iter())
        .map(|(f, l)| extract_patches(f, l, cfg))
        .collect::<Result<_>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

/// Keeps every Occlusion patch and at most `ratio` × that many randomly
/// chosen NoOcclusion patches, preserving the original order.
pub fn balance(patches: Vec<Patch>, ratio: f64, seed: u64) -> Vec<Patch> {
    let positives = patches.iter().filter(|p| p.label == PatchLabel::Occlusion).count();
    let negatives: Vec<usize> = patches
        .iter()
        .enumerate()
        .filter(|(_, p)| p.label == PatchLabel::NoOcclusion)
        .map(|(i, _)| i)
        .collect();
    let keep_neg = ((positives as f64 * ratio).round() as usize).min(negatives.len());
    let mut keep = vec![false; patches.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for j in sample(&mut rng, negatives.len(), keep_neg) {
        keep[negatives[j]] = true;
    }
    patches
        .into_iter()
        .zip(keep)
        .filter(|(p, k)| *k || p.label == PatchLabel::Occlusion)
        .map(|(p, _)| p)
        .collect()
}

/// Random subset of at most `max` patches in original order.
pub fn subsample(patches: &[Patch], max: usize, seed: u64) -> Vec<Patch> {
    if patches.len() <= max {
        return patches.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, patches.len(), max).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| patches[i].clone()).collect()
}

/// Per-channel means of the training patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub means: Vec<f32>,
}

impl NormStats {
    pub fn compute(train: &[Patch]) -> Result<Self> {
        let first = train.first().ok_or(DatasetError::EmptyTrainingSet)?;
        let c = first.channels();
        let plane = PATCH_SIZE * PATCH_SIZE;
        let mut sums = vec![0.0f64; c];
        for p in train {
            if p.channels() != c {
                return Err(DatasetError::ChannelMismatch {
                    expected: c,
                    actual: p.channels(),
                });
            }
            for (ch, s) in sums.iter_mut().enumerate() {
                *s += p.data.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
        }
        let count = (train.len() * plane) as f64;
        Ok(Self {
            means: sums.into_iter().map(|s| (s / count) as f32).collect(),
        })
    }

    pub fn channels(&self) -> usize {
        self.means.len()
    }

    /// Subtracts the channel means in place. Stats may cover more channels
    /// than the data (RGB-D stats on RGB patches).
    pub fn apply(&self, data: &mut Tensor<f32>) -> Result<()> {
        let c = data.shape()[0];
        if c > self.means.len() {
            return Err(DatasetError::ChannelMismatch {
                expected: self.means.len(),
                actual: c,
            });
        }
        let plane = data.len() / c;
        for (ch, chunk) in data.data_mut().chunks_exact_mut(plane).enumerate() {
            for v in chunk {
                *v -= self.means[ch];
            }
        }
        Ok(())
    }

    pub fn normalize(&self, patches: &mut [Patch]) -> Result<()> {
        patches.iter_mut().try_for_each(|p| self.apply(&mut p.data))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| DatasetError::Format(e.to_string()))?;
        fs::write(path, json).map_err(|e| DatasetError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(w: usize, h: usize) -> RgbdFrame {
        let rgb = (0..w * h * 3).map(|i| (i % 251) as u8).collect();
        RgbdFrame::new(3, 0.0, w, h, rgb, vec![2.0; w * h]).unwrap()
    }

    #[test]
    fn full_frame_grid_count() {
        let f = frame(640, 480);
        let l = LabelFrame::filled(640, 480, PixelLabel::NoEdge);
        let cfg = ExtractConfig {
            stride: 32,
            ..Default::default()
        };
        let p = extract_patches(&f, &l, &cfg).unwrap();
        assert_eq!(p.len(), 300);
        assert!(p.iter().all(|p| p.label == PatchLabel::NoOcclusion));
        assert_eq!(p[21].source, PatchSource { frame_id: 3, row: 32, col: 32 });
    }

    #[test]
    fn patch_channels_are_scaled() {
        let f = frame(40, 40);
        let t = crop(&f, 2, 3, Channels::Rgbd).unwrap();
        assert_eq!(t.shape(), &[4, 32, 32]);
        let src = 2 * 40 + 3;
        assert_eq!(t.data()[0], f.rgb[src * 3] as f32 / 255.0);
        assert_eq!(t.data()[1024], f.rgb[src * 3 + 1] as f32 / 255.0);
        assert_eq!(t.data()[3 * 1024], 2.0);
        assert_eq!(crop(&f, 0, 0, Channels::Rgb).unwrap().shape(), &[3, 32, 32]);
    }

    #[test]
    fn frame_smaller_than_patch() {
        let f = frame(31, 40);
        let l = LabelFrame::filled(31, 40, PixelLabel::NoEdge);
        assert!(matches!(
            extract_patches(&f, &l, &ExtractConfig::default()),
            Err(DatasetError::FrameTooSmall { .. })
        ));
    }

    #[test]
    fn invalid_center_rejects_patch() {
        let f = frame(32, 32);
        let mut l = LabelFrame::filled(32, 32, PixelLabel::NoEdge);
        l.labels[16 * 32 + 15] = PixelLabel::Invalid;
        let cfg = ExtractConfig {
            max_invalid_fraction: 1.0,
            ..Default::default()
        };
        assert!(extract_patches(&f, &l, &cfg).unwrap().is_empty());
        l.labels[16 * 32 + 15] = PixelLabel::NoEdge;
        l.labels[0] = PixelLabel::Invalid;
        assert_eq!(extract_patches(&f, &l, &cfg).unwrap().len(), 1);
        let strict = ExtractConfig {
            max_invalid_fraction: 0.0,
            ..Default::default()
        };
        assert!(extract_patches(&f, &l, &strict).unwrap().is_empty());
    }

    #[test]
    fn center_votes() {
        use PixelLabel::*;
        assert_eq!(center_label([OcclusionEdge, NoEdge, NoEdge, NoEdge], 2), PatchLabel::NoOcclusion);
        assert_eq!(center_label([OcclusionEdge, NoEdge, OcclusionEdge, NoEdge], 2), PatchLabel::Occlusion);
        assert_eq!(center_label([OcclusionEdge, NoEdge, NoEdge, NoEdge], 1), PatchLabel::Occlusion);
    }

    /// Brute-force oracle for a vertical step edge: a patch is Occlusion
    /// exactly when its central columns touch the two edge columns.
    #[test]
    fn step_edge_patch_labels() {
        let (w, h, step) = (96, 48, 50);
        let depth: Vec<f32> = (0..w * h).map(|i| if i % w < step { 1.0 } else { 3.0 }).collect();
        let f = RgbdFrame::new(0, 0.0, w, h, vec![0; w * h * 3], depth).unwrap();
        let l = super::super::make_labels(&f, 0.1).unwrap();
        let cfg = ExtractConfig {
            stride: 1,
            ..Default::default()
        };
        let patches = extract_patches(&f, &l, &cfg).unwrap();
        assert_eq!(patches.len(), grid_positions(w, 1) * grid_positions(h, 1));
        for p in &patches {
            let center_cols = [p.source.col + CENTER, p.source.col + CENTER + 1];
            let straddles = center_cols.iter().any(|&c| c == step - 1 || c == step);
            let want = if straddles { PatchLabel::Occlusion } else { PatchLabel::NoOcclusion };
            assert_eq!(p.label, want, "{:?}", p.source);
        }
    }

    fn labeled(label: PatchLabel, id: usize) -> Patch {
        Patch {
            data: Tensor::full(&[4, 32, 32], id as f32).unwrap(),
            label,
            source: PatchSource { frame_id: id, row: 0, col: 0 },
        }
    }

    #[test]
    fn balance_keeps_positives_and_order() {
        let patches: Vec<Patch> = (0..50)
            .map(|i| labeled(if i % 10 == 0 { PatchLabel::Occlusion } else { PatchLabel::NoOcclusion }, i))
            .collect();
        let kept = balance(patches, 2.0, 1);
        assert_eq!(kept.iter().filter(|p| p.label == PatchLabel::Occlusion).count(), 5);
        assert_eq!(kept.len(), 15);
        assert!(kept.windows(2).all(|w| w[0].source.frame_id < w[1].source.frame_id));
    }

    #[test]
    fn normalized_training_set_has_zero_mean() {
        let f = frame(64, 64);
        let l = LabelFrame::filled(64, 64, PixelLabel::NoEdge);
        let mut p = extract_patches(&f, &l, &ExtractConfig { stride: 8, ..Default::default() }).unwrap();
        let stats = NormStats::compute(&p).unwrap();
        stats.normalize(&mut p).unwrap();
        let after = NormStats::compute(&p).unwrap();
        assert!(after.means.iter().all(|m| m.abs() < 1e-6), "{:?}", after.means);
    }

    #[test]
    fn empty_training_set() {
        assert!(matches!(NormStats::compute(&[]), Err(DatasetError::EmptyTrainingSet)));
    }

    #[test]
    fn stats_persist_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        let stats = NormStats {
            means: vec![0.1234567, 0.5, 1.0 / 3.0, 2.718_281_7],
        };
        stats.save(&path).unwrap();
        let back = NormStats::load(&path).unwrap();
        assert_eq!(back, stats);
        let mut a = labeled(PatchLabel::Occlusion, 3);
        let mut b = a.clone();
        stats.apply(&mut a.data).unwrap();
        back.apply(&mut b.data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rgb_selection_drops_depth() {
        let p = labeled(PatchLabel::Occlusion, 2);
        let rgb = p.select_channels(3).unwrap();
        assert_eq!(rgb.data.shape(), &[3, 32, 32]);
        assert!(rgb.select_channels(4).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_a_shift(a in -2.0f32..2.0, b in -2.0f32..2.0, mean in -1.0f32..1.0) {
            let stats = NormStats { means: vec![mean; 4] };
            let mut ta = Tensor::full(&[4, 32, 32], a).unwrap();
            let mut tb = Tensor::full(&[4, 32, 32], b).unwrap();
            stats.apply(&mut ta).unwrap();
            stats.apply(&mut tb).unwrap();
            let diff = ta.data()[0] - tb.data()[0];
            prop_assert!((diff - (a - b)).abs() < 1e-5);
        }

        #[test]
        fn non_center_labels_never_flip_patch_label(
            center in proptest::collection::vec(0u8..2, 4),
            noise in proptest::collection::vec(0u8..2, 32 * 32),
        ) {
            let f = frame(32, 32);
            let to_label = |v: u8| if v == 1 { PixelLabel::OcclusionEdge } else { PixelLabel::NoEdge };
            let mut l = LabelFrame::filled(32, 32, PixelLabel::NoEdge);
            let centers = [CENTER * 32 + CENTER, CENTER * 32 + CENTER + 1, (CENTER + 1) * 32 + CENTER, (CENTER + 1) * 32 + CENTER + 1];
            for (i, &c) in centers.iter().enumerate() {
                l.labels[c] = to_label(center[i]);
            }
            let before = extract_patches(&f, &l, &ExtractConfig::default()).unwrap()[0].label;
            for (i, &v) in noise.iter().enumerate() {
                if !centers.contains(&i) {
                    l.labels[i] = to_label(v);
                }
            }
            let after = extract_patches(&f, &l, &ExtractConfig::default()).unwrap()[0].label;
            prop_assert_eq!(before, after);
        }

        #[test]
        fn rejection_is_monotone_in_invalid_fraction(
            holes in proptest::collection::vec(0usize..64 * 48, 0..400),
            lo in 0.0f64..0.5,
            delta in 0.0f64..0.5,
        ) {
            let f = frame(64, 48);
            let mut l = LabelFrame::filled(64, 48, PixelLabel::NoEdge);
            for h in holes {
                l.labels[h] = PixelLabel::Invalid;
            }
            let count = |frac: f64| {
                extract_patches(&f, &l, &ExtractConfig { stride: 4, max_invalid_fraction: frac, ..Default::default() })
                    .unwrap()
                    .len()
            };
            prop_assert!(count(lo) <= count(lo + delta));
            prop_assert!(count(1.0) <= grid_positions(64, 4) * grid_positions(48, 4));
        }
    }
}
