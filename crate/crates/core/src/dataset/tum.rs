//! TUM RGB-D directory layout: `rgb.txt` / `depth.txt` timestamp indices,
//! 8-bit color PNGs and 16-bit depth PNGs at 5000 raw units per meter.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};
use rayon::prelude::*;

use super::{DatasetError, LabelFrame, PixelLabel, Result, RgbdFrame};

/// Raw depth units per meter.
pub const DEPTH_SCALE: f32 = 5000.0;
/// Largest rgb/depth timestamp difference accepted as a pair, in seconds.
pub const MAX_TIME_DIFF: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<RgbdFrame>,
    /// RGB frames without a depth partner.
    pub dropped: usize,
}

fn read_index(dir: &Path, name: &str) -> Result<Vec<(f64, PathBuf)>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(DatasetError::MissingIndex(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(ts), Some(file)) = (parts.next(), parts.next()) else {
            return Err(DatasetError::IndexSyntax {
                path: path.clone(),
                line: n + 1,
                message: "expected '<timestamp> <file>'".into(),
            });
        };
        let ts: f64 = ts.parse().map_err(|_| DatasetError::IndexSyntax {
            path: path.clone(),
            line: n + 1,
            message: format!("bad timestamp '{ts}'"),
        })?;
        entries.push((ts, dir.join(file)));
    }
    Ok(entries)
}

/// Nearest-timestamp association; each depth frame is used at most once,
/// closest pairs first.
fn associate(rgb: &[(f64, PathBuf)], depth: &[(f64, PathBuf)]) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, (tr, _)) in rgb.iter().enumerate() {
        for (j, (td, _)) in depth.iter().enumerate() {
            let dt = (tr - td).abs();
            if dt <= MAX_TIME_DIFF {
                candidates.push((dt, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut rgb_used = vec![false; rgb.len()];
    let mut depth_used = vec![false; depth.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !rgb_used[i] && !depth_used[j] {
            rgb_used[i] = true;
            depth_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_by(|a, b| rgb[a.0].0.total_cmp(&rgb[b.0].0));
    pairs
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn decode_pair(id: usize, timestamp: f64, rgb_path: &Path, depth_path: &Path) -> Result<RgbdFrame> {
    let rgb = match open_image(rgb_path)? {
        DynamicImage::ImageRgb8(img) => img,
        other => other.to_rgb8(),
    };
    let depth_img = match open_image(depth_path)? {
        DynamicImage::ImageLuma16(img) => img,
        _ => {
            return Err(DatasetError::Image {
                path: depth_path.to_path_buf(),
                message: "depth must be a 16-bit single-channel PNG".into(),
            })
        }
    };
    if rgb.dimensions() != depth_img.dimensions() {
        return Err(DatasetError::Image {
            path: depth_path.to_path_buf(),
            message: format!(
                "depth size {:?} differs from rgb size {:?}",
                depth_img.dimensions(),
                rgb.dimensions()
            ),
        });
    }
    let (w, h) = rgb.dimensions();
    let depth = depth_img.as_raw().iter().map(|&raw| raw as f32 / DEPTH_SCALE).collect();
    RgbdFrame::new(id, timestamp, w as usize, h as usize, rgb.into_raw(), depth)
}

/// Loads every associated rgb/depth pair of a TUM-style directory, in rgb
/// timestamp order. Frame ids are positions in the returned list.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let rgb = read_index(dir, "rgb.txt")?;
    let depth = read_index(dir, "depth.txt")?;
    let pairs = associate(&rgb, &depth);
    if pairs.is_empty() {
        return Err(DatasetError::NoPairs(MAX_TIME_DIFF));
    }
    let dropped = rgb.len() - pairs.len();
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} rgb frames without a depth partner", dir.display());
    }
    let frames = pairs
        .par_iter()
        .enumerate()
        .map(|(id, &(i, j))| decode_pair(id, rgb[i].0, &rgb[i].1, &depth[j].1))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence { frames, dropped })
}

fn save(img_result: image::ImageResult<()>, path: &Path) -> Result<()> {
    img_result.map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_rgb_png(frame: &RgbdFrame, path: &Path) -> Result<()> {
    let img = RgbImage::from_raw(frame.width as u32, frame.height as u32, frame.rgb.clone()).expect("buffer size");
    save(img.save(path), path)
}

/// Depth in meters → raw 16-bit units; invalid pixels are written as 0.
pub fn write_depth_png(frame: &RgbdFrame, path: &Path) -> Result<()> {
    let raw: Vec<u16> = frame
        .depth
        .iter()
        .zip(&frame.valid)
        .map(|(&d, &ok)| if ok { (d * DEPTH_SCALE).round().clamp(1.0, u16::MAX as f32) as u16 } else { 0 })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(frame.width as u32, frame.height as u32, raw).expect("buffer size");
    save(img.save(path), path)
}

/// Label image: gray 128 no edge, white occlusion edge, black invalid.
pub fn write_label_png(labels: &LabelFrame, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(labels.width as u32, labels.height as u32, labels.to_gray()).expect("buffer size");
    save(img.save(path), path)
}

/// Reads a label image (PNG, or binary PGM).
pub fn read_label_png(path: &Path) -> Result<LabelFrame> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let labels = img
        .as_raw()
        .iter()
        .map(|&v| {
            PixelLabel::from_gray(v).ok_or_else(|| DatasetError::Image {
                path: path.to_path_buf(),
                message: format!("gray level {v} is not a label"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelFrame {
        width: w as usize,
        height: h as usize,
        labels,
    })
}
