#![allow(dead_code)]

use occnet::fusion::{Classification, FusionConfig, FusionMode};

/// Per-pixel double loop over every classification, straight from the
/// weighted-mean definition. Returns (values, coverage).
pub fn naive_fuse(classes: &[Classification], cfg: &FusionConfig, width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let sigma = cfg.fwhm / (2.0 * (2.0 * 2f64.ln()).sqrt());
    let cutoff = 2.0 * cfg.fwhm;
    let mut values = vec![0.0; width * height];
    let mut coverage = vec![0.0; width * height];
    for r in 0..height {
        for c in 0..width {
            let (mut num, mut den) = (0.0, 0.0);
            for k in classes {
                let dy = r as f64 - k.row as f64;
                let dx = c as f64 - k.col as f64;
                let d = (dy * dy + dx * dx).sqrt();
                if d <= cutoff {
                    let g = (-d * d / (2.0 * sigma * sigma)).exp();
                    num += k.confidence as f64 * g;
                    den += g;
                }
            }
            let i = r * width + c;
            coverage[i] = den;
            values[i] = match cfg.mode {
                _ if den == 0.0 => 0.0,
                FusionMode::Normalized => num / den,
                FusionMode::Sum => num.min(1.0),
            };
        }
    }
    (values, coverage)
}

/// Largest absolute difference between the library heatmap and the oracle.
pub fn max_fuse_gap(classes: &[Classification], cfg: &FusionConfig, width: usize, height: usize) -> f64 {
    let got = occnet::fusion::fuse(classes, cfg, width, height, 0).unwrap();
    let (want, cover) = naive_fuse(classes, cfg, width, height);
    let mut gap: f64 = 0.0;
    for i in 0..want.len() {
        gap = gap.max((got.values[i] as f64 - want[i]).abs());
        gap = gap.max((got.coverage[i] - cover[i]).abs());
    }
    gap
}
