//! Synthetic RGB-D scenes with exact occlusion ground truth.
//!
//! A scene is a fronto-parallel background plane with axis-aligned boxes in
//! front of it (depth discontinuities) and painted rectangles on the
//! background (appearance edges only). Depth boxes may cast a drop shadow
//! onto the background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, LabelFrame, PixelLabel, Result, RgbdFrame};

/// Smallest depth gap between a box and the background.
pub const MIN_DEPTH_GAP: f32 = 0.2;
/// Minimum summed RGB distance between a random box color and the background.
pub const MIN_COLOR_CONTRAST: i32 = 240;
const SHADOW_GAIN: f32 = 0.55;

/// Axis-aligned rectangle; may extend past the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl Rect {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Self { x, y, w, h }
    }

    pub fn contains(&self, row: i64, col: i64) -> bool {
        col >= self.x && col < self.x + self.w && row >= self.y && row < self.y + self.h
    }

    fn grown(&self, margin: i64) -> Rect {
        Rect::new(self.x - margin, self.y - margin, self.w + 2 * margin, self.h + 2 * margin)
    }

    fn intersects(&self, other: &Rect) -> bool {
        self.x < other.x + other.w && other.x < self.x + self.w && self.y < other.y + other.h && other.y < self.y + self.h
    }

    fn shifted(&self, dx: i64, dy: i64) -> Rect {
        Rect::new(self.x + dx, self.y + dy, self.w, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBox {
    pub rect: Rect,
    pub depth: f32,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaintedBox {
    pub rect: Rect,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background_depth: f32,
    pub background_color: [u8; 3],
    pub boxes: Vec<DepthBox>,
    pub painted: Vec<PaintedBox>,
    /// Uniform per-channel noise amplitude in gray levels.
    pub noise: u8,
    /// Drop-shadow offset in pixels (0 disables shadows).
    pub shadow: i64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DatasetError::SceneSpec(msg));
        if self.width == 0 || self.height == 0 {
            return bad("frame size must be positive".into());
        }
        if !(self.background_depth.is_finite() && self.background_depth > 0.0) {
            return bad(format!("background depth {} must be positive", self.background_depth));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if b.rect.w <= 0 || b.rect.h <= 0 {
                return bad(format!("box {i} has an empty rectangle"));
            }
            if !(b.depth.is_finite() && b.depth > 0.0) {
                return bad(format!("box {i} depth {} must be positive", b.depth));
            }
            if (b.depth - self.background_depth).abs() < MIN_DEPTH_GAP {
                return bad(format!(
                    "box {i} depth {} is within {MIN_DEPTH_GAP} m of the background",
                    b.depth
                ));
            }
            for (j, other) in self.boxes.iter().enumerate().skip(i + 1) {
                if b.rect.grown(1).intersects(&other.rect) {
                    return bad(format!("boxes {i} and {j} overlap or touch"));
                }
            }
        }
        for (i, p) in self.painted.iter().enumerate() {
            if p.rect.w <= 0 || p.rect.h <= 0 {
                return bad(format!("painted box {i} has an empty rectangle"));
            }
            for (j, b) in self.boxes.iter().enumerate() {
                if p.rect.grown(1).intersects(&b.rect) {
                    return bad(format!("painted box {i} overlaps or touches box {j}"));
                }
            }
        }
        Ok(())
    }

    /// Every rectangle translated by `(dx, dy)`.
    pub fn shifted(&self, dx: i64, dy: i64) -> SceneSpec {
        let mut out = self.clone();
        for b in &mut out.boxes {
            b.rect = b.rect.shifted(dx, dy);
        }
        for p in &mut out.painted {
            p.rect = p.rect.shifted(dx, dy);
        }
        out
    }

    /// Random scene with 1–3 depth boxes and 1–3 painted boxes.
    pub fn random(rng: &mut impl Rng, width: usize, height: usize) -> SceneSpec {
        let background_depth = rng.random_range(2.5f32..4.0);
        let mut spec = SceneSpec {
            width,
            height,
            background_depth,
            background_color: random_color(rng),
            boxes: Vec::new(),
            painted: Vec::new(),
            noise: 6,
            shadow: 3,
            seed: rng.random(),
        };
        let (w, h) = (width as i64, height as i64);
        let mut placed: Vec<Rect> = Vec::new();
        let place = |rng: &mut dyn rand::RngCore, placed: &mut Vec<Rect>| -> Option<Rect> {
            for _ in 0..100 {
                let rw = rng.random_range(w / 6..=w / 2);
                let rh = rng.random_range(h / 6..=h / 2);
                let rect = Rect::new(rng.random_range(-rw / 4..w - rw * 3 / 4), rng.random_range(-rh / 4..h - rh * 3 / 4), rw, rh);
                if placed.iter().all(|p| !p.grown(8).intersects(&rect)) {
                    placed.push(rect);
                    return Some(rect);
                }
            }
            None
        };
        for _ in 0..rng.random_range(1..=3) {
            if let Some(rect) = place(rng, &mut placed) {
                let depth = rng.random_range(0.8f32..background_depth - 0.5);
                let color = contrasting_color(rng, spec.background_color);
                spec.boxes.push(DepthBox { rect, depth, color });
            }
        }
        for _ in 0..rng.random_range(1..=3) {
            if let Some(rect) = place(rng, &mut placed) {
                let color = contrasting_color(rng, spec.background_color);
                spec.painted.push(PaintedBox { rect, color });
            }
        }
        spec
    }
}

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    [rng.random_range(30..=225), rng.random_range(30..=225), rng.random_range(30..=225)]
}

fn contrasting_color(rng: &mut impl Rng, against: [u8; 3]) -> [u8; 3] {
    loop {
        let c = random_color(rng);
        let dist: i32 = c.iter().zip(&against).map(|(&a, &b)| (a as i32 - b as i32).abs()).sum();
        if dist >= MIN_COLOR_CONTRAST {
            return c;
        }
    }
}

/// A rendered frame with its exact labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub frame: RgbdFrame,
    pub labels: LabelFrame,
    /// Painted-rectangle boundary pixels that are not occlusion edges.
    pub appearance_edges: Vec<bool>,
}

const NEIGHBORS: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Pixels whose region id differs from some in-frame 8-neighbor.
fn region_boundary(ids: &[usize], width: usize, height: usize) -> Vec<bool> {
    let (w, h) = (width as i64, height as i64);
    let mut out = vec![false; ids.len()];
    for r in 0..h {
        for c in 0..w {
            let id = ids[(r * w + c) as usize];
            out[(r * w + c) as usize] = NEIGHBORS.iter().any(|&(dr, dc)| {
                let (rr, cc) = (r + dr, c + dc);
                rr >= 0 && cc >= 0 && rr < h && cc < w && ids[(rr * w + cc) as usize] != id
            });
        }
    }
    out
}

/// Renders a scene. Labels are derived from the scene geometry, not from the
/// rendered depth.
pub fn synth_scene(spec: &SceneSpec, id: usize, timestamp: f64) -> Result<SyntheticFrame> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut depth_region = vec![0usize; w * h];
    let mut paint_region = vec![0usize; w * h];
    let mut depth = vec![spec.background_depth; w * h];
    let mut rgb = vec![0u8; w * h * 3];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let (ri, ci) = (r as i64, c as i64);
            let boxed = spec.boxes.iter().position(|b| b.rect.contains(ri, ci));
            let painted = spec.painted.iter().position(|p| p.rect.contains(ri, ci));
            let mut color = spec.background_color;
            let mut gain = 1.0f32 + 0.12 * ((c as f32) / 9.0 + (r as f32) / 13.0).sin();
            if let Some(b) = boxed {
                depth_region[i] = b + 1;
                depth[i] = spec.boxes[b].depth;
                color = spec.boxes[b].color;
            } else {
                if let Some(p) = painted {
                    paint_region[i] = p + 1;
                    color = spec.painted[p].color;
                }
                let s = spec.shadow;
                if s > 0 && spec.boxes.iter().any(|b| b.rect.shifted(s, s).contains(ri, ci)) {
                    gain *= SHADOW_GAIN;
                }
            }
            for ch in 0..3 {
                let n = if spec.noise > 0 {
                    rng.random_range(-(spec.noise as i32)..=spec.noise as i32)
                } else {
                    0
                };
                let v = color[ch] as f32 * gain + n as f32;
                rgb[i * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let occlusion = region_boundary(&depth_region, w, h);
    let painted_edges = region_boundary(&paint_region, w, h);
    let labels = LabelFrame {
        width: w,
        height: h,
        labels: occlusion
            .iter()
            .map(|&e| if e { PixelLabel::OcclusionEdge } else { PixelLabel::NoEdge })
            .collect(),
    };
    let appearance_edges = painted_edges.iter().zip(&occlusion).map(|(&p, &o)| p && !o).collect();
    Ok(SyntheticFrame {
        frame: RgbdFrame::new(id, timestamp, w, h, rgb, depth)?,
        labels,
        appearance_edges,
    })
}

/// A run of frames of one scene under constant per-frame translation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSegment {
    pub scene: SceneSpec,
    pub frames: usize,
    pub shift: (i64, i64),
}

/// Frame rate used for synthetic timestamps.
pub const SYNTH_FPS: f64 = 30.0;

/// Renders segments back to back; frame ids and timestamps run globally.
pub fn render_sequence(segments: &[SceneSegment]) -> Result<Vec<SyntheticFrame>> {
    let mut out = Vec::new();
    for seg in segments {
        for k in 0..seg.frames {
            let id = out.len();
            let mut scene = seg.scene.shifted(seg.shift.0 * k as i64, seg.shift.1 * k as i64);
            scene.seed = seg.scene.seed.wrapping_add(k as u64);
            out.push(synth_scene(&scene, id, id as f64 / SYNTH_FPS)?);
        }
    }
    Ok(out)
}

/// `count` random scenes of `frames_each` frames with small random pans.
pub fn random_segments(seed: u64, count: usize, frames_each: usize, width: usize, height: usize) -> Vec<SceneSegment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let scene = SceneSpec::random(&mut rng, width, height);
            let shift = (rng.random_range(-2..=2), rng.random_range(-1..=1));
            SceneSegment {
                scene,
                frames: frames_each,
                shift,
            }
        })
        .collect()
}
