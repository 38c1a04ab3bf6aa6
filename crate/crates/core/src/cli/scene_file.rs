//! Text scene descriptions for `occnet synth`.
//!
//! One directive per line, `#` starts a comment:
//!
//! ```text
//! size 160 120                 # frame width and height
//! seed 7                       # seeds noise and random scenes
//! noise 6                      # uniform RGB noise amplitude
//! shadow 3                     # drop-shadow offset of depth boxes, pixels
//! background 3.0 120 130 140   # depth (m) and RGB of the back plane
//! box 20 30 40 25 1.5 200 40 40        # x y w h depth r g b
//! paint 90 20 30 30 30 30 220          # x y w h r g b, texture only
//! scene 10 2 0                 # emit 10 frames panning 2 px/frame in x, 0 in y
//! random-scenes 4 10           # 4 random scenes of 10 frames each
//! ```
//!
//! `box` and `paint` accumulate into the next `scene`, which consumes them.

use std::fmt;

use crate::dataset::synth::{random_segments, DepthBox, PaintedBox, Rect, SceneSegment};
use crate::dataset::SceneSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFileError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for SceneFileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for SceneFileError {}

fn nums<T: std::str::FromStr>(args: &[&str], want: usize, directive: &str, line: usize) -> Result<Vec<T>, SceneFileError> {
    if args.len() != want {
        return Err(SceneFileError {
            line,
            message: format!("'{directive}' takes {want} values, got {}", args.len()),
        });
    }
    args.iter()
        .map(|a| {
            a.parse().map_err(|_| SceneFileError {
                line,
                message: format!("'{directive}': cannot parse '{a}'"),
            })
        })
        .collect()
}

fn color(v: &[i64], line: usize) -> Result<[u8; 3], SceneFileError> {
    let mut c = [0u8; 3];
    for (dst, &x) in c.iter_mut().zip(v) {
        *dst = u8::try_from(x).map_err(|_| SceneFileError {
            line,
            message: format!("color component {x} outside 0..=255"),
        })?;
    }
    Ok(c)
}

pub fn parse_scene_file(text: &str) -> Result<Vec<SceneSegment>, SceneFileError> {
    let mut spec = SceneSpec {
        width: 640,
        height: 480,
        background_depth: 3.0,
        background_color: [128, 128, 128],
        boxes: Vec::new(),
        painted: Vec::new(),
        noise: 6,
        shadow: 3,
        seed: 0,
    };
    let mut segments = Vec::new();
    let mut pending_since = None;
    let mut last_line = 0;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let words: Vec<&str> = content.split_whitespace().collect();
        let (directive, args) = (words[0], &words[1..]);
        match directive {
            "size" => {
                let v: Vec<usize> = nums(args, 2, directive, line)?;
                if v[0] < 32 || v[1] < 32 {
                    return Err(SceneFileError {
                        line,
                        message: format!("frame {}×{} is smaller than 32×32", v[0], v[1]),
                    });
                }
                spec.width = v[0];
                spec.height = v[1];
            }
            "seed" => spec.seed = nums(args, 1, directive, line)?[0],
            "noise" => spec.noise = nums(args, 1, directive, line)?[0],
            "shadow" => spec.shadow = nums(args, 1, directive, line)?[0],
            "background" => {
                let d: Vec<f32> = nums(&args[..1.min(args.len())], 1, directive, line)?;
                let c: Vec<i64> = nums(args.get(1..).unwrap_or(&[]), 3, directive, line)?;
                spec.background_depth = d[0];
                spec.background_color = color(&c, line)?;
            }
            "box" => {
                if args.len() != 8 {
                    return Err(SceneFileError {
                        line,
                        message: format!("'box' takes 8 values, got {}", args.len()),
                    });
                }
                let r: Vec<i64> = nums(&args[..4], 4, directive, line)?;
                let d: Vec<f32> = nums(&args[4..5], 1, directive, line)?;
                let c: Vec<i64> = nums(&args[5..], 3, directive, line)?;
                spec.boxes.push(DepthBox {
                    rect: Rect::new(r[0], r[1], r[2], r[3]),
                    depth: d[0],
                    color: color(&c, line)?,
                });
                pending_since.get_or_insert(line);
            }
            "paint" => {
                let v: Vec<i64> = nums(args, 7, directive, line)?;
                spec.painted.push(PaintedBox {
                    rect: Rect::new(v[0], v[1], v[2], v[3]),
                    color: color(&v[4..], line)?,
                });
                pending_since.get_or_insert(line);
            }
            "scene" => {
                let v: Vec<i64> = match args.len() {
                    1 => nums(args, 1, directive, line)?,
                    _ => nums(args, 3, directive, line)?,
                };
                if v[0] < 1 {
                    return Err(SceneFileError {
                        line,
                        message: "a scene needs at least one frame".into(),
                    });
                }
                let mut scene = spec.clone();
                scene.seed = spec.seed.wrapping_add(segments.len() as u64);
                scene.validate().map_err(|e| SceneFileError {
                    line,
                    message: e.to_string(),
                })?;
                segments.push(SceneSegment {
                    scene,
                    frames: v[0] as usize,
                    shift: (v.get(1).copied().unwrap_or(0), v.get(2).copied().unwrap_or(0)),
                });
                spec.boxes.clear();
                spec.painted.clear();
                pending_since = None;
            }
            "random-scenes" => {
                let v: Vec<usize> = nums(args, 2, directive, line)?;
                if v[0] == 0 || v[1] == 0 {
                    return Err(SceneFileError {
                        line,
                        message: "random-scenes needs positive counts".into(),
                    });
                }
                let seed = spec.seed.wrapping_add(segments.len() as u64);
                segments.extend(random_segments(seed, v[0], v[1], spec.width, spec.height));
            }
            other => {
                return Err(SceneFileError {
                    line,
                    message: format!("unknown directive '{other}'"),
                })
            }
        }
    }
    if let Some(line) = pending_since {
        return Err(SceneFileError {
            line,
            message: "shapes are not followed by a 'scene' directive".into(),
        });
    }
    if segments.is_empty() {
        return Err(SceneFileError {
            line: last_line,
            message: "no scenes defined".into(),
        });
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_boxes_and_random_scenes() {
        let text = "size 96 64\nseed 3 # comment\nbackground 3.0 100 100 100\n\nbox 10 10 20 20 1.0 200 30 30\npaint 50 10 20 20 20 20 220\nscene 4 2 -1\nrandom-scenes 2 3\n";
        let segs = parse_scene_file(text).unwrap();
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[0].frames, 4);
        assert_eq!(segs[0].shift, (2, -1));
        assert_eq!(segs[0].scene.boxes.len(), 1);
        assert_eq!(segs[0].scene.painted.len(), 1);
        assert_eq!((segs[1].scene.width, segs[1].scene.height), (96, 64));
        assert_eq!(segs[2].frames, 3);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("size 96 64\nbox 1 2 3\n", 2),
            ("size 96 64\nflurb 1\n", 2),
            ("# c\nbox 10 10 20 20 1.0 200 30 30\n", 2),
            ("background 3 1 2 300\nscene 1\n", 1),
            ("size 96 64\nbox 10 10 20 20 2.95 1 1 1\nscene 2\n", 3),
            ("seed x\n", 1),
            ("\n\n", 2),
        ];
        for (text, line) in cases {
            let err = parse_scene_file(text).unwrap_err();
            assert_eq!(err.line, line, "{text:?}: {err}");
        }
    }
}
