//! Procedural test scenes: smooth shading with sharp-edged shapes and a few
//! fine periodic textures, deterministic for a seed.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

enum Shape {
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
    Disk { cy: f64, cx: f64, radius: f64 },
    Stripes { top: f64, left: f64, bottom: f64, right: f64, period: f64, angle: f64 },
}

struct Layer {
    shape: Shape,
    color: [f32; 3],
}

impl Layer {
    fn paint(&self, r: f64, c: f64, under: [f32; 3]) -> [f32; 3] {
        match self.shape {
            Shape::Rect { top, left, bottom, right } => {
                if r >= top && r < bottom && c >= left && c < right {
                    self.color
                } else {
                    under
                }
            }
            Shape::Disk { cy, cx, radius } => {
                if (r - cy).powi(2) + (c - cx).powi(2) <= radius * radius {
                    self.color
                } else {
                    under
                }
            }
            Shape::Stripes {
                top,
                left,
                bottom,
                right,
                period,
                angle,
            } => {
                if r >= top && r < bottom && c >= left && c < right {
                    let t = (c * angle.cos() + r * angle.sin()) / period;
                    if t.rem_euclid(1.0) < 0.5 {
                        self.color
                    } else {
                        under
                    }
                } else {
                    under
                }
            }
        }
    }
}

/// A `3 × height × width` scene with values inside `[0.05, 0.95]`.
pub fn scene(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let color = |rng: &mut ChaCha8Rng| -> [f32; 3] {
        [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ]
    };
    let base = color(&mut rng);
    let tilt = color(&mut rng);

    let count = 6 + (height * width) / 6000;
    let mut layers = Vec::with_capacity(count);
    for i in 0..count {
        let size = rng.random_range(0.05..0.3) * h.min(w);
        let cy = rng.random_range(0.0..h);
        let cx = rng.random_range(0.0..w);
        let shape = match i % 5 {
            0 | 1 => Shape::Rect {
                top: cy - size,
                left: cx - size * rng.random_range(0.3..1.5),
                bottom: cy + size * rng.random_range(0.3..1.5),
                right: cx + size,
            },
            2 | 3 => Shape::Disk {
                cy,
                cx,
                radius: size,
            },
            _ => Shape::Stripes {
                top: cy - size,
                left: cx - size,
                bottom: cy + size,
                right: cx + size,
                period: rng.random_range(3.0..9.0),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            },
        };
        layers.push(Layer {
            shape,
            color: color(&mut rng),
        });
    }

    Array3::from_shape_fn((3, height, width), |(ch, r, c)| {
        let (fr, fc) = (r as f64 + 0.5, c as f64 + 0.5);
        let u = (fr / h + fc / w) as f32 * 0.5;
        let mut px = [0.0f32; 3];
        for k in 0..3 {
            px[k] = base[k] * (1.0 - u) + tilt[k] * u;
        }
        for layer in &layers {
            px = layer.paint(fr, fc, px);
        }
        px[ch].clamp(0.05, 0.95)
    })
}
