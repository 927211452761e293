//! Procedural test scenes.

use rand::Rng as _;

use crate::error::{dim_err, Result};
use crate::image::{quantize16, Image};
use crate::rng;

/// Scene sides must be multiples of this (4 x the largest supported ratio).
pub const SCENE_ALIGN: usize = 16;

#[derive(Clone, Copy)]
enum Shape {
    Rect { cy: f32, cx: f32, hh: f32, hw: f32, angle: f32 },
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32, angle: f32 },
}

#[derive(Clone, Copy)]
enum Fill {
    Flat([f32; 3]),
    Sine { a: [f32; 3], b: [f32; 3], ky: f32, kx: f32, phase: f32 },
    Grating { a: [f32; 3], b: [f32; 3], ky: f32, kx: f32, duty: f32 },
}

fn smoothstep01(x: f32) -> f32 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Shape {
    /// Soft coverage in `[0, 1]` with an edge roughly `soft` pixels wide.
    fn coverage(&self, y: f32, x: f32, soft: f32) -> f32 {
        match *self {
            Shape::Rect { cy, cx, hh, hw, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = c * dy + s * dx;
                let v = -s * dy + c * dx;
                let d = (u.abs() - hh).max(v.abs() - hw);
                smoothstep01(0.5 - d / soft)
            }
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = (c * dy + s * dx) / ry;
                let v = (-s * dy + c * dx) / rx;
                let d = ((u * u + v * v).sqrt() - 1.0) * ry.min(rx);
                smoothstep01(0.5 - d / soft)
            }
        }
    }
}

impl Fill {
    fn color(&self, y: f32, x: f32) -> [f32; 3] {
        match *self {
            Fill::Flat(c) => c,
            Fill::Sine { a, b, ky, kx, phase } => {
                let t = 0.5 + 0.5 * (ky * y + kx * x + phase).sin();
                std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t)
            }
            Fill::Grating { a, b, ky, kx, duty } => {
                let t = smoothstep01(0.5 + 1.5 * ((ky * y + kx * x).sin() + 2.0 * duty - 1.0));
                std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t)
            }
        }
    }
}

fn random_color(r: &mut rng::Rng) -> [f32; 3] {
    let base: f32 = r.random_range(0.05..0.95);
    std::array::from_fn(|_| (base + r.random_range(-0.25f32..0.25)).clamp(0.0, 1.0))
}

fn random_fill(r: &mut rng::Rng) -> Fill {
    let a = random_color(r);
    let b = random_color(r);
    let period: f32 = r.random_range(5.0..20.0);
    let theta: f32 = r.random_range(0.0..std::f32::consts::PI);
    let k = std::f32::consts::TAU / period;
    match r.random_range(0..4) {
        0 | 1 => Fill::Flat(a),
        2 => Fill::Sine { a, b, ky: k * theta.sin(), kx: k * theta.cos(), phase: r.random_range(0.0..6.3) },
        _ => Fill::Grating { a, b, ky: k * theta.sin(), kx: k * theta.cos(), duty: r.random_range(0.3..0.7) },
    }
}

/// Deterministic synthetic scene of soft-edged shapes, sinusoids and
/// gratings on a textured background, snapped to the 16-bit grid.
pub fn synthesize_scene(seed: u64, height: usize, width: usize) -> Result<Image> {
    if height % SCENE_ALIGN != 0 || width % SCENE_ALIGN != 0 || height == 0 || width == 0 {
        return dim_err(format!("scene {height}x{width} must be a positive multiple of {SCENE_ALIGN}"));
    }
    let mut r = rng::rng(rng::derive(seed, 0x5CE4E));
    let (hf, wf) = (height as f32, width as f32);
    let background = random_fill(&mut r);
    let vignette: [f32; 3] = std::array::from_fn(|_| r.random_range(-0.15f32..0.15));
    let area = hf * wf;
    let n_shapes = ((area / 900.0) as usize).clamp(6, 400) + r.random_range(0..6);
    let mut layers = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let cy = r.random_range(0.0..hf);
        let cx = r.random_range(0.0..wf);
        let size = r.random_range(3.0f32..(hf.min(wf) / 5.0).max(6.0));
        let aspect: f32 = r.random_range(0.4..2.5);
        let angle = r.random_range(0.0..std::f32::consts::PI);
        let shape = if r.random_bool(0.5) {
            Shape::Rect { cy, cx, hh: size, hw: size * aspect, angle }
        } else {
            Shape::Ellipse { cy, cx, ry: size, rx: size * aspect, angle }
        };
        let soft = r.random_range(1.0f32..2.5);
        let alpha = r.random_range(0.6f32..1.0);
        layers.push((shape, random_fill(&mut r), soft, alpha));
    }
    Image::from_fn(height, width, |i, j, c| {
        let (y, x) = (i as f32 + 0.5, j as f32 + 0.5);
        let g = (y / hf - 0.5) * vignette[c] + (x / wf - 0.5) * vignette[(c + 1) % 3];
        let mut v = background.color(y, x)[c] + g;
        for (shape, fill, soft, alpha) in &layers {
            let cov = shape.coverage(y, x, *soft) * alpha;
            if cov > 0.0 {
                v += cov * (fill.color(y, x)[c] - v);
            }
        }
        quantize16(v)
    })
}
