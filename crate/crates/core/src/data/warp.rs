//! Smooth bounded displacement fields.

use rand::Rng as _;

use crate::error::{dim_err, Error, Result};
use crate::rng;

/// Dense `[H, W, 2]` displacement in pixels, components `(dy, dx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl WarpField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return dim_err(format!("warp {height}x{width} needs {} values, got {}", height * width * 2, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite warp component".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> (f32, f32) {
        let k = (i * self.width + j) * 2;
        (self.data[k], self.data[k + 1])
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    fn remap(&self, out_h: usize, out_w: usize, f: impl Fn(usize, usize) -> (usize, usize, f32, f32, bool)) -> Self {
        let mut data = Vec::with_capacity(out_h * out_w * 2);
        for i in 0..out_h {
            for j in 0..out_w {
                let (si, sj, ky, kx, swap) = f(i, j);
                let (dy, dx) = self.at(si, sj);
                let (dy, dx) = if swap { (dx, dy) } else { (dy, dx) };
                data.push(ky * dy);
                data.push(kx * dx);
            }
        }
        Self {
            height: out_h,
            width: out_w,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        self.remap(self.height, w, |i, j| (i, w - 1 - j, 1.0, -1.0, false))
    }

    pub fn flip_vertical(&self) -> Self {
        let h = self.height;
        self.remap(h, self.width, |i, j| (h - 1 - i, j, -1.0, 1.0, false))
    }

    pub fn transpose(&self) -> Self {
        self.remap(self.width, self.height, |i, j| (j, i, 1.0, 1.0, true))
    }
}

/// Random field obtained by bilinear interpolation of a coarse grid of
/// control displacements drawn uniformly in `[-bound, bound]`. Being a
/// convex combination of the controls, every component stays in bounds.
pub fn smooth_warp(height: usize, width: usize, bound: f32, cells: usize, seed: u64) -> Result<WarpField> {
    if !(bound >= 0.0) || !bound.is_finite() {
        return Err(Error::Config(format!("warp bound must be finite and >= 0, got {bound}")));
    }
    if bound == 0.0 {
        return Ok(WarpField::zeros(height, width));
    }
    let n = cells.max(1) + 1;
    let mut r = rng::rng(rng::derive(seed, 0xAA7F));
    let ctrl: Vec<f32> = (0..n * n * 2).map(|_| r.random_range(-bound..=bound)).collect();
    let mut data = Vec::with_capacity(height * width * 2);
    for i in 0..height {
        let gy = i as f32 / (height.max(2) - 1) as f32 * (n - 1) as f32;
        let y0 = (gy.floor() as usize).min(n - 2);
        let ly = gy - y0 as f32;
        for j in 0..width {
            let gx = j as f32 / (width.max(2) - 1) as f32 * (n - 1) as f32;
            let x0 = (gx.floor() as usize).min(n - 2);
            let lx = gx - x0 as f32;
            for k in 0..2 {
                let c = |yy: usize, xx: usize| ctrl[(yy * n + xx) * 2 + k];
                let v = (1.0 - ly) * ((1.0 - lx) * c(y0, x0) + lx * c(y0, x0 + 1))
                    + ly * ((1.0 - lx) * c(y0 + 1, x0) + lx * c(y0 + 1, x0 + 1));
                data.push(v.clamp(-bound, bound));
            }
        }
    }
    WarpField::new(height, width, data)
}
