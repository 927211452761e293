//! The 3x3 sampling grid and affine offset fields.
//!
//! Offset fields are stored planar: `A` as `[4, H, W]` holding
//! `(a00, a01, a10, a11)`, `b` as `[2, H, W]` holding `(by, bx)`, and `P`
//! as `[18, H, W]` where channel `2k` is the row offset and `2k + 1` the
//! column offset of tap `k`.

use num_traits::Float;

use crate::error::{dim_err, Result};

/// Row 0 holds the row offsets, row 1 the column offsets; column `k`
/// enumerates `{-1, 0, 1}^2` in row-major order.
pub const GRID: [[i32; 9]; 2] = [[-1, -1, -1, 0, 0, 0, 1, 1, 1], [-1, 0, 1, -1, 0, 1, -1, 0, 1]];

pub const TAPS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegularGrid {
    pub g: [[i32; 9]; 2],
}

impl RegularGrid {
    pub fn column(&self, k: usize) -> (i32, i32) {
        (self.g[0][k], self.g[1][k])
    }
}

pub fn regular_grid() -> RegularGrid {
    RegularGrid { g: GRID }
}

/// `P = A * G + b` at every pixel.
pub fn affine_offsets<T: Float>(a: &[T], b: &[T], height: usize, width: usize) -> Result<Vec<T>> {
    let n = height * width;
    if a.len() != 4 * n {
        return dim_err(format!("A needs 4x{height}x{width} values, got {}", a.len()));
    }
    if b.len() != 2 * n {
        return dim_err(format!("b needs 2x{height}x{width} values, got {}", b.len()));
    }
    let mut p = vec![T::zero(); 2 * TAPS * n];
    for k in 0..TAPS {
        let gy = T::from(GRID[0][k]).unwrap();
        let gx = T::from(GRID[1][k]).unwrap();
        for q in 0..n {
            p[2 * k * n + q] = a[q] * gy + a[n + q] * gx + b[q];
            p[(2 * k + 1) * n + q] = a[2 * n + q] * gy + a[3 * n + q] * gx + b[n + q];
        }
    }
    Ok(p)
}

/// Gradients of `A` and `b` given the gradient of `P`.
pub fn affine_offsets_backward<T: Float>(grad_p: &[T], height: usize, width: usize) -> (Vec<T>, Vec<T>) {
    let n = height * width;
    let mut ga = vec![T::zero(); 4 * n];
    let mut gb = vec![T::zero(); 2 * n];
    for k in 0..TAPS {
        let gy = T::from(GRID[0][k]).unwrap();
        let gx = T::from(GRID[1][k]).unwrap();
        for q in 0..n {
            let dy = grad_p[2 * k * n + q];
            let dx = grad_p[(2 * k + 1) * n + q];
            ga[q] = ga[q] + dy * gy;
            ga[n + q] = ga[n + q] + dy * gx;
            ga[2 * n + q] = ga[2 * n + q] + dx * gy;
            ga[3 * n + q] = ga[3 * n + q] + dx * gx;
            gb[q] = gb[q] + dy;
            gb[n + q] = gb[n + q] + dx;
        }
    }
    (ga, gb)
}

/// Dense offset field with its affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    pub height: usize,
    pub width: usize,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
    pub p: Vec<f32>,
}

impl OffsetField {
    pub fn from_affine(a: Vec<f32>, b: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        let p = affine_offsets(&a, &b, height, width)?;
        Ok(Self { height, width, a, b, p })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            a: vec![0.0; 4 * n],
            b: vec![0.0; 2 * n],
            p: vec![0.0; 2 * TAPS * n],
        }
    }

    /// Same `A` and `b` at every pixel.
    pub fn uniform(a: [f32; 4], b: [f32; 2], height: usize, width: usize) -> Self {
        let n = height * width;
        let av = a.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let bv = b.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        Self::from_affine(av, bv, height, width).expect("sizes match by construction")
    }
}
