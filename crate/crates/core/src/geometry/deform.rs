//! Deformable 3x3 sampling with bilinear interpolation and zero padding.
//!
//! Tap `k` of output pixel `q = (i, j)` reads `x` at `q + P[:, k]`; the
//! offsets already include the grid, so `P = G` is an ordinary 3x3
//! convolution and `P = 0` reads the centre pixel nine times.

use dzsr_autograd::{CustomOp, Graph, Tensor, Var};
use num_traits::Float;

use super::grid::{OffsetField, TAPS};
use crate::error::{dim_err, Error, Result};

/// The four bilinear corners of one sampling position; `usize::MAX`
/// marks a corner outside the image.
struct Corners<T> {
    idx: [usize; 4],
    wt: [T; 4],
    ly: T,
    lx: T,
}

const OUTSIDE: usize = usize::MAX;

#[inline]
fn corners<T: Float>(y: T, x: T, h: usize, w: usize) -> Corners<T> {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let one = T::one();
    let wt = [(one - ly) * (one - lx), (one - ly) * lx, ly * (one - lx), ly * lx];
    let mut idx = [OUTSIDE; 4];
    let (yi, xi) = (y0.to_i64().unwrap_or(i64::MIN / 2), x0.to_i64().unwrap_or(i64::MIN / 2));
    for (c, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        let (yy, xx) = (yi + dy, xi + dx);
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            idx[c] = yy as usize * w + xx as usize;
        }
    }
    Corners { idx, wt, ly, lx }
}

fn sample_positions<T: Float>(p: &[T], h: usize, w: usize) -> Vec<Corners<T>> {
    let n = h * w;
    let mut out = Vec::with_capacity(TAPS * n);
    for k in 0..TAPS {
        for i in 0..h {
            for j in 0..w {
                let q = i * w + j;
                let y = T::from(i).unwrap() + p[2 * k * n + q];
                let x = T::from(j).unwrap() + p[(2 * k + 1) * n + q];
                out.push(corners(y, x, h, w));
            }
        }
    }
    out
}

/// Sampled columns `[C * 9, H * W]`, row `c * 9 + k`.
pub fn deform_im2col<T: Float>(x: &[T], c: usize, h: usize, w: usize, p: &[T]) -> Vec<T> {
    let n = h * w;
    debug_assert_eq!(x.len(), c * n);
    debug_assert_eq!(p.len(), 2 * TAPS * n);
    let pos = sample_positions(p, h, w);
    let mut cols = vec![T::zero(); c * TAPS * n];
    for ci in 0..c {
        let plane = &x[ci * n..(ci + 1) * n];
        for k in 0..TAPS {
            let row = &mut cols[(ci * TAPS + k) * n..(ci * TAPS + k + 1) * n];
            for (q, out) in row.iter_mut().enumerate() {
                let cr = &pos[k * n + q];
                let mut acc = T::zero();
                for t in 0..4 {
                    if cr.idx[t] != OUTSIDE && cr.wt[t] != T::zero() {
                        acc = acc + cr.wt[t] * plane[cr.idx[t]];
                    }
                }
                *out = acc;
            }
        }
    }
    cols
}

/// Gradients of `x` and `P` given the gradient of the sampled columns.
pub fn deform_im2col_backward<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    p: &[T],
    grad_cols: &[T],
    need_x: bool,
    need_p: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n = h * w;
    let pos = sample_positions(p, h, w);
    let mut gx = need_x.then(|| vec![T::zero(); c * n]);
    let mut gp = need_p.then(|| vec![T::zero(); 2 * TAPS * n]);
    let one = T::one();
    for ci in 0..c {
        let plane = &x[ci * n..(ci + 1) * n];
        for k in 0..TAPS {
            let grow = &grad_cols[(ci * TAPS + k) * n..(ci * TAPS + k + 1) * n];
            for (q, &g) in grow.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                let cr = &pos[k * n + q];
                if let Some(gx) = gx.as_mut() {
                    for t in 0..4 {
                        if cr.idx[t] != OUTSIDE {
                            let d = &mut gx[ci * n + cr.idx[t]];
                            *d = *d + cr.wt[t] * g;
                        }
                    }
                }
                if let Some(gp) = gp.as_mut() {
                    let v = |t: usize| if cr.idx[t] == OUTSIDE { T::zero() } else { plane[cr.idx[t]] };
                    let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
                    let dy = (one - cr.lx) * (v10 - v00) + cr.lx * (v11 - v01);
                    let dx = (one - cr.ly) * (v01 - v00) + cr.ly * (v11 - v10);
                    gp[2 * k * n + q] = gp[2 * k * n + q] + g * dy;
                    gp[(2 * k + 1) * n + q] = gp[(2 * k + 1) * n + q] + g * dx;
                }
            }
        }
    }
    (gx, gp)
}

/// `y[o, q] = bias[o] + sum_{c, k} weight[o, c * 9 + k] * cols[c * 9 + k, q]`.
pub fn deformable_sample_generic<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    p: &[T],
) -> Vec<T> {
    let n = h * w;
    let cout = bias.len();
    let kk = c * TAPS;
    let cols = deform_im2col(x, c, h, w, p);
    let mut y = vec![T::zero(); cout * n];
    for o in 0..cout {
        for q in 0..n {
            let mut acc = bias[o];
            for r in 0..kk {
                acc = acc + weight[o * kk + r] * cols[r * n + q];
            }
            y[o * n + q] = acc;
        }
    }
    y
}

pub struct SampleGrads<T> {
    pub x: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub p: Vec<T>,
}

pub fn deformable_sample_backward_generic<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    p: &[T],
    grad_y: &[T],
) -> SampleGrads<T> {
    let n = h * w;
    let cout = bias.len();
    let kk = c * TAPS;
    let cols = deform_im2col(x, c, h, w, p);
    let mut gw = vec![T::zero(); cout * kk];
    let mut gb = vec![T::zero(); cout];
    let mut gcols = vec![T::zero(); kk * n];
    for o in 0..cout {
        for q in 0..n {
            let g = grad_y[o * n + q];
            gb[o] = gb[o] + g;
            for r in 0..kk {
                gw[o * kk + r] = gw[o * kk + r] + g * cols[r * n + q];
                gcols[r * n + q] = gcols[r * n + q] + g * weight[o * kk + r];
            }
        }
    }
    let (gx, gp) = deform_im2col_backward(x, c, h, w, p, &gcols, true, true);
    SampleGrads {
        x: gx.unwrap(),
        weight: gw,
        bias: gb,
        p: gp.unwrap(),
    }
}

/// Kernel weights `w_k` as `[C_out, C_in, 3, 3]` (tap `k` = row-major
/// position) and a bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableKernel {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DeformableKernel {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != 3 || s[3] != 3 {
            return dim_err(format!("deformable kernel must be [Cout, Cin, 3, 3], got {s:?}"));
        }
        if bias.shape() != [s[0]] {
            return dim_err(format!("bias must be [{}], got {:?}", s[0], bias.shape()));
        }
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::Numeric("non-finite deformable kernel".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `sum_k w_k` as a `[C_out, C_in, 1, 1]` pointwise kernel.
    pub fn collapsed(&self) -> Tensor {
        let (co, ci) = (self.out_channels(), self.in_channels());
        let w = self.weight.data();
        Tensor::from_fn(&[co, ci, 1, 1], |i| w[i * TAPS..(i + 1) * TAPS].iter().sum())
    }
}

/// Deformable sampling of a `[C, H, W]` map.
pub fn deformable_sample(x: &Tensor, kernel: &DeformableKernel, offsets: &OffsetField) -> Result<Tensor> {
    let (c, h, w) = x.dims3();
    if c != kernel.in_channels() {
        return dim_err(format!("input has {c} channels, kernel expects {}", kernel.in_channels()));
    }
    if (offsets.height, offsets.width) != (h, w) || offsets.p.len() != 2 * TAPS * h * w {
        return dim_err(format!(
            "offsets are {}x{}, input is {h}x{w}",
            offsets.height, offsets.width
        ));
    }
    if offsets.p.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in offsets".into()));
    }
    let y = deformable_sample_generic(
        x.data(),
        c,
        h,
        w,
        kernel.weight.data(),
        kernel.bias.data(),
        &offsets.p,
    );
    Ok(Tensor::new(&[kernel.out_channels(), h, w], y))
}

/// Graph op: `(x [C, H, W], P [18, H, W]) -> cols [C * 9, H, W]`.
pub struct DeformIm2col;

impl CustomOp for DeformIm2col {
    fn name(&self) -> &'static str {
        "deform_im2col"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (c, h, w) = inputs[0].dims3();
        assert_eq!(inputs[1].shape(), [2 * TAPS, h, w], "offset field shape");
        Tensor::new(&[c * TAPS, h, w], deform_im2col(inputs[0].data(), c, h, w, inputs[1].data()))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (c, h, w) = inputs[0].dims3();
        let (gx, gp) = deform_im2col_backward(
            inputs[0].data(),
            c,
            h,
            w,
            inputs[1].data(),
            grad.data(),
            needs[0],
            needs[1],
        );
        vec![
            gx.map(|d| Tensor::new(inputs[0].shape(), d)),
            gp.map(|d| Tensor::new(inputs[1].shape(), d)),
        ]
    }
}

/// Graph op: `theta [6, H, W] = (A, b) -> P [18, H, W]`.
pub struct AffineOffsets;

impl CustomOp for AffineOffsets {
    fn name(&self) -> &'static str {
        "affine_offsets"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (c, h, w) = inputs[0].dims3();
        assert_eq!(c, 6, "theta must have 6 channels");
        let n = h * w;
        let d = inputs[0].data();
        let p = super::grid::affine_offsets(&d[..4 * n], &d[4 * n..], h, w).expect("sizes checked");
        Tensor::new(&[2 * TAPS, h, w], p)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let (_, h, w) = inputs[0].dims3();
        let (mut ga, gb) = super::grid::affine_offsets_backward(grad.data(), h, w);
        ga.extend(gb);
        vec![Some(Tensor::new(inputs[0].shape(), ga))]
    }
}

/// Deformable convolution inside a graph. `weight` is `[Cout, Cin, 3, 3]`.
pub fn deform_conv(g: &mut Graph, x: Var, p: Var, weight: Var, bias: Option<Var>) -> Var {
    let s = g.shape(weight).to_vec();
    let cols = g.custom(&[x, p], Box::new(DeformIm2col));
    let w2 = g.reshape(weight, &[s[0], s[1] * TAPS, 1, 1]);
    g.conv2d(cols, w2, bias, 1, 0)
}
