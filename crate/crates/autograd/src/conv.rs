//! Convolution by im2col + sgemm.

use crate::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. Transposes are expressed by
/// swapping strides, so no copies are made.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds were checked above and the strides stay inside the
    // m*k, k*n and m*n row-major extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `x` into `[C*k*k, Ho*Wo]` columns with zero padding.
pub fn im2col(x: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut cols = vec![0.0f32; g.in_channels * k * k * ho * wo];
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let i = (oi * g.stride + ki) as isize - g.pad as isize;
                    if i < 0 || i >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[i as usize * g.width..(i as usize + 1) * g.width];
                    let dst_row = &mut dst[oi * wo..(oi + 1) * wo];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let j = (oj * g.stride + kj) as isize - g.pad as isize;
                        if j >= 0 && j < g.width as isize {
                            *d = src_row[j as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub fn col2im(cols: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut x = vec![0.0f32; g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let i = (oi * g.stride + ki) as isize - g.pad as isize;
                    if i < 0 || i >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[i as usize * g.width..(i as usize + 1) * g.width];
                    for oj in 0..wo {
                        let j = (oj * g.stride + kj) as isize - g.pad as isize;
                        if j >= 0 && j < g.width as isize {
                            dst_row[j as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv_geometry(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> ConvGeometry {
    let (c, h, wd) = x.dims3();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin, k, k], got {:?}", ws);
    assert_eq!(ws[1], c, "conv weight expects {} input channels, input has {}", ws[1], c);
    assert_eq!(ws[2], ws[3], "conv kernels must be square");
    assert!(h + 2 * pad >= ws[2] && wd + 2 * pad >= ws[2], "input smaller than kernel");
    ConvGeometry {
        in_channels: c,
        height: h,
        width: wd,
        kernel: ws[2],
        stride,
        pad,
    }
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let g = conv_geometry(x, w, stride, pad);
    let cout = w.shape()[0];
    let (ho, wo) = (g.out_height(), g.out_width());
    let kdim = g.in_channels * g.kernel * g.kernel;
    let mut out = vec![0.0f32; cout * ho * wo];
    if let Some(b) = bias {
        assert_eq!(b.len(), cout);
        for (co, chunk) in out.chunks_mut(ho * wo).enumerate() {
            chunk.fill(b.data()[co]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(cout, kdim, ho * wo, w.data(), false, x.data(), false, beta, &mut out);
    } else {
        let cols = im2col(x.data(), &g);
        gemm(cout, kdim, ho * wo, w.data(), false, &cols, false, beta, &mut out);
    }
    Tensor::new(&[cout, ho, wo], out)
}

pub struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> ConvGrads {
    let g = conv_geometry(x, w, stride, pad);
    let cout = w.shape()[0];
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    let kdim = g.in_channels * g.kernel * g.kernel;
    let dy = grad_out.data();

    let grad_w = if need[1] {
        let mut dw = vec![0.0f32; cout * kdim];
        if g.is_pointwise() {
            gemm(cout, n, kdim, dy, false, x.data(), true, 0.0, &mut dw);
        } else {
            let cols = im2col(x.data(), &g);
            gemm(cout, n, kdim, dy, false, &cols, true, 0.0, &mut dw);
        }
        Some(Tensor::new(w.shape(), dw))
    } else {
        None
    };

    let grad_x = if need[0] {
        let mut dcols = vec![0.0f32; kdim * n];
        gemm(kdim, cout, n, w.data(), true, dy, false, 0.0, &mut dcols);
        let dx = if g.is_pointwise() { dcols } else { col2im(&dcols, &g) };
        Some(Tensor::new(x.shape(), dx))
    } else {
        None
    };

    let grad_b = if need[2] {
        Some(Tensor::new(
            &[cout],
            dy.chunks(n).map(|c| c.iter().sum()).collect(),
        ))
    } else {
        None
    };

    ConvGrads {
        x: grad_x,
        w: grad_w,
        bias: grad_b,
    }
}
