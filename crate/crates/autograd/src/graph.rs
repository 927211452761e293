use crate::conv::{conv2d_backward, conv2d_forward};
use crate::{ParamId, ParamStore, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operator defined outside this crate.
///
/// `backward` returns one entry per input; `None` means "no gradient" and
/// is also allowed for inputs that require one (treated as zero).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>>;
}

/// Row-compressed sparse linear map: `out[i] = sum_j vals[j] * x[cols[j]]`
/// for `j` in `offsets[i]..offsets[i + 1]`.
#[derive(Clone, Debug, Default)]
pub struct SparseMap {
    pub offsets: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f32>,
}

impl SparseMap {
    pub fn rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }
}

/// Index meaning "read zero" in [`Graph::gather`].
pub const GATHER_ZERO: u32 = u32::MAX;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    LeakyRelu(Var, f32),
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize },
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Gather { x: Var, index: Vec<u32> },
    Sparse { x: Var, map: SparseMap },
    GlobalAvgPool(Var),
    AvgPool { x: Var, factor: usize },
    Broadcast(Var),
    Reshape(Var),
    Crop { x: Var, top: usize, left: usize },
    Paste { base: Var, center: Var, top: usize, left: usize },
    MeanAbs(Var),
    SumAll(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp + Send> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Build one per sample, call [`Graph::backward`] on a
/// scalar, then read parameter gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    /// Parameter used as a constant (no gradient).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.input(store.get(id).clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let out = Tensor::new(va.shape(), va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect());
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let out = Tensor::new(va.shape(), va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect());
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v * slope });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    /// `y[c] = x[c] * scale[c] + shift[c]`; scale and shift hold `C` values.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(self.value(scale).len(), c, "scale length must equal channel count");
        assert_eq!(self.value(shift).len(), c, "shift length must equal channel count");
        let s = self.value(scale).data();
        let b = self.value(shift).data();
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for (o, &v) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&xv[ch * h * w..(ch + 1) * h * w]) {
                *o = v * s[ch] + b[ch];
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(Tensor::new(&[c, h, w], out), Op::ChannelAffine { x, scale, shift }, rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), stride, pad);
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, bias, stride, pad }, rg)
    }

    /// Concatenate `[C_i, H, W]` maps along channels.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (_, h, w) = self.value(xs[0]).dims3();
        let mut data = Vec::new();
        let mut c = 0;
        for &x in xs {
            let (ci, hi, wi) = self.value(x).dims3();
            assert_eq!((hi, wi), (h, w), "concat needs equal spatial dims");
            data.extend_from_slice(self.value(x).data());
            c += ci;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::new(&[c, h, w], data), Op::Concat(xs.to_vec()), rg)
    }

    /// Channels `start..start + len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(start + len <= c);
        let data = self.value(x).data()[start * h * w..(start + len) * h * w].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(&[len, h, w], data), Op::Narrow { x, start }, rg)
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, shape: &[usize], index: Vec<u32>) -> Var {
        let xv = self.value(x).data();
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { xv[i as usize] })
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::Gather { x, index }, rg)
    }

    pub fn sparse(&mut self, x: Var, shape: &[usize], map: SparseMap) -> Var {
        let xv = self.value(x).data();
        assert_eq!(map.rows(), shape.iter().product::<usize>());
        let data = (0..map.rows())
            .map(|r| {
                (map.offsets[r]..map.offsets[r + 1])
                    .map(|j| map.vals[j] * xv[map.cols[j] as usize])
                    .sum()
            })
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data), Op::Sparse { x, map }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let xv = self.value(x).data();
        let n = (h * w) as f64;
        let data = (0..c)
            .map(|ch| (xv[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).sum::<f64>() / n) as f32)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[c, 1, 1], data), Op::GlobalAvgPool(x), rg)
    }

    /// Mean over non-overlapping `factor x factor` blocks.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(h % factor == 0 && w % factor == 0, "avg_pool: {h}x{w} not divisible by {factor}");
        let (ho, wo) = (h / factor, w / factor);
        let xv = self.value(x).data();
        let inv = 1.0 / (factor * factor) as f32;
        let mut out = vec![0.0f32; c * ho * wo];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(ch * ho + i / factor) * wo + j / factor] += xv[(ch * h + i) * w + j];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[c, ho, wo], out), Op::AvgPool { x, factor }, rg)
    }

    /// `[C, 1, 1]` (or `[C]`) to `[C, H, W]`.
    pub fn broadcast(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x).data();
        let c = xv.len();
        let mut data = Vec::with_capacity(c * h * w);
        for &v in xv {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[c, h, w], data), Op::Broadcast(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let (c, hi, wi) = self.value(x).dims3();
        assert!(top + h <= hi && left + w <= wi, "crop window out of bounds");
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for i in 0..h {
                let start = (ch * hi + top + i) * wi + left;
                data.extend_from_slice(&xv[start..start + w]);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[c, h, w], data), Op::Crop { x, top, left }, rg)
    }

    /// `base` with `center` written over the window at `(top, left)`.
    pub fn paste(&mut self, base: Var, center: Var, top: usize, left: usize) -> Var {
        let (c, h, w) = self.value(base).dims3();
        let (cc, ch_, cw) = self.value(center).dims3();
        assert_eq!(c, cc, "paste: channel mismatch");
        assert!(top + ch_ <= h && left + cw <= w, "paste window out of bounds");
        let mut out = self.value(base).clone();
        let cv = self.value(center).data();
        {
            let od = out.data_mut();
            for k in 0..c {
                for i in 0..ch_ {
                    let dst = (k * h + top + i) * w + left;
                    od[dst..dst + cw].copy_from_slice(&cv[(k * ch_ + i) * cw..(k * ch_ + i + 1) * cw]);
                }
            }
        }
        let rg = self.rg(base) || self.rg(center);
        self.push(out, Op::Paste { base, center, top, left }, rg)
    }

    /// Mean absolute value, reduced in f64.
    pub fn mean_abs(&mut self, x: Var) -> Var {
        let xv = self.value(x).data();
        let m = xv.iter().map(|&v| (v as f64).abs()).sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m as f32), Op::MeanAbs(x), rg)
    }

    /// Sum of all elements, reduced in f64.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s as f32), Op::SumAll(x), rg)
    }

    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        self.mean_abs(d)
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp + Send>) -> Var {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals);
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || zip_map(g, vb, |x, y| x * y));
                self.acc(grads, *b, || zip_map(g, va, |x, y| x * y));
            }
            Op::Scale(x, s) => self.acc(grads, *x, || g.map(|v| v * s)),
            Op::LeakyRelu(x, slope) => {
                let vx = self.value(*x);
                self.acc(grads, *x, || zip_map(g, vx, |gv, xv| if xv > 0.0 { gv } else { gv * slope }));
            }
            Op::ChannelAffine { x, scale, shift } => {
                let vx = self.value(*x);
                let (c, h, w) = vx.dims3();
                let n = h * w;
                let s = self.value(*scale);
                self.acc(grads, *x, || {
                    let mut out = g.clone();
                    for (ch, chunk) in out.data_mut().chunks_mut(n).enumerate() {
                        for v in chunk {
                            *v *= s.data()[ch];
                        }
                    }
                    out
                });
                self.acc(grads, *scale, || {
                    let data = (0..c)
                        .map(|ch| {
                            gd[ch * n..(ch + 1) * n]
                                .iter()
                                .zip(vx.channel(ch))
                                .map(|(a, b)| (*a as f64) * (*b as f64))
                                .sum::<f64>() as f32
                        })
                        .collect();
                    Tensor::new(s.shape(), data)
                });
                let sh = self.value(*shift).shape().to_vec();
                self.acc(grads, *shift, || {
                    Tensor::new(&sh, gd.chunks(n).map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() as f32).collect())
                });
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let need = [self.rg(*x), self.rg(*w), bias.is_some_and(|b| self.rg(b))];
                let cg = conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, need);
                if let Some(t) = cg.x {
                    self.acc(grads, *x, || t);
                }
                if let Some(t) = cg.w {
                    self.acc(grads, *w, || t);
                }
                if let (Some(b), Some(t)) = (bias, cg.bias) {
                    self.acc(grads, *b, || t);
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    let shape = self.value(x).shape().to_vec();
                    self.acc(grads, x, || Tensor::new(&shape, gd[off..off + len].to_vec()));
                    off += len;
                }
            }
            Op::Narrow { x, start } => {
                let vx = self.value(*x);
                let (_, h, w) = vx.dims3();
                self.acc(grads, *x, || {
                    let mut out = Tensor::zeros(vx.shape());
                    out.data_mut()[start * h * w..start * h * w + gd.len()].copy_from_slice(gd);
                    out
                });
            }
            Op::Gather { x, index } => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, || {
                    let mut out = Tensor::zeros(&shape);
                    let od = out.data_mut();
                    for (&i, &gv) in index.iter().zip(gd) {
                        if i != GATHER_ZERO {
                            od[i as usize] += gv;
                        }
                    }
                    out
                });
            }
            Op::Sparse { x, map } => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, || {
                    let mut out = Tensor::zeros(&shape);
                    let od = out.data_mut();
                    for (r, &gv) in gd.iter().enumerate() {
                        for j in map.offsets[r]..map.offsets[r + 1] {
                            od[map.cols[j] as usize] += map.vals[j] * gv;
                        }
                    }
                    out
                });
            }
            Op::GlobalAvgPool(x) => {
                let vx = self.value(*x);
                let (_, h, w) = vx.dims3();
                let n = h * w;
                self.acc(grads, *x, || {
                    let mut out = Tensor::zeros(vx.shape());
                    for (ch, chunk) in out.data_mut().chunks_mut(n).enumerate() {
                        chunk.fill(gd[ch] / n as f32);
                    }
                    out
                });
            }
            Op::AvgPool { x, factor } => {
                let vx = self.value(*x);
                let (c, h, w) = vx.dims3();
                let (ho, wo) = (h / factor, w / factor);
                let inv = 1.0 / (factor * factor) as f32;
                self.acc(grads, *x, || {
                    Tensor::from_fn(vx.shape(), |idx| {
                        let (ch, i, j) = (idx / (h * w), (idx / w) % h, idx % w);
                        debug_assert!(ch < c);
                        gd[(ch * ho + i / factor) * wo + j / factor] * inv
                    })
                });
            }
            Op::Broadcast(x) => {
                let shape = self.value(*x).shape().to_vec();
                let c = self.value(*x).len();
                let n = gd.len() / c;
                self.acc(grads, *x, || {
                    Tensor::new(&shape, gd.chunks(n).map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() as f32).collect())
                });
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, || g.clone().reshape(&shape));
            }
            Op::Crop { x, top, left } => {
                let vx = self.value(*x);
                let (c, hi, wi) = vx.dims3();
                let (_, h, w) = g.dims3();
                self.acc(grads, *x, || {
                    let mut out = Tensor::zeros(vx.shape());
                    let od = out.data_mut();
                    for ch in 0..c {
                        for i in 0..h {
                            let dst = (ch * hi + top + i) * wi + left;
                            od[dst..dst + w].copy_from_slice(&gd[(ch * h + i) * w..(ch * h + i + 1) * w]);
                        }
                    }
                    out
                });
            }
            Op::Paste { base, center, top, left } => {
                let (c, h, w) = g.dims3();
                let (_, chh, cw) = self.value(*center).dims3();
                self.acc(grads, *base, || {
                    let mut out = g.clone();
                    let od = out.data_mut();
                    for k in 0..c {
                        for i in 0..chh {
                            let dst = (k * h + top + i) * w + left;
                            od[dst..dst + cw].fill(0.0);
                        }
                    }
                    out
                });
                self.acc(grads, *center, || {
                    let mut data = Vec::with_capacity(c * chh * cw);
                    for k in 0..c {
                        for i in 0..chh {
                            let src = (k * h + top + i) * w + left;
                            data.extend_from_slice(&gd[src..src + cw]);
                        }
                    }
                    Tensor::new(&[c, chh, cw], data)
                });
            }
            Op::MeanAbs(x) => {
                let vx = self.value(*x);
                let s = gd[0] / vx.len() as f32;
                self.acc(grads, *x, || {
                    vx.map(|v| {
                        if v > 0.0 {
                            s
                        } else if v < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    })
                });
            }
            Op::SumAll(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, || Tensor::full(&shape, gd[0]));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                let out = op.backward(&vals, &node.value, g, &needs);
                assert_eq!(out.len(), inputs.len(), "{}: backward arity mismatch", op.name());
                for ((&v, t), need) in inputs.iter().zip(out).zip(needs) {
                    if let (true, Some(t)) = (need, t) {
                        assert_eq!(t.shape(), self.value(v).shape(), "{}: gradient shape mismatch", op.name());
                        self.acc(grads, v, || t);
                    }
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.rg(v) {
            return;
        }
        let t = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    /// Parameter nodes registered with [`Graph::param`].
    pub fn param_vars(&self) -> &[(ParamId, Var)] {
        &self.params
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Add every parameter gradient of `graph` into `buf`.
    pub fn accumulate_into(&self, graph: &Graph, buf: &mut crate::GradBuffer) {
        for &(id, v) in graph.param_vars() {
            if let Some(g) = self.get(v) {
                buf.add(id, g);
            }
        }
    }
}
