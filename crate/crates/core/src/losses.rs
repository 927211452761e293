//! Training objective: mean l1 plus sliced Wasserstein over fixed features.

use dzsr_autograd::conv::gemm;
use dzsr_autograd::{CustomOp, Graph, ParamStore, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::image::Image;
use crate::nn::{lrelu, Conv, Init};
use crate::rng::{derive, rng};

pub const LAMBDA_SW: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SwConfig {
    /// Number of projection directions; `None` uses the channel count.
    pub num_projections: Option<usize>,
}

impl SwConfig {
    pub fn projections_for(&self, channels: usize) -> Result<usize> {
        match self.num_projections {
            Some(0) => Err(Error::Config("num_projections must be at least 1".into())),
            Some(n) => Ok(n),
            None => Ok(channels),
        }
    }
}

/// `[n, c]` matrix whose rows are uniform on the unit sphere.
pub fn random_projections(n: usize, c: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    let mut m = Vec::with_capacity(n * c);
    for _ in 0..n {
        loop {
            let row: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                m.extend(row.iter().map(|v| (v / norm) as f32));
                break;
            }
        }
    }
    m
}

/// Unsigned key ordered like `f32::total_cmp`.
fn total_order_key(v: f32) -> u32 {
    let b = v.to_bits();
    if b >> 31 == 1 {
        !b
    } else {
        b | 0x8000_0000
    }
}

fn sorted_projection(proj: &[f32], n: usize, x: &Tensor) -> (Vec<f32>, Vec<u32>) {
    let c = x.shape()[0];
    let len = x.len() / c;
    let mut p = vec![0f32; n * len];
    gemm(n, c, len, proj, false, x.data(), false, 0.0, &mut p);
    let mut order: Vec<u32> = Vec::with_capacity(n * len);
    let mut sorted = Vec::with_capacity(n * len);
    for k in 0..n {
        let row = &p[k * len..(k + 1) * len];
        let mut keys: Vec<u64> = row
            .iter()
            .enumerate()
            .map(|(i, v)| ((total_order_key(*v) as u64) << 32) | i as u64)
            .collect();
        keys.sort_unstable();
        for k in keys {
            let i = (k & 0xFFFF_FFFF) as u32;
            sorted.push(row[i as usize]);
            order.push(i);
        }
    }
    (sorted, order)
}

fn check_pair(u: &Tensor, v: &Tensor) -> Result<()> {
    if u.shape() != v.shape() {
        return dim_err(format!("feature shapes differ: {:?} vs {:?}", u.shape(), v.shape()));
    }
    if u.shape().is_empty() || u.is_empty() {
        return dim_err("empty feature map");
    }
    Ok(())
}

/// Sliced Wasserstein distance for an explicit `[n, C]` projection matrix.
pub fn sliced_wasserstein_projected(u: &Tensor, v: &Tensor, proj: &[f32], n: usize) -> Result<f64> {
    check_pair(u, v)?;
    if proj.len() != n * u.shape()[0] {
        return dim_err("projection matrix does not match the channel count");
    }
    let (su, _) = sorted_projection(proj, n, u);
    let (sv, _) = sorted_projection(proj, n, v);
    Ok(su.iter().zip(&sv).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / su.len() as f64)
}

pub fn sliced_wasserstein(u: &Tensor, v: &Tensor, cfg: &SwConfig, seed: u64) -> Result<f64> {
    check_pair(u, v)?;
    let c = u.shape()[0];
    let n = cfg.projections_for(c)?;
    sliced_wasserstein_projected(u, v, &random_projections(n, c, seed), n)
}

/// Graph op for [`sliced_wasserstein_projected`]; inputs `U, V`.
pub struct SlicedWasserstein {
    pub proj: Vec<f32>,
    pub n: usize,
}

impl CustomOp for SlicedWasserstein {
    fn name(&self) -> &'static str {
        "sliced_wasserstein"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let v = sliced_wasserstein_projected(inputs[0], inputs[1], &self.proj, self.n).expect("checked when built");
        Tensor::scalar(v as f32)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (u, v) = (inputs[0], inputs[1]);
        let c = u.shape()[0];
        let len = u.len() / c;
        let (su, ou) = sorted_projection(&self.proj, self.n, u);
        let (sv, ov) = sorted_projection(&self.proj, self.n, v);
        let scale = grad.item() / (self.n * len) as f32;
        let mut gpu = vec![0f32; self.n * len];
        let mut gpv = vec![0f32; self.n * len];
        for k in 0..self.n {
            for s in 0..len {
                let i = k * len + s;
                let d = su[i] - sv[i];
                let sg = if d > 0.0 {
                    scale
                } else if d < 0.0 {
                    -scale
                } else {
                    0.0
                };
                gpu[k * len + ou[i] as usize] = sg;
                gpv[k * len + ov[i] as usize] = -sg;
            }
        }
        let back = |gp: &[f32], need: bool| {
            need.then(|| {
                let mut gx = vec![0f32; c * len];
                gemm(c, self.n, len, &self.proj, true, gp, false, 0.0, &mut gx);
                Tensor::new(u.shape(), gx)
            })
        };
        vec![back(&gpu, needs[0]), back(&gpv, needs[1])]
    }
}

pub fn sliced_wasserstein_graph(g: &mut Graph, u: Var, v: Var, cfg: &SwConfig, seed: u64) -> Result<Var> {
    check_pair(g.value(u), g.value(v))?;
    let c = g.value(u).shape()[0];
    let n = cfg.projections_for(c)?;
    let op = SlicedWasserstein {
        proj: random_projections(n, c, seed),
        n,
    };
    Ok(g.custom(&[u, v], Box::new(op)))
}

/// Frozen random conv pyramid standing in for pretrained perceptual features.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    store: ParamStore,
    convs: Vec<Conv>,
}

impl PerceptualExtractor {
    pub const DEFAULT_SEED: u64 = 0x5EED_F00D;

    pub fn new(channels: usize, scales: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let convs = (0..scales)
            .map(|s| {
                let cin = if s == 0 { 3 } else { channels };
                Conv::same(&mut store, &format!("phi.{s}"), cin, channels, 3, Init::He(1.0), &mut r)
            })
            .collect();
        Self { store, convs }
    }

    pub fn scales(&self) -> usize {
        self.convs.len()
    }

    pub fn channels(&self) -> usize {
        self.convs[0].out_channels(&self.store)
    }

    /// One map per scale; scale `s` is `2^s` times smaller than the input.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut f = x;
        for (s, conv) in self.convs.iter().enumerate() {
            if s > 0 {
                f = g.avg_pool(f, 2);
            }
            f = conv.forward_frozen(g, &self.store, f);
            f = lrelu(g, f);
            out.push(f);
        }
        out
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1 << (self.convs.len() - 1);
        if h % m != 0 || w % m != 0 {
            return dim_err(format!("{h}x{w} is not divisible by {m}"));
        }
        Ok(())
    }
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new(16, 3, Self::DEFAULT_SEED)
    }
}

pub fn perceptual_features(img: &Image, ext: &PerceptualExtractor) -> Result<Vec<Tensor>> {
    let (h, w) = img.dims();
    ext.check_input(h, w)?;
    let mut g = Graph::new();
    let x = g.input(img.to_tensor());
    let feats = ext.forward(&mut g, x);
    Ok(feats.into_iter().map(|v| g.value(v).clone()).collect())
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l1: Var,
    pub sw: Var,
}

/// `mean|y - t| + lambda_sw * mean_s SW(phi_s(y), phi_s(t))`.
pub fn selfdzsr_loss_graph(
    g: &mut Graph,
    y_hat: Var,
    t: Var,
    ext: &PerceptualExtractor,
    cfg: &SwConfig,
    lambda_sw: f64,
    seed: u64,
) -> Result<LossVars> {
    if g.shape(y_hat) != g.shape(t) {
        return dim_err(format!("output {:?} vs target {:?}", g.shape(y_hat), g.shape(t)));
    }
    let (_, h, w) = g.value(y_hat).dims3();
    ext.check_input(h, w)?;
    let l1 = g.mean_abs_diff(y_hat, t);
    let fy = ext.forward(g, y_hat);
    let ft = ext.forward(g, t);
    let mut terms = Vec::with_capacity(fy.len());
    for (s, (a, b)) in fy.into_iter().zip(ft).enumerate() {
        terms.push(sliced_wasserstein_graph(g, a, b, cfg, derive(seed, s as u64))?);
    }
    let mut sw = terms[0];
    for &v in &terms[1..] {
        sw = g.add(sw, v);
    }
    let sw = g.scale(sw, 1.0 / terms.len() as f32);
    let weighted = g.scale(sw, lambda_sw as f32);
    let total = g.add(l1, weighted);
    Ok(LossVars { total, l1, sw })
}

/// Loss value with the standard weight, and its `(l1, sw)` parts, reduced
/// in f64 outside the graph.
pub fn selfdzsr_loss(
    y_hat: &Image,
    t: &Image,
    ext: &PerceptualExtractor,
    cfg: &SwConfig,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    if y_hat.dims() != t.dims() {
        return dim_err(format!("output {:?} vs target {:?}", y_hat.dims(), t.dims()));
    }
    let l1 = y_hat
        .data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / t.data().len() as f64;
    let fy = perceptual_features(y_hat, ext)?;
    let ft = perceptual_features(t, ext)?;
    let mut sw = 0.0;
    for (s, (a, b)) in fy.iter().zip(&ft).enumerate() {
        sw += sliced_wasserstein(a, b, cfg, derive(seed, s as u64))?;
    }
    sw /= fy.len() as f64;
    Ok((l1 + LAMBDA_SW * sw, l1, sw))
}
