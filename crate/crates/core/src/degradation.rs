//! Degradation network mapping the telephoto GT to a GT-aligned pseudo-LR,
//! conditioned on global statistics of the real LR.

use dzsr_autograd::{CustomOp, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{dim_err, Error, Result};
use crate::image::Image;
use crate::nn::{lrelu, CallProbe, Conv, Init};
use crate::rng;

pub const LAMBDA_CENTROID: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationConfig {
    pub ratio: usize,
    pub channels: usize,
    pub guide_channels: usize,
    pub kernel: usize,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            ratio: 2,
            channels: 16,
            guide_channels: 16,
            kernel: 3,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("backbone kernel size must be odd, got {}", self.kernel)));
        }
        if self.ratio < 2 || self.channels == 0 || self.guide_channels == 0 {
            return Err(Error::Config("degradation net needs ratio >= 2 and nonzero widths".into()));
        }
        Ok(())
    }

    /// Architecture description hashed into checkpoints.
    pub fn describe(&self) -> String {
        format!(
            "degradation ratio={} channels={} guide_channels={} kernel={}",
            self.ratio, self.channels, self.guide_channels, self.kernel
        )
    }
}

/// Sum over `(C_out, C_in)` of `|sum_ij (i - k/2 + 0.5) w_ij| + |sum_ij (j - k/2 + 0.5) w_ij|`.
///
/// Mirror taps are paired before weighting, so centro-symmetric kernels give
/// exactly zero.
pub fn centroid_loss(w: &[f32], shape: &[usize]) -> Result<f64> {
    let (pairs, k) = kernel_dims(shape)?;
    let kk = k * k;
    let mut total = 0.0f64;
    for p in 0..pairs {
        let (my, mx) = moments(&w[p * kk..(p + 1) * kk], k);
        total += my.abs() + mx.abs();
    }
    Ok(total)
}

fn kernel_dims(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 4 || shape[2] != shape[3] {
        return dim_err(format!("centroid loss needs a square [Cout, Cin, k, k] kernel, got {shape:?}"));
    }
    let k = shape[2];
    if k % 2 == 0 {
        return Err(Error::Config(format!("centroid loss needs an odd kernel size, got {k}")));
    }
    Ok((shape[0] * shape[1], k))
}

/// First moments of one `k x k` kernel about its centre.
fn moments(w: &[f32], k: usize) -> (f64, f64) {
    let c = (k / 2) as f64;
    let (mut my, mut mx) = (0.0f64, 0.0f64);
    for idx in 0..(k * k) / 2 {
        let (i, j) = (idx / k, idx % k);
        let mirror = k * k - 1 - idx;
        let d = w[idx] as f64 - w[mirror] as f64;
        // coefficient of tap (i, j) is i - k/2 + 0.5 = i - floor(k/2)
        my += (i as f64 - c) * d;
        mx += (j as f64 - c) * d;
    }
    (my, mx)
}

/// Graph op for [`centroid_loss`] with a sign subgradient.
pub struct CentroidLoss;

impl CustomOp for CentroidLoss {
    fn name(&self) -> &'static str {
        "centroid_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        Tensor::scalar(centroid_loss(inputs[0].data(), inputs[0].shape()).expect("validated kernel") as f32)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let w = inputs[0];
        let (pairs, k) = kernel_dims(w.shape()).expect("validated kernel");
        let kk = k * k;
        let c = (k / 2) as f32;
        let g = grad.item();
        let mut out = vec![0.0f32; w.len()];
        for p in 0..pairs {
            let (my, mx) = moments(&w.data()[p * kk..(p + 1) * kk], k);
            let (sy, sx) = (sign(my), sign(mx));
            for idx in 0..kk {
                let (i, j) = (idx / k, idx % k);
                out[p * kk + idx] = g * (sy * (i as f32 - c) + sx * (j as f32 - c));
            }
        }
        vec![Some(Tensor::new(w.shape(), out))]
    }
}

fn sign(v: f64) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean `|(pseudo_noisy - residual) - s_c|` plus `lambda_c` times the
/// centroid loss of every kernel. Returns `(total, l1, centroid)`.
pub fn degradation_loss(
    pseudo_noisy: &Image,
    s_c: &Image,
    residual: &[f32],
    kernels: &[&Tensor],
) -> Result<(f64, f64, f64)> {
    if pseudo_noisy.dims() != s_c.dims() || residual.len() != s_c.data().len() {
        return dim_err("degradation loss inputs differ in size");
    }
    let l1 = pseudo_noisy
        .data()
        .iter()
        .zip(residual)
        .zip(s_c.data())
        .map(|((&p, &r), &s)| ((p - r) as f64 - s as f64).abs())
        .sum::<f64>()
        / s_c.data().len() as f64;
    let mut centroid = 0.0;
    for k in kernels {
        centroid += centroid_loss(k.data(), k.shape())?;
    }
    Ok((l1 + LAMBDA_CENTROID * centroid, l1, centroid))
}

/// Scale-and-shift head for one backbone layer.
#[derive(Clone, Debug)]
struct ModHead {
    conv: Conv,
    channels: usize,
}

#[derive(Clone, Debug)]
pub struct DegradationNet {
    pub cfg: DegradationConfig,
    pub store: ParamStore,
    hr1: Conv,
    hr2: Conv,
    lr1: Conv,
    lr2: Conv,
    out: Conv,
    g1: Conv,
    g2: Conv,
    gfc: Conv,
    heads: Vec<ModHead>,
    /// Number of forward evaluations.
    pub calls: CallProbe,
}

impl DegradationNet {
    pub fn new(cfg: &DegradationConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::rng(rng::derive(seed, 0xDE6));
        let (c, gc, k) = (cfg.channels, cfg.guide_channels, cfg.kernel);
        let hr1 = Conv::same(&mut store, "deg.hr1", 3, c, k, Init::He(1.0), &mut r);
        let hr2 = Conv::same(&mut store, "deg.hr2", c, c, k, Init::He(1.0), &mut r);
        let lr1 = Conv::same(&mut store, "deg.lr1", c, c, k, Init::He(1.0), &mut r);
        let lr2 = Conv::same(&mut store, "deg.lr2", c, c, k, Init::He(1.0), &mut r);
        let out = Conv::same(&mut store, "deg.out", c, 3, k, Init::Zero, &mut r);
        let g1 = Conv::same(&mut store, "deg.guide1", 3, gc, 3, Init::He(1.0), &mut r);
        let g2 = Conv::new(&mut store, "deg.guide2", gc, gc, 3, 2, Init::He(1.0), &mut r);
        let gfc = Conv::same(&mut store, "deg.guide_fc", gc, gc, 1, Init::He(1.0), &mut r);
        let heads = (0..4)
            .map(|i| ModHead {
                conv: Conv::same(&mut store, &format!("deg.mod{i}"), gc, 2 * c, 1, Init::Zero, &mut r),
                channels: c,
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            store,
            hr1,
            hr2,
            lr1,
            lr2,
            out,
            g1,
            g2,
            gfc,
            heads,
            calls: CallProbe::default(),
        })
    }

    /// Weights of the backbone convolutions (the centroid-constrained set).
    pub fn backbone_kernels(&self) -> Vec<ParamId> {
        vec![self.hr1.w, self.hr2.w, self.lr1.w, self.lr2.w, self.out.w]
    }

    pub fn centroid_term(&self) -> f64 {
        self.backbone_kernels()
            .iter()
            .map(|&id| {
                let t = self.store.get(id);
                centroid_loss(t.data(), t.shape()).expect("odd kernels by construction")
            })
            .sum()
    }

    fn modulate(&self, g: &mut Graph, x: Var, head: &ModHead, guide: Var) -> Var {
        let v = head.conv.forward(g, &self.store, guide);
        let c = head.channels;
        let s = g.narrow(v, 0, c);
        let s = g.reshape(s, &[c]);
        let ones = g.input(Tensor::full(&[c], 1.0));
        let scale = g.add(s, ones);
        let shift = g.narrow(v, c, c);
        let shift = g.reshape(shift, &[c]);
        g.channel_affine(x, scale, shift)
    }

    /// Clean pseudo-LR `[3, H/r, W/r]` from `t [3, H, W]` and `s_c [3, H/r, W/r]`.
    pub fn forward(&self, g: &mut Graph, t: Var, s_c: Var) -> Var {
        self.calls.hit();
        let st = &self.store;
        let gv = self.g1.forward(g, st, s_c);
        let gv = lrelu(g, gv);
        let gv = self.g2.forward(g, st, gv);
        let gv = lrelu(g, gv);
        let gv = g.global_avg_pool(gv);
        let gv = self.gfc.forward(g, st, gv);
        let guide = lrelu(g, gv);

        let mut x = t;
        for (i, conv) in [&self.hr1, &self.hr2, &self.lr1, &self.lr2].into_iter().enumerate() {
            if i == 2 {
                x = g.avg_pool(x, self.cfg.ratio);
            }
            x = conv.forward(g, st, x);
            x = self.modulate(g, x, &self.heads[i], guide);
            x = lrelu(g, x);
        }
        let y = self.out.forward(g, st, x);
        let skip = g.avg_pool(t, self.cfg.ratio);
        g.add(y, skip)
    }

    /// Centroid penalty over the backbone kernels as a graph scalar.
    pub fn centroid_var(&self, g: &mut Graph) -> Var {
        let mut acc: Option<Var> = None;
        for id in self.backbone_kernels() {
            let w = g.param(&self.store, id);
            let c = g.custom(&[w], Box::new(CentroidLoss));
            acc = Some(match acc {
                Some(a) => g.add(a, c),
                None => c,
            });
        }
        acc.expect("backbone has kernels")
    }

    pub fn check_dims(&self, t: &Image, s_c: &Image) -> Result<()> {
        let r = self.cfg.ratio;
        if t.height() != s_c.height() * r || t.width() != s_c.width() * r {
            return dim_err(format!(
                "telephoto {:?} must be {r}x the LR {:?}",
                t.dims(),
                s_c.dims()
            ));
        }
        Ok(())
    }

    /// Unclamped clean pseudo-LR.
    pub fn degrade(&self, t: &Image, s_c: &Image) -> Result<Image> {
        self.check_dims(t, s_c)?;
        let mut g = Graph::new();
        let tv = g.input(t.to_tensor());
        let sv = g.input(s_c.to_tensor());
        let y = self.forward(&mut g, tv, sv);
        Image::from_tensor(g.value(y))
    }

    /// Response centroid, in LR pixels relative to the expected position,
    /// for an `r x r` bright block placed at the centre of a flat HR image.
    pub fn impulse_centroid_offset(&self, lr_size: usize, background: f32, amplitude: f32) -> Result<(f64, f64)> {
        let r = self.cfg.ratio;
        let hr = lr_size * r;
        let c0 = lr_size / 2;
        let flat = Image::filled(hr, hr, background)?;
        let bump = Image::from_fn(hr, hr, |i, j, _| {
            if i / r == c0 && j / r == c0 {
                background + amplitude
            } else {
                background
            }
        })?;
        let guide = Image::filled(lr_size, lr_size, background)?;
        let base = self.degrade(&flat, &guide)?;
        let resp = self.degrade(&bump, &guide)?;
        let (mut m0, mut my, mut mx) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..lr_size {
            for j in 0..lr_size {
                for c in 0..3 {
                    let d = (resp.get(i, j, c) - base.get(i, j, c)) as f64;
                    m0 += d;
                    my += d * i as f64;
                    mx += d * j as f64;
                }
            }
        }
        if m0.abs() < 1e-12 {
            return Err(Error::Numeric("impulse response has no mass".into()));
        }
        Ok((my / m0 - c0 as f64, mx / m0 - c0 as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centroid_cases() {
        let mut w = vec![0.0f32; 9];
        w[4] = 1.0;
        assert_eq!(centroid_loss(&w, &[1, 1, 3, 3]).unwrap(), 0.0);
        let mut w = vec![0.0f32; 9];
        w[0] = 1.0;
        assert_eq!(centroid_loss(&w, &[1, 1, 3, 3]).unwrap(), 2.0);
        assert!(matches!(centroid_loss(&[0.0; 4], &[1, 1, 2, 2]), Err(Error::Config(_))));
    }

    #[test]
    fn degradation_loss_decomposes() {
        let s = Image::filled(8, 8, 0.3).unwrap();
        let res = vec![0.02f32; 192];
        let noisy = s.map(|v| v + 0.02).unwrap();
        let centered = {
            let mut w = vec![0.0f32; 9];
            w[4] = 0.7;
            Tensor::new(&[1, 1, 3, 3], w)
        };
        let (total, l1, cent) = degradation_loss(&noisy, &s, &res, &[&centered]).unwrap();
        assert!(total.abs() < 1e-6 && l1.abs() < 1e-6 && cent == 0.0);

        let off = noisy.map(|v| v + 0.1).unwrap();
        let mut w = vec![0.0f32; 9];
        w[0] = 1.0;
        let corner = Tensor::new(&[1, 1, 3, 3], w);
        let (total, l1, cent) = degradation_loss(&off, &s, &res, &[&corner, &centered]).unwrap();
        assert!((l1 - 0.1).abs() < 1e-6);
        assert_eq!(cent, 2.0);
        assert_eq!(total, l1 + 100.0 * cent);
    }

    #[test]
    fn output_is_lr_sized_and_deterministic() {
        let net = DegradationNet::new(&DegradationConfig::default(), 3).unwrap();
        let t = crate::data::synthesize_scene(1, 32, 32).unwrap();
        let s = crate::image::area_downsample(&t, 2).unwrap();
        let a = net.degrade(&t, &s).unwrap();
        assert_eq!(a.dims(), (16, 16));
        assert_eq!(a, net.degrade(&t, &s).unwrap());
        // the zero-initialised output layer leaves only the area skip
        assert_eq!(a, s);
        assert_eq!(net.calls.count(), 2);
        assert!(matches!(net.degrade(&t, &t), Err(Error::Dimension(_))));
    }

    #[test]
    fn fresh_net_has_centred_impulse_response() {
        let net = DegradationNet::new(&DegradationConfig::default(), 5).unwrap();
        let (dy, dx) = net.impulse_centroid_offset(16, 0.5, 0.05).unwrap();
        assert!(dy.abs() < 1e-4 && dx.abs() < 1e-4);
    }
}
