//! AdaSTN units, their ablation variants, and the three-stage alignment
//! stack with zero-offset dropout.

use std::fmt;
use std::str::FromStr;

use dzsr_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;

use super::deform::{deform_conv, AffineOffsets, DeformableKernel};
use super::grid::TAPS;
use crate::error::{Error, Result};
use crate::nn::{init_tensor, lrelu, CallProbe, Conv, Init};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AlignMode {
    /// Per-pixel affine `(A, b)`.
    #[default]
    AdaStn,
    /// One global affine `(A, b)` per sample.
    StnGlobal,
    /// Offsets `P` regressed directly.
    DeformDirect,
}

impl AlignMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignMode::AdaStn => "adastn",
            AlignMode::StnGlobal => "stn_global",
            AlignMode::DeformDirect => "deform_direct",
        }
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adastn" => Ok(AlignMode::AdaStn),
            "stn_global" | "stn" => Ok(AlignMode::StnGlobal),
            "deform_direct" | "deform" => Ok(AlignMode::DeformDirect),
            other => Err(Error::Config(format!("unknown alignment mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaStnConfig {
    pub num_stages: usize,
    pub zero_prob: f32,
    pub estimator_channels: usize,
    pub mode: AlignMode,
}

impl Default for AdaStnConfig {
    fn default() -> Self {
        Self {
            num_stages: 3,
            zero_prob: 0.3,
            estimator_channels: 16,
            mode: AlignMode::AdaStn,
        }
    }
}

impl AdaStnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.zero_prob) {
            return Err(Error::Config(format!("zero_prob must lie in [0, 1], got {}", self.zero_prob)));
        }
        if self.num_stages == 0 || self.estimator_channels == 0 {
            return Err(Error::Config("alignment stack needs at least one stage and channel".into()));
        }
        Ok(())
    }
}

/// Offset estimator plus deformable kernel.
#[derive(Clone, Debug)]
pub struct AdaStn {
    pub mode: AlignMode,
    est1: Conv,
    est2: Conv,
    head: Conv,
    pub kernel_w: ParamId,
    pub kernel_b: ParamId,
    /// Number of offset-estimator evaluations.
    pub estimator_calls: CallProbe,
}

impl AdaStn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        src_channels: usize,
        guide_channels: usize,
        out_channels: usize,
        estimator_channels: usize,
        mode: AlignMode,
        rng: &mut Rng,
    ) -> Self {
        let e = estimator_channels;
        let est1 = Conv::same(store, &format!("{name}.est1"), src_channels + guide_channels, e, 3, Init::He(1.0), rng);
        let est2 = Conv::same(store, &format!("{name}.est2"), e, e, 3, Init::He(1.0), rng);
        let head = match mode {
            AlignMode::AdaStn | AlignMode::StnGlobal => {
                let c = Conv::same(store, &format!("{name}.head"), e, 6, 1, Init::Zero, rng);
                // A rows start at zero, b rows small
                let small = init_tensor(&[2, e, 1, 1], e, Init::Uniform(1e-3), rng);
                store.get_mut(c.w).data_mut()[4 * e..].copy_from_slice(small.data());
                c
            }
            AlignMode::DeformDirect => {
                Conv::same(store, &format!("{name}.head"), e, 2 * TAPS, 1, Init::Uniform(1e-3), rng)
            }
        };
        let kernel_w = store.add(
            format!("{name}.kernel.w"),
            init_tensor(&[out_channels, src_channels, 3, 3], src_channels * TAPS, Init::He(1.0), rng),
        );
        let kernel_b = store.add(format!("{name}.kernel.b"), Tensor::zeros(&[out_channels]));
        Self {
            mode,
            est1,
            est2,
            head,
            kernel_w,
            kernel_b,
            estimator_calls: CallProbe::default(),
        }
    }

    pub fn kernel(&self, store: &ParamStore) -> DeformableKernel {
        DeformableKernel::new(store.get(self.kernel_w).clone(), store.get(self.kernel_b).clone())
            .expect("kernel shapes fixed at construction")
    }

    /// Offset field `P` as `[18, H, W]`.
    pub fn offsets(&self, g: &mut Graph, store: &ParamStore, src: Var, guide: Var) -> Var {
        self.estimator_calls.hit();
        let (_, h, w) = g.value(src).dims3();
        let x = g.concat(&[src, guide]);
        let f = self.est1.forward(g, store, x);
        let f = lrelu(g, f);
        let f = self.est2.forward(g, store, f);
        let f = lrelu(g, f);
        match self.mode {
            AlignMode::AdaStn => {
                let theta = self.head.forward(g, store, f);
                g.custom(&[theta], Box::new(AffineOffsets))
            }
            AlignMode::StnGlobal => {
                let pooled = g.global_avg_pool(f);
                let theta = self.head.forward(g, store, pooled);
                let theta = g.broadcast(theta, h, w);
                g.custom(&[theta], Box::new(AffineOffsets))
            }
            AlignMode::DeformDirect => self.head.forward(g, store, f),
        }
    }

    /// Deform `src` toward `guide`; with `force_zero` the estimator is
    /// skipped and `P = 0`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, src: Var, guide: Var, force_zero: bool) -> Var {
        let (_, h, w) = g.value(src).dims3();
        let p = if force_zero {
            g.input(Tensor::zeros(&[2 * TAPS, h, w]))
        } else {
            self.offsets(g, store, src, guide)
        };
        let kw = g.param(store, self.kernel_w);
        let kb = g.param(store, self.kernel_b);
        deform_conv(g, src, p, kw, Some(kb))
    }
}

/// Draw which stages run with `P = 0` for one training sample.
pub fn draw_zero_mask(rng: &mut Rng, stages: usize, zero_prob: f32) -> Vec<bool> {
    (0..stages).map(|_| rng.random::<f32>() < zero_prob).collect()
}

/// Cascade of AdaSTN units aligning LR features to a guide.
#[derive(Clone, Debug)]
pub struct AlignmentStack {
    pub units: Vec<AdaStn>,
    pub zero_prob: f32,
}

impl AlignmentStack {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &AdaStnConfig, rng: &mut Rng) -> Self {
        let units = (0..cfg.num_stages)
            .map(|i| {
                AdaStn::new(
                    store,
                    &format!("{name}.{i}"),
                    channels,
                    channels,
                    channels,
                    cfg.estimator_channels,
                    cfg.mode,
                    rng,
                )
            })
            .collect();
        Self {
            units,
            zero_prob: cfg.zero_prob,
        }
    }

    pub fn stages(&self) -> usize {
        self.units.len()
    }

    /// Inference uses `P = 0` in every stage.
    pub fn inference_mask(&self) -> Vec<bool> {
        vec![true; self.units.len()]
    }

    pub fn draw_mask(&self, rng: &mut Rng) -> Vec<bool> {
        draw_zero_mask(rng, self.units.len(), self.zero_prob)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, lr: Var, guide: Var, zero_mask: &[bool]) -> Var {
        assert_eq!(zero_mask.len(), self.units.len(), "one zero flag per stage");
        let mut x = lr;
        for (i, (unit, &zero)) in self.units.iter().zip(zero_mask).enumerate() {
            x = unit.forward(g, store, x, guide, zero);
            if i + 1 < self.units.len() {
                x = lrelu(g, x);
            }
        }
        x
    }

    pub fn estimator_calls(&self) -> usize {
        self.units.iter().map(|u| u.estimator_calls.count()).sum()
    }
}
