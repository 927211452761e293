//! The zooming network and the self-supervised training pipeline around it.

use std::fmt;
use std::str::FromStr;

use dzsr_autograd::{Graph, ParamStore, Var};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::TrainConfig;
use crate::data::{inject_noise, NoiseSpec, Triplet};
use crate::degradation::DegradationNet;
use crate::error::{Error, Result};
use crate::geometry::{draw_zero_mask, AdaStnConfig, AlignMode, AlignmentStack};
use crate::image::Image;
use crate::matching::{MatchConfig, RefAligner};
use crate::nn::{lrelu, Conv, Init};
use crate::restoration::{RestorationConfig, RestorationNet};
use crate::rng::{self, Rng};

/// Which alignment guides come from the pseudo-LR, and which AdaSTN variant runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AblationMode {
    #[default]
    Full,
    /// LR alignment guided by the LR itself.
    NoLrAlign,
    /// Ref alignment guided by the LR.
    NoRefAlign,
    /// Both guides are the LR; no pseudo-LR is built.
    None,
    Stn,
    DeformDirect,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        Self::Full,
        Self::NoLrAlign,
        Self::NoRefAlign,
        Self::None,
        Self::Stn,
        Self::DeformDirect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoLrAlign => "no_lr_align",
            Self::NoRefAlign => "no_ref_align",
            Self::None => "none",
            Self::Stn => "stn",
            Self::DeformDirect => "deform_direct",
        }
    }

    pub fn pseudo_guides_lr(self) -> bool {
        !matches!(self, Self::NoLrAlign | Self::None)
    }

    pub fn pseudo_guides_ref(self) -> bool {
        !matches!(self, Self::NoRefAlign | Self::None)
    }

    pub fn needs_pseudo(self) -> bool {
        self.pseudo_guides_lr() || self.pseudo_guides_ref()
    }

    pub fn align_mode(self, base: AlignMode) -> AlignMode {
        match self {
            Self::Stn => AlignMode::StnGlobal,
            Self::DeformDirect => AlignMode::DeformDirect,
            _ => base,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZoomConfig {
    pub restoration: RestorationConfig,
    pub stn: AdaStnConfig,
    pub matching: MatchConfig,
}

impl ZoomConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            restoration: cfg.restoration(),
            stn: cfg.adastn(),
            matching: cfg.matching(),
        }
    }

    pub fn ratio(&self) -> usize {
        self.restoration.ratio
    }

    pub fn describe(&self) -> String {
        let r = &self.restoration;
        format!(
            "zoom ratio={} channels={} blocks={} lr_skip={} stages={} estimator={} align={} match_patch={} match_stride={} features={}",
            r.ratio,
            r.channels,
            r.blocks,
            r.lr_skip,
            self.stn.num_stages,
            self.stn.estimator_channels,
            self.stn.mode,
            self.matching.patch_size,
            self.matching.stride,
            self.matching.feature_channels
        )
    }
}

/// Which AdaSTN units run with `P = 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZeroMasks {
    pub lr: Vec<bool>,
    pub reference: bool,
}

impl ZeroMasks {
    pub fn all(stages: usize) -> Self {
        Self {
            lr: vec![true; stages],
            reference: true,
        }
    }

    pub fn draw(rng: &mut Rng, stages: usize, p: f32) -> Self {
        let mut m = draw_zero_mask(rng, stages + 1, p);
        let reference = m.pop().expect("stages + 1 draws");
        Self { lr: m, reference }
    }
}

#[derive(Clone, Debug)]
pub struct ZoomNet {
    pub cfg: ZoomConfig,
    pub store: ParamStore,
    pub head: Conv,
    pub lr_stack: AlignmentStack,
    pub ref_align: RefAligner,
    pub body: RestorationNet,
}

impl ZoomNet {
    pub fn new(cfg: &ZoomConfig, seed: u64) -> Result<Self> {
        cfg.stn.validate()?;
        cfg.matching.validate()?;
        cfg.restoration.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::rng(rng::derive(seed, 0x200A));
        let c = cfg.restoration.channels;
        let head = Conv::same(&mut store, "zoom.head", 3, c, 3, Init::He(1.0), &mut r);
        let lr_stack = AlignmentStack::new(&mut store, "zoom.lr_align", c, &cfg.stn, &mut r);
        let ref_align = RefAligner::new(
            &mut store,
            "zoom.ref_align",
            cfg.ratio(),
            cfg.matching,
            c,
            c,
            &cfg.stn,
            &mut r,
        );
        let body = RestorationNet::new(&mut store, "zoom.body", cfg.restoration, &mut r)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            head,
            lr_stack,
            ref_align,
            body,
        })
    }

    pub fn stages(&self) -> usize {
        self.lr_stack.stages()
    }

    pub fn estimator_calls(&self) -> usize {
        self.lr_stack.estimator_calls() + self.ref_align.refine.estimator_calls.count()
    }

    /// LR and Ref must share dims divisible by `r^2`.
    pub fn check_inputs(&self, lr: &Image, reference: &Image) -> Result<()> {
        let r2 = self.cfg.ratio() * self.cfg.ratio();
        let (h, w) = lr.dims();
        if reference.dims() != (h, w) {
            return Err(Error::Input(format!(
                "Ref {:?} must match the LR size {h}x{w}",
                reference.dims()
            )));
        }
        if h % r2 != 0 || w % r2 != 0 || h / r2 < 3 || w / r2 < 3 {
            return Err(Error::Input(format!(
                "LR {h}x{w} must be a multiple of {r2} and at least {} per side",
                3 * r2
            )));
        }
        Ok(())
    }

    fn features(&self, g: &mut Graph, img: Var) -> Var {
        let f = self.head.forward(g, &self.store, img);
        lrelu(g, f)
    }

    /// Unclamped SR output `[3, rH, rW]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        lr: &Image,
        reference: &Image,
        lr_guide: &Image,
        ref_guide: &Image,
        masks: &ZeroMasks,
    ) -> Result<Var> {
        self.check_inputs(lr, reference)?;
        for guide in [lr_guide, ref_guide] {
            if guide.dims() != lr.dims() {
                return Err(Error::Input(format!("guide {:?} must match the LR {:?}", guide.dims(), lr.dims())));
            }
        }
        let st = &self.store;
        let lr_v = g.input(lr.to_tensor());
        let ref_v = g.input(reference.to_tensor());
        let f_lr = self.features(g, lr_v);
        let lg = g.input(lr_guide.to_tensor());
        let f_lg = self.features(g, lg);
        let rg = g.input(ref_guide.to_tensor());
        let f_rg = self.features(g, rg);
        let aligned_lr = self.lr_stack.forward(g, st, f_lr, f_lg, &masks.lr);
        let aligned_ref = self
            .ref_align
            .forward(g, st, reference, ref_guide, f_rg, masks.reference)?;
        self.body.restore(g, st, aligned_lr, aligned_ref, ref_v, lr_v)
    }

    /// Test-time graph: the LR guides everything and every `P` is zero.
    pub fn infer(&self, lr: &Image, reference: &Image) -> Result<Image> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, lr, reference, lr, lr, &ZeroMasks::all(self.stages()))?;
        Ok(Image::from_tensor(g.value(y))?.clamp01())
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        Checkpoint::from_store(CheckpointKind::Zooming, &self.cfg.describe(), config_text, &self.store)
    }

    /// Rebuild from a checkpoint using the configuration stored inside it.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::parse_text(&ckpt.config)?;
        let mut net = Self::new(&ZoomConfig::from_train(&cfg), cfg.seed)?;
        ckpt.restore_into(CheckpointKind::Zooming, &net.cfg.describe(), &mut net.store)?;
        Ok(net)
    }
}

/// Zooming network plus the frozen degradation model that feeds it
/// pseudo-LR guides during training.
#[derive(Clone, Debug)]
pub struct SelfDzsr {
    pub zoom: ZoomNet,
    pub degradation: Option<DegradationNet>,
    pub mode: AblationMode,
    pub noise: NoiseSpec,
}

impl SelfDzsr {
    pub fn new(zoom: ZoomNet, degradation: Option<DegradationNet>, mode: AblationMode) -> Result<Self> {
        if mode.needs_pseudo() && degradation.is_none() {
            return Err(Error::Config(format!("ablation mode {mode} needs a degradation model")));
        }
        if let Some(d) = &degradation {
            if d.cfg.ratio != zoom.cfg.ratio() {
                return Err(Error::Config("degradation and zooming ratios differ".into()));
            }
        }
        Ok(Self {
            zoom,
            degradation,
            mode,
            noise: NoiseSpec::default(),
        })
    }

    /// Noisy pseudo-LR for one triplet, or `None` when the mode never uses it.
    pub fn pseudo_lr(&self, t: &Triplet, seed: u64) -> Result<Option<Image>> {
        if !self.mode.needs_pseudo() {
            return Ok(None);
        }
        let d = self
            .degradation
            .as_ref()
            .ok_or_else(|| Error::Config("pseudo-LR requested without a degradation model".into()))?;
        let clean = d.degrade(&t.gt, &t.lr)?.clamp01();
        let (noisy, _, _) = inject_noise(&clean, &self.noise, seed)?;
        Ok(Some(noisy))
    }

    /// Training graph for one triplet. `pseudo` stands in for the pseudo-LR
    /// wherever the mode asks for it.
    pub fn forward_train(&self, g: &mut Graph, t: &Triplet, pseudo: Option<&Image>, masks: &ZeroMasks) -> Result<Var> {
        let pick = |use_pseudo: bool| -> Result<&Image> {
            if use_pseudo {
                pseudo.ok_or_else(|| Error::Config("mode needs a pseudo-LR".into()))
            } else {
                Ok(&t.lr)
            }
        };
        let lr_guide = pick(self.mode.pseudo_guides_lr())?;
        let ref_guide = pick(self.mode.pseudo_guides_ref())?;
        self.zoom.forward(g, &t.lr, &t.reference, lr_guide, ref_guide, masks)
    }

    pub fn degradation_calls(&self) -> usize {
        self.degradation.as_ref().map_or(0, |d| d.calls.count())
    }
}
