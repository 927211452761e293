//! Globally modulated residual body and pixel-shuffle upsampler.

use dzsr_autograd::{Graph, ParamStore, Tensor, Var};

use crate::error::{dim_err, Error, Result};
use crate::image::{bicubic_upsample, Image};
use crate::nn::{lrelu, pixel_shuffle, Conv, Init};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RestorationConfig {
    pub ratio: usize,
    pub channels: usize,
    pub blocks: usize,
    /// Add a bicubic upsampling of the LR input to the output.
    pub lr_skip: bool,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            ratio: 2,
            channels: 16,
            blocks: 4,
            lr_skip: true,
        }
    }
}

impl RestorationConfig {
    pub fn published() -> Self {
        Self {
            ratio: 4,
            channels: 64,
            blocks: 16,
            lr_skip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.ratio, 2 | 4) {
            return Err(Error::Config(format!("ratio must be 2 or 4, got {}", self.ratio)));
        }
        if self.channels == 0 || self.blocks == 0 {
            return Err(Error::Config("channels and blocks must be positive".into()));
        }
        Ok(())
    }
}

/// Per-block `(scale, shift)`, each `[C]`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub scale: Var,
    pub shift: Var,
}

impl Modulation {
    /// `(1, 0)`: the block runs unmodulated.
    pub fn neutral(g: &mut Graph, channels: usize) -> Self {
        Self {
            scale: g.input(Tensor::full(&[channels], 1.0)),
            shift: g.input(Tensor::zeros(&[channels])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut Rng) -> Self {
        Self {
            conv1: Conv::same(store, &format!("{name}.conv1"), c, c, 3, Init::He(1.0), rng),
            conv2: Conv::same(store, &format!("{name}.conv2"), c, c, 3, Init::Zero, rng),
        }
    }

    /// `f(x)` alone.
    pub fn branch(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let f = self.conv1.forward(g, store, x);
        let f = lrelu(g, f);
        self.conv2.forward(g, store, f)
    }

    /// `x + scale * f(x) + shift`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, m: Modulation) -> Result<Var> {
        let c = g.value(x).shape()[0];
        if g.value(m.scale).len() != c || g.value(m.shift).len() != c {
            return dim_err(format!(
                "modulation has {} / {} entries for {c} channels",
                g.value(m.scale).len(),
                g.value(m.shift).len()
            ));
        }
        let f = self.branch(g, store, x);
        let y = g.channel_affine(f, m.scale, m.shift);
        Ok(g.add(x, y))
    }
}

/// Pooled features to one modulation pair per block.
#[derive(Clone, Debug)]
pub struct ModulationEncoder {
    pub fc: Conv,
    pub heads: Vec<Conv>,
    channels: usize,
}

impl ModulationEncoder {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, blocks: usize, rng: &mut Rng) -> Self {
        Self {
            fc: Conv::same(store, &format!("{name}.fc"), 3 * c, c, 1, Init::He(1.0), rng),
            heads: (0..blocks)
                .map(|i| Conv::same(store, &format!("{name}.head{i}"), c, 2 * c, 1, Init::Zero, rng))
                .collect(),
            channels: c,
        }
    }

    /// Every input is globally pooled first, so outputs ignore spatial layout.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fused: Var,
        ref_feat: Var,
        lr_center_feat: Var,
    ) -> Vec<Modulation> {
        let c = self.channels;
        let pooled: Vec<Var> = [fused, ref_feat, lr_center_feat]
            .into_iter()
            .map(|v| g.global_avg_pool(v))
            .collect();
        let z = g.concat(&pooled);
        let z = self.fc.forward(g, store, z);
        let z = lrelu(g, z);
        let one = g.input(Tensor::full(&[c], 1.0));
        self.heads
            .iter()
            .map(|head| {
                let v = head.forward(g, store, z);
                let s = g.narrow(v, 0, c);
                let s = g.reshape(s, &[c]);
                let scale = g.add(s, one);
                let b = g.narrow(v, c, c);
                let shift = g.reshape(b, &[c]);
                Modulation { scale, shift }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RestorationNet {
    pub cfg: RestorationConfig,
    pub fusion: Conv,
    pub ref_enc: Conv,
    pub lr_enc: Conv,
    pub encoder: ModulationEncoder,
    pub blocks: Vec<ResBlock>,
    pub body_out: Conv,
    pub up: Vec<Conv>,
    pub tail: Conv,
}

impl RestorationNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: RestorationConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let stages = if cfg.ratio == 4 { 2 } else { 1 };
        Ok(Self {
            cfg,
            fusion: Conv::same(store, &format!("{name}.fusion"), 2 * c, c, 3, Init::He(1.0), rng),
            ref_enc: Conv::same(store, &format!("{name}.ref_enc"), 3, c, 3, Init::He(1.0), rng),
            lr_enc: Conv::same(store, &format!("{name}.lr_enc"), 3, c, 3, Init::He(1.0), rng),
            encoder: ModulationEncoder::new(store, &format!("{name}.encoder"), c, cfg.blocks, rng),
            blocks: (0..cfg.blocks)
                .map(|i| ResBlock::new(store, &format!("{name}.block{i}"), c, rng))
                .collect(),
            body_out: Conv::same(store, &format!("{name}.body_out"), c, c, 3, Init::He(1.0), rng),
            up: (0..stages)
                .map(|i| Conv::same(store, &format!("{name}.up{i}"), c, 4 * c, 3, Init::He(1.0), rng))
                .collect(),
            tail: Conv::same(
                store,
                &format!("{name}.tail"),
                c,
                3,
                3,
                if cfg.lr_skip { Init::He(0.1) } else { Init::He(1.0) },
                rng,
            ),
        })
    }

    /// Fused features and their modulation vectors.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        aligned_lr: Var,
        aligned_ref: Var,
        ref_img: Var,
        lr_img: Var,
    ) -> Result<(Var, Vec<Modulation>)> {
        if g.shape(aligned_lr) != g.shape(aligned_ref) {
            return dim_err(format!(
                "aligned LR {:?} and Ref {:?} differ",
                g.shape(aligned_lr),
                g.shape(aligned_ref)
            ));
        }
        let (_, h, w) = g.value(lr_img).dims3();
        let r = self.cfg.ratio;
        if h % r != 0 || w % r != 0 {
            return dim_err(format!("LR {h}x{w} is not divisible by {r}"));
        }
        let x = g.concat(&[aligned_lr, aligned_ref]);
        let fused = self.fusion.forward(g, store, x);
        let rf = self.ref_enc.forward(g, store, ref_img);
        let rf = lrelu(g, rf);
        let (ch, cw) = (h / r, w / r);
        let center = g.crop(lr_img, (h - ch) / 2, (w - cw) / 2, ch, cw);
        let lf = self.lr_enc.forward(g, store, center);
        let lf = lrelu(g, lf);
        let mods = self.encoder.forward(g, store, fused, rf, lf);
        Ok((fused, mods))
    }

    /// Body and upsampler under the given modulations. Output is unclamped.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, fused: Var, mods: &[Modulation], lr_img: Var) -> Result<Var> {
        if mods.len() != self.blocks.len() {
            return dim_err(format!("{} modulations for {} blocks", mods.len(), self.blocks.len()));
        }
        let mut x = fused;
        for (block, &m) in self.blocks.iter().zip(mods) {
            x = block.forward(g, store, x, m)?;
        }
        let body = self.body_out.forward(g, store, x);
        let mut x = g.add(body, fused);
        for conv in &self.up {
            let y = conv.forward(g, store, x);
            let y = pixel_shuffle(g, y, 2);
            x = lrelu(g, y);
        }
        let out = self.tail.forward(g, store, x);
        if !self.cfg.lr_skip {
            return Ok(out);
        }
        let lr = Image::from_tensor(g.value(lr_img))?;
        let base = bicubic_upsample(&lr, self.cfg.ratio)?;
        let base = g.input(base.to_tensor());
        Ok(g.add(out, base))
    }

    pub fn restore(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        aligned_lr: Var,
        aligned_ref: Var,
        ref_img: Var,
        lr_img: Var,
    ) -> Result<Var> {
        let (fused, mods) = self.encode(g, store, aligned_lr, aligned_ref, ref_img, lr_img)?;
        self.decode(g, store, fused, &mods, lr_img)
    }
}
