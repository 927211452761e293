//! Synthetic dual-zoom data: scenes, capture simulation, crops and the
//! on-disk dataset format.

mod color;
mod dataset;
mod noise;
mod pair;
mod scene;
mod warp;

pub use color::{channel_stats, color_match, fit_color_affine, ColorAffine};
pub use dataset::{
    generate_dataset, generate_sample, generate_samples, list_samples, load_sample, sample_seeds, save_sample, GenConfig,
};
pub use noise::{inject_noise, NoiseDraw, NoiseSpec, NoiseStage};
pub use pair::{make_dualzoom_pair, warp_center_crop, DegradationMeta, PairConfig};
pub use scene::{synthesize_scene, SCENE_ALIGN};
pub use warp::{smooth_warp, WarpField};

use crate::error::{dim_err, Result};
use crate::image::Image;

/// Central `1 / ratio` window of `img`.
pub fn center_crop(img: &Image, ratio: usize) -> Result<Image> {
    if ratio == 0 {
        return dim_err("center crop ratio must be >= 1");
    }
    let (h, w) = img.dims();
    if h % ratio != 0 {
        return dim_err(format!("height {h} is not divisible by ratio {ratio}"));
    }
    if w % ratio != 0 {
        return dim_err(format!("width {w} is not divisible by ratio {ratio}"));
    }
    let (ch, cw) = (h / ratio, w / ratio);
    img.crop((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// One simulated capture pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DualZoomSample {
    pub short_focus: Image,
    pub telephoto: Image,
    /// Short-focus view before noise, in the same color frame as `short_focus`.
    pub clean_short: Image,
    pub ratio: usize,
    /// Telephoto displacement relative to the ideal center crop, `[H, W, 2]`.
    pub true_warp: WarpField,
    pub gen_seed: u64,
    pub meta: DegradationMeta,
}

/// Training / evaluation inputs cut from a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    /// Center crop of the short-focus view.
    pub lr: Image,
    /// Center crop of the telephoto view, same size as `lr`.
    pub reference: Image,
    /// The whole telephoto view, `ratio x` the size of `lr`.
    pub gt: Image,
    /// `lr` without noise.
    pub clean_lr: Image,
}

impl DualZoomSample {
    pub fn triplet(&self) -> Result<Triplet> {
        let r = self.ratio;
        Ok(Triplet {
            lr: center_crop(&self.short_focus, r)?,
            reference: center_crop(&self.telephoto, r)?,
            gt: self.telephoto.clone(),
            clean_lr: center_crop(&self.clean_short, r)?,
        })
    }

    /// Flip / transpose every view and the warp field consistently.
    pub fn augment(&self, hflip: bool, vflip: bool, transpose: bool) -> Self {
        let mut out = self.clone();
        let images = |s: &mut Self, f: &dyn Fn(&Image) -> Image| {
            s.short_focus = f(&s.short_focus);
            s.telephoto = f(&s.telephoto);
            s.clean_short = f(&s.clean_short);
        };
        if hflip {
            images(&mut out, &Image::flip_horizontal);
            out.true_warp = out.true_warp.flip_horizontal();
        }
        if vflip {
            images(&mut out, &Image::flip_vertical);
            out.true_warp = out.true_warp.flip_vertical();
        }
        if transpose {
            images(&mut out, &Image::transpose);
            out.true_warp = out.true_warp.transpose();
        }
        out
    }
}
