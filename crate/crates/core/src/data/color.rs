//! Per-channel brightness and color matching.

use crate::error::Result;
use crate::image::Image;

/// `out_c = gain_c * in_c + offset_c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorAffine {
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl ColorAffine {
    pub const IDENTITY: Self = Self {
        gain: [1.0; 3],
        offset: [0.0; 3],
    };

    /// Apply without clamping.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        let (h, w) = img.dims();
        Image::from_fn(h, w, |i, j, c| (self.gain[c] * img.get(i, j, c) as f64 + self.offset[c]) as f32)
    }
}

pub fn channel_stats(img: &Image) -> [(f64, f64); 3] {
    let n = (img.height() * img.width()) as f64;
    std::array::from_fn(|c| {
        let vals = img.data().iter().skip(c).step_by(3).map(|&v| v as f64);
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    })
}

/// Fit the map taking `src` statistics onto `target` statistics. A channel
/// with zero variance in `src` gets a pure mean shift.
pub fn fit_color_affine(src: &Image, target: &Image) -> ColorAffine {
    let s = channel_stats(src);
    let t = channel_stats(target);
    let mut out = ColorAffine::IDENTITY;
    for c in 0..3 {
        let (sm, ss) = s[c];
        let (tm, ts) = t[c];
        if ss > 0.0 {
            out.gain[c] = ts / ss;
            out.offset[c] = tm - out.gain[c] * sm;
        } else {
            log::warn!("color match: source channel {c} has zero variance, applying mean shift only");
            out.offset[c] = tm - sm;
        }
    }
    out
}

/// Match `src` to `target` per-channel mean and std, then clamp to `[0, 1]`.
pub fn color_match(src: &Image, target: &Image) -> Result<Image> {
    Ok(fit_color_affine(src, target).apply(src)?.clamp01())
}
