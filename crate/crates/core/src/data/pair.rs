//! Dual-zoom capture simulation.

use rand::Rng as _;

use super::color::{fit_color_affine, ColorAffine};
use super::noise::{inject_noise, NoiseDraw, NoiseSpec};
use super::warp::{smooth_warp, WarpField};
use super::{center_crop, DualZoomSample};
use crate::error::{dim_err, Error, Result};
use crate::image::{area_downsample, gaussian_blur, sample_bilinear, Image};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PairConfig {
    pub warp_bound: f32,
    /// Control cells per side of the smooth warp grid.
    pub warp_cells: usize,
    pub noise: NoiseSpec,
    /// Gaussian blur sigma range, in HR pixels, applied before downsampling.
    pub blur_sigma_range: (f32, f32),
    /// Max relative gain / absolute offset mismatch between the two cameras.
    pub color_jitter: f32,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            warp_bound: 3.0,
            warp_cells: 3,
            noise: NoiseSpec::default(),
            blur_sigma_range: (0.8, 2.4),
            color_jitter: 0.1,
        }
    }
}

impl PairConfig {
    /// No warp, no noise, no blur, no color mismatch.
    pub fn ideal() -> Self {
        Self {
            warp_bound: 0.0,
            warp_cells: 3,
            noise: NoiseSpec::disabled(),
            blur_sigma_range: (0.0, 0.0),
            color_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warp_bound >= 0.0) || !self.warp_bound.is_finite() {
            return Err(Error::Config(format!("warp_bound must be >= 0, got {}", self.warp_bound)));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config("blur sigma range must satisfy 0 <= lo <= hi".into()));
        }
        if !(0.0..0.5).contains(&self.color_jitter) {
            return Err(Error::Config("color_jitter must lie in [0, 0.5)".into()));
        }
        self.noise.validate()
    }
}

/// Everything drawn while generating one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationMeta {
    pub blur_sigma: f32,
    pub noise: NoiseDraw,
    pub warp_bound: f32,
    pub jitter_gain: [f32; 3],
    pub jitter_offset: [f32; 3],
    pub color: ColorAffine,
}

/// Resample `hr` on the center-crop lattice displaced by `warp`.
pub fn warp_center_crop(hr: &Image, ratio: usize, warp: &WarpField) -> Result<Image> {
    let (h, w) = hr.dims();
    let (ch, cw) = (h / ratio, w / ratio);
    if warp.dims() != (ch, cw) {
        return dim_err(format!("warp {:?} does not match crop {ch}x{cw}", warp.dims()));
    }
    let (top, left) = ((h - ch) / 2, (w - cw) / 2);
    Image::from_fn(ch, cw, |i, j, c| {
        let (dy, dx) = warp.at(i, j);
        if dy == 0.0 && dx == 0.0 {
            hr.get(top + i, left + j, c)
        } else {
            sample_bilinear(hr, (top + i) as f32 + dy, (left + j) as f32 + dx, c)
        }
    })
}

/// Simulate a short-focus / telephoto capture of `hr`.
///
/// Both views have `hr / ratio` pixels: the short-focus one sees the whole
/// scene at low resolution, the telephoto one sees the central `1 / ratio`
/// of it at full resolution, displaced by a smooth residual warp. The
/// short-focus view is blurred, color-shifted, noised and then color-matched
/// back to the telephoto on their overlap.
pub fn make_dualzoom_pair(hr: &Image, ratio: usize, cfg: &PairConfig, seed: u64) -> Result<DualZoomSample> {
    cfg.validate()?;
    if ratio < 2 {
        return Err(Error::Config(format!("ratio must be >= 2, got {ratio}")));
    }
    let (h, w) = hr.dims();
    let rr = ratio * ratio;
    if h % rr != 0 || w % rr != 0 {
        return dim_err(format!("hr {h}x{w} must be divisible by ratio^2 = {rr}"));
    }
    let mut r = rng::rng(rng::derive(seed, 0xDA1));
    let (slo, shi) = cfg.blur_sigma_range;
    let blur_sigma = if slo == shi { slo } else { r.random_range(slo..=shi) };
    let j = cfg.color_jitter;
    let jitter_gain: [f32; 3] = std::array::from_fn(|_| if j > 0.0 { 1.0 + r.random_range(-j..=j) } else { 1.0 });
    let jitter_offset: [f32; 3] =
        std::array::from_fn(|_| if j > 0.0 { r.random_range(-j..=j) * 0.5 } else { 0.0 });

    let warp = smooth_warp(h / ratio, w / ratio, cfg.warp_bound, cfg.warp_cells, rng::derive(seed, 0x3A8))?;
    let telephoto = warp_center_crop(hr, ratio, &warp)?.clamp01().quantize16();

    let low = area_downsample(&gaussian_blur(hr, blur_sigma), ratio)?;
    let (lh, lw) = low.dims();
    let jittered = Image::from_fn(lh, lw, |i, jj, c| low.get(i, jj, c) * jitter_gain[c] + jitter_offset[c])?.clamp01();
    let (noisy, _, noise) = inject_noise(&jittered, &cfg.noise, rng::derive(seed, 0x4015E))?;

    let color = if j > 0.0 {
        fit_color_affine(&center_crop(&noisy, ratio)?, &area_downsample(&telephoto, ratio)?)
    } else {
        ColorAffine::IDENTITY
    };
    let short_focus = color.apply(&noisy)?.clamp01().quantize16();
    let clean_short = color.apply(&jittered)?.clamp01().quantize16();

    Ok(DualZoomSample {
        short_focus,
        telephoto,
        clean_short,
        ratio,
        true_warp: warp,
        gen_seed: seed,
        meta: DegradationMeta {
            blur_sigma,
            noise,
            warp_bound: cfg.warp_bound,
            jitter_gain,
            jitter_offset,
            color,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_scene;

    #[test]
    fn ideal_pair_telephoto_is_exact_center_crop() {
        let hr = synthesize_scene(2, 64, 64).unwrap();
        let s = make_dualzoom_pair(&hr, 2, &PairConfig::ideal(), 3).unwrap();
        assert_eq!(s.telephoto, center_crop(&hr, 2).unwrap());
        assert_eq!(s.short_focus, area_downsample(&hr, 2).unwrap().quantize16());
        assert_eq!(s.short_focus.dims(), s.telephoto.dims());
    }

    #[test]
    fn geometry_contract_for_ratio_four() {
        let hr = synthesize_scene(2, 256, 256).unwrap();
        let s = make_dualzoom_pair(&hr, 4, &PairConfig::default(), 1).unwrap();
        assert_eq!(s.short_focus.dims(), (64, 64));
        assert_eq!(s.telephoto.dims(), (64, 64));
        assert_eq!(s.true_warp.dims(), (64, 64));
        assert!(s.true_warp.max_abs() <= 3.0);
    }

    #[test]
    fn deterministic_in_seed() {
        let hr = synthesize_scene(5, 64, 64).unwrap();
        let cfg = PairConfig::default();
        assert_eq!(make_dualzoom_pair(&hr, 2, &cfg, 9).unwrap(), make_dualzoom_pair(&hr, 2, &cfg, 9).unwrap());
        assert_ne!(make_dualzoom_pair(&hr, 2, &cfg, 9).unwrap(), make_dualzoom_pair(&hr, 2, &cfg, 10).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let hr = synthesize_scene(5, 48, 48).unwrap();
        let cfg = PairConfig {
            warp_bound: -1.0,
            ..PairConfig::default()
        };
        assert!(matches!(make_dualzoom_pair(&hr, 2, &cfg, 0), Err(Error::Config(_))));
        let odd = Image::filled(24, 24, 0.5).unwrap();
        assert!(matches!(make_dualzoom_pair(&odd, 4, &PairConfig::default(), 0), Err(Error::Dimension(_))));
    }
}
