//! PSNR / SSIM on RGB with optional region masks.

use crate::error::{dim_err, Result};
use crate::image::Image;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Full,
    /// Everything outside the centered `H/r x W/r` window.
    Corner { ratio: usize },
}

impl Region {
    pub fn mask(&self, height: usize, width: usize) -> Vec<bool> {
        match *self {
            Region::Full => vec![true; height * width],
            Region::Corner { ratio } => corner_mask(height, width, ratio),
        }
    }
}

/// `true` outside the centered `H/r x W/r` window.
pub fn corner_mask(height: usize, width: usize, ratio: usize) -> Vec<bool> {
    let (ch, cw) = (height / ratio.max(1), width / ratio.max(1));
    let (top, left) = ((height - ch) / 2, (width - cw) / 2);
    let mut m = vec![true; height * width];
    for i in top..top + ch {
        for j in left..left + cw {
            m[i * width + j] = false;
        }
    }
    m
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return dim_err(format!("metric inputs differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Mean squared error over the pixels where `mask` is set, all channels.
pub fn mse_masked(a: &Image, b: &Image, mask: &[bool]) -> Result<f64> {
    check_dims(a, b)?;
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for (p, &m) in mask.iter().enumerate() {
        if m {
            for c in 0..3 {
                let d = a.data()[p * 3 + c] as f64 - b.data()[p * 3 + c] as f64;
                acc += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return dim_err("empty metric mask");
    }
    Ok(acc / n as f64)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR with peak 1.0; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_region(a, b, Region::Full)
}

pub fn psnr_region(a: &Image, b: &Image, region: Region) -> Result<f64> {
    check_dims(a, b)?;
    let mask = region.mask(a.height(), a.width());
    Ok(psnr_from_mse(mse_masked(a, b, &mask)?))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    w
}

/// Separable Gaussian-weighted mean; the window is truncated at the image
/// border and renormalized so small images are supported.
fn local_mean(x: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &wk) in win.iter().enumerate() {
                    let off = k as isize - r;
                    let (ii, jj) = if horizontal { (i as isize, j as isize + off) } else { (i as isize + off, j as isize) };
                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                        continue;
                    }
                    acc += wk * src[ii as usize * w + jj as usize];
                    norm += wk;
                }
                out[i * w + j] = acc / norm;
            }
        }
        out
    };
    pass(&pass(x, true), false)
}

/// Per-pixel SSIM map averaged over channels.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    check_dims(a, b)?;
    let (h, w) = a.dims();
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut map = vec![0.0; h * w];
    for c in 0..3 {
        let x: Vec<f64> = a.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (local_mean(&x, h, w, &win), local_mean(&y, h, w, &win));
        let (exx, eyy, exy) = (local_mean(&xx, h, w, &win), local_mean(&yy, h, w, &win), local_mean(&xy, h, w, &win));
        for p in 0..h * w {
            let vx = exx[p] - mx[p] * mx[p];
            let vy = eyy[p] - my[p] * my[p];
            let cxy = exy[p] - mx[p] * my[p];
            let s = ((2.0 * mx[p] * my[p] + c1) * (2.0 * cxy + c2))
                / ((mx[p] * mx[p] + my[p] * my[p] + c1) * (vx + vy + c2));
            map[p] += s / 3.0;
        }
    }
    Ok(map)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_region(a, b, Region::Full)
}

pub fn ssim_region(a: &Image, b: &Image, region: Region) -> Result<f64> {
    if a == b {
        return Ok(1.0);
    }
    let map = ssim_map(a, b)?;
    let mask = region.mask(a.height(), a.width());
    let (mut acc, mut n) = (0.0, 0usize);
    for (v, m) in map.iter().zip(&mask) {
        if *m {
            acc += v;
            n += 1;
        }
    }
    if n == 0 {
        return dim_err("empty metric mask");
    }
    Ok(acc / n as f64)
}

/// Format a PSNR, printing `inf` for exact matches.
pub fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::from_fn(16, 16, |i, j, c| 0.1 + 0.7 * ((i * 3 + j * 5 + c) % 11) as f32 / 10.0).unwrap()
    }

    #[test]
    fn psnr_closed_form() {
        let a = ramp();
        let b = a.map(|v| v + 10.0 / 255.0).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0 * 25.5f64.log10()).abs() < 1e-3, "{p}");
        assert!((p - 28.131).abs() < 1e-3);
        assert_eq!(p, psnr(&b, &a).unwrap());
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(fmt_db(f64::INFINITY), "inf");
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let a = ramp();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let bin = Image::from_fn(16, 16, |i, j, _| ((i / 2 + j / 3) % 2) as f32).unwrap();
        let inv = bin.map(|v| 1.0 - v).unwrap();
        assert!(ssim(&bin, &inv).unwrap() < 0.0);
        let s = ssim(&a, &a.map(|v| v * 0.8).unwrap()).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn corner_mask_counts() {
        for (h, w, r) in [(64, 64, 2), (64, 48, 4), (96, 96, 4)] {
            let m = corner_mask(h, w, r);
            let kept = m.iter().filter(|&&v| v).count();
            assert_eq!(kept * r * r, h * w * (r * r - 1));
            assert!(m[0] && m[h * w - 1]);
            assert!(!m[(h / 2) * w + w / 2]);
        }
    }

    #[test]
    fn center_corruption_leaves_corner_exact() {
        let gt = ramp();
        let mut out = gt.clone();
        out.set(8, 8, 0, 0.0);
        assert!(psnr_region(&out, &gt, Region::Full).unwrap().is_finite());
        assert_eq!(psnr_region(&out, &gt, Region::Corner { ratio: 2 }).unwrap(), f64::INFINITY);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = ramp();
        let b = Image::filled(8, 8, 0.0).unwrap();
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }
}
