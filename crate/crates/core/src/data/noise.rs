//! Synthetic capture noise: Gaussian, JPEG round trip and
//! signal-dependent sensor noise, applied in a random order.

use std::fmt;
use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseStage {
    Gaussian,
    Jpeg,
    Sensor,
}

impl NoiseStage {
    pub fn tag(self) -> char {
        match self {
            NoiseStage::Gaussian => 'G',
            NoiseStage::Jpeg => 'J',
            NoiseStage::Sensor => 'S',
        }
    }

    pub fn from_tag(c: char) -> Option<Self> {
        match c {
            'G' => Some(NoiseStage::Gaussian),
            'J' => Some(NoiseStage::Jpeg),
            'S' => Some(NoiseStage::Sensor),
            _ => None,
        }
    }
}

/// Parameter ranges for each stage. A `None` stage is skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub gaussian_sigma_range: Option<(f32, f32)>,
    pub jpeg_quality_range: Option<(u8, u8)>,
    /// Variance `a * x + b`; ranges for `a` and `b`.
    pub sensor_noise: Option<((f32, f32), (f32, f32))>,
    pub order_seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            gaussian_sigma_range: Some((5.0 / 255.0, 30.0 / 255.0)),
            jpeg_quality_range: Some((60, 95)),
            sensor_noise: Some(((1e-4, 1e-3), (1e-6, 1e-5))),
            order_seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn disabled() -> Self {
        Self {
            gaussian_sigma_range: None,
            jpeg_quality_range: None,
            sensor_noise: None,
            order_seed: 0,
        }
    }

    pub fn gaussian_only(sigma: f32) -> Self {
        Self {
            gaussian_sigma_range: Some((sigma, sigma)),
            ..Self::disabled()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if let Some((lo, hi)) = self.gaussian_sigma_range {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad("gaussian sigma range must satisfy 0 <= lo <= hi");
            }
        }
        if let Some((lo, hi)) = self.jpeg_quality_range {
            if !(1 <= lo && lo <= hi && hi <= 100) {
                return bad("jpeg quality range must satisfy 1 <= lo <= hi <= 100");
            }
        }
        if let Some(((alo, ahi), (blo, bhi))) = self.sensor_noise {
            if !(0.0 <= alo && alo <= ahi && 0.0 <= blo && blo <= bhi && ahi.is_finite() && bhi.is_finite()) {
                return bad("sensor noise ranges must be nonnegative and ordered");
            }
        }
        Ok(())
    }
}

/// The concrete draws made by one `inject_noise` call.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NoiseDraw {
    pub order: Vec<NoiseStage>,
    pub sigma: f32,
    pub quality: u8,
    pub sensor_a: f32,
    pub sensor_b: f32,
}

impl fmt::Display for NoiseDraw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let order: String = self.order.iter().map(|s| s.tag()).collect();
        write!(
            f,
            "order={order} sigma={} quality={} a={} b={}",
            self.sigma, self.quality, self.sensor_a, self.sensor_b
        )
    }
}

fn uniform(r: &mut rng::Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..=hi)
    }
}

fn jpeg_round_trip(data: &mut [f32], h: usize, w: usize, quality: u8) -> Result<()> {
    let bytes: Vec<u8> = data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(&bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
    let decoded = image::load(Cursor::new(buf), image::ImageFormat::Jpeg)?.into_rgb8();
    for (d, &v) in data.iter_mut().zip(decoded.as_raw()) {
        *d = v as f32 / 255.0;
    }
    Ok(())
}

/// Apply the noise pipeline. Returns the clamped noisy image, the residual
/// `noisy - img`, and the draws. `img + residual == noisy` holds bitwise.
pub fn inject_noise(img: &Image, spec: &NoiseSpec, seed: u64) -> Result<(Image, Vec<f32>, NoiseDraw)> {
    spec.validate()?;
    let mut order_rng = rng::rng(rng::derive2(seed, 0x0DE5, spec.order_seed));
    let mut param_rng = rng::rng(rng::derive(seed, 0x9A7A));
    let mut noise_rng = rng::rng(rng::derive(seed, 0x7015E));

    let mut order = vec![NoiseStage::Gaussian, NoiseStage::Jpeg, NoiseStage::Sensor];
    order.shuffle(&mut order_rng);
    let mut draw = NoiseDraw {
        order: order.clone(),
        quality: 100,
        ..Default::default()
    };
    draw.sigma = spec.gaussian_sigma_range.map_or(0.0, |r| uniform(&mut param_rng, r));
    draw.quality = spec
        .jpeg_quality_range
        .map_or(100, |(lo, hi)| if lo == hi { lo } else { param_rng.random_range(lo..=hi) });
    if let Some((ar, br)) = spec.sensor_noise {
        draw.sensor_a = uniform(&mut param_rng, ar);
        draw.sensor_b = uniform(&mut param_rng, br);
    }

    let (h, w) = img.dims();
    let mut x = img.data().to_vec();
    for stage in &order {
        match stage {
            NoiseStage::Gaussian if draw.sigma > 0.0 => {
                for v in &mut x {
                    let n: f32 = StandardNormal.sample(&mut noise_rng);
                    *v += draw.sigma * n;
                }
            }
            NoiseStage::Jpeg if draw.quality < 100 => jpeg_round_trip(&mut x, h, w, draw.quality)?,
            NoiseStage::Sensor if draw.sensor_a > 0.0 || draw.sensor_b > 0.0 => {
                for v in &mut x {
                    let var = (draw.sensor_a * v.max(0.0) + draw.sensor_b).max(0.0);
                    let n: f32 = StandardNormal.sample(&mut noise_rng);
                    *v += var.sqrt() * n;
                }
            }
            _ => {}
        }
    }

    let mut residual = vec![0.0f32; x.len()];
    for ((n, r), &c) in x.iter_mut().zip(residual.iter_mut()).zip(img.data()) {
        let (nv, rv) = exact_residual(c, n.clamp(0.0, 1.0));
        *n = nv;
        *r = rv;
    }
    Ok((Image::new(h, w, x)?, residual, draw))
}

/// Nudge `noisy` until `clean + (noisy - clean) == noisy` in f32.
fn exact_residual(clean: f32, mut noisy: f32) -> (f32, f32) {
    for _ in 0..16 {
        let r = noisy - clean;
        let back = clean + r;
        if back == noisy {
            return (noisy, r);
        }
        noisy = back.clamp(0.0, 1.0);
    }
    // Falling back to the clean value always satisfies the identity.
    (clean, 0.0)
}
