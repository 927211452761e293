//! RGB float rasters and the resampling primitives used throughout.

use std::path::Path;

use dzsr_autograd::Tensor;
use image::{ImageBuffer, Rgb};

use crate::error::{dim_err, Error, Result};

pub const MIN_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ColorSpace {
    #[default]
    LinearRgb,
}

/// `H x W x 3` raster, interleaved, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
    colorspace: ColorSpace,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return dim_err(format!("image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"));
        }
        if data.len() != height * width * 3 {
            return dim_err(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pixel value {v}")));
        }
        Ok(Self {
            height,
            width,
            data,
            colorspace: ColorSpace::LinearRgb,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height {
            for j in 0..width {
                for c in 0..3 {
                    data.push(f(i, j, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f32 {
        self.data[(i * self.width + j) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f32) {
        self.data[(i * self.width + j) * 3 + c] = v;
    }

    /// Build from a `[3, H, W]` tensor without clamping.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3();
        if c != 3 {
            return dim_err(format!("expected 3 channels, got {c}"));
        }
        let d = t.data();
        Self::from_fn(h, w, |i, j, ch| d[(ch * h + i) * w + j])
    }

    /// Planar `[3, H, W]` copy.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = self.dims();
        let mut out = vec![0.0; 3 * h * w];
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    out[(c * h + i) * w + j] = self.get(i, j, c);
                }
            }
        }
        Tensor::new(&[3, h, w], out)
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return dim_err(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            ));
        }
        Self::from_fn(height, width, |i, j, c| self.get(top + i, left + j, c))
    }

    /// Snap every value to the 16-bit grid `k / 65535` used by the PNG store.
    pub fn quantize16(&self) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = quantize16(*v);
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = self.dims();
        Self::from_fn(h, w, |i, j, c| self.get(i, w - 1 - j, c)).expect("same dims")
    }

    pub fn flip_vertical(&self) -> Self {
        let (h, w) = self.dims();
        Self::from_fn(h, w, |i, j, c| self.get(h - 1 - i, j, c)).expect("same dims")
    }

    pub fn transpose(&self) -> Self {
        let (h, w) = self.dims();
        Self::from_fn(w, h, |i, j, c| self.get(j, i, c)).expect("same dims")
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        self.data.iter().skip(c).step_by(3).map(|&v| v as f64).sum::<f64>() / (self.height * self.width) as f64
    }

    pub fn std_dev(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        (self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dims();
        let raw: Vec<u16> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size matches dims");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Load any PNG; 8-bit files are widened to the 16-bit grid.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb16();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
        Self::new(h as usize, w as usize, data)
    }
}

#[inline]
pub fn quantize16(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

/// Mean over `r x r` blocks.
pub fn area_downsample(img: &Image, r: usize) -> Result<Image> {
    let (h, w) = img.dims();
    if r == 0 || h % r != 0 || w % r != 0 {
        return dim_err(format!("{h}x{w} is not divisible by {r}"));
    }
    let inv = 1.0 / (r * r) as f32;
    Image::from_fn(h / r, w / r, |i, j, c| {
        let mut acc = 0.0f32;
        for di in 0..r {
            for dj in 0..r {
                acc += img.get(i * r + di, j * r + dj, c);
            }
        }
        acc * inv
    })
}

fn cubic_weight(x: f32) -> f32 {
    const A: f32 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Separable bicubic resize (Keys, a = -0.5) with pixel-centre alignment
/// and replicated borders. Output is not clamped.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let (h, w) = img.dims();
    let taps = |n_in: usize, n_out: usize| -> Vec<[(usize, f32); 4]> {
        let scale = n_in as f32 / n_out as f32;
        (0..n_out)
            .map(|o| {
                let src = (o as f32 + 0.5) * scale - 0.5;
                let base = src.floor();
                let t = src - base;
                let mut out = [(0usize, 0.0f32); 4];
                for (k, slot) in out.iter_mut().enumerate() {
                    let idx = (base as isize + k as isize - 1).clamp(0, n_in as isize - 1) as usize;
                    *slot = (idx, cubic_weight(t - (k as f32 - 1.0)));
                }
                out
            })
            .collect()
    };
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let mut tmp = vec![0.0f32; h * out_w * 3];
    for i in 0..h {
        for (j, tj) in cols.iter().enumerate() {
            for c in 0..3 {
                tmp[(i * out_w + j) * 3 + c] = tj.iter().map(|&(s, wt)| wt * img.get(i, s, c)).sum();
            }
        }
    }
    Image::from_fn(out_h, out_w, |i, j, c| {
        rows[i].iter().map(|&(s, wt)| wt * tmp[(s * out_w + j) * 3 + c]).sum()
    })
}

pub fn bicubic_upsample(img: &Image, r: usize) -> Result<Image> {
    bicubic_resize(img, img.height() * r, img.width() * r)
}

pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|x| (-(x * x) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with replicated borders; `sigma <= 0` copies.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dims();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w * 3];
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, &wt) in k.iter().enumerate() {
                    acc += wt * img.get(i, clampi(j as isize + t as isize - r, w), c);
                }
                tmp[(i * w + j) * 3 + c] = acc;
            }
        }
    }
    Image::from_fn(h, w, |i, j, c| {
        let mut acc = 0.0;
        for (t, &wt) in k.iter().enumerate() {
            acc += wt * tmp[(clampi(i as isize + t as isize - r, h) * w + j) * 3 + c];
        }
        acc
    })
    .expect("same dims")
}

/// Bilinear read at fractional `(y, x)` with replicated borders.
pub fn sample_bilinear(img: &Image, y: f32, x: f32, c: usize) -> f32 {
    let (h, w) = img.dims();
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = y - y0 as f32;
    let lx = x - x0 as f32;
    (1.0 - ly) * (1.0 - lx) * img.get(y0, x0, c)
        + (1.0 - ly) * lx * img.get(y0, x1, c)
        + ly * (1.0 - lx) * img.get(y1, x0, c)
        + ly * lx * img.get(y1, x1, c)
}
