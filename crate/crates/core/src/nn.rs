//! Small layer helpers shared by the networks.

use std::sync::atomic::{AtomicUsize, Ordering};

use dzsr_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;

use crate::rng::Rng;

pub const LRELU_SLOPE: f32 = 0.2;

pub fn lrelu(g: &mut Graph, x: Var) -> Var {
    g.leaky_relu(x, LRELU_SLOPE)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-uniform for leaky ReLU, scaled by the factor.
    He(f32),
    Zero,
    Uniform(f32),
}

pub fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut Rng) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::Uniform(a) => Tensor::from_fn(shape, |_| rng.random_range(-a..=a)),
        Init::He(gain) => {
            let std = (2.0 / ((1.0 + LRELU_SLOPE * LRELU_SLOPE) * fan_in as f32)).sqrt() * gain;
            let bound = std * 3f32.sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
        }
    }
}

/// Square convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(&[cout, cin, k, k], cin * k * k, init, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self {
            w,
            b: Some(b),
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn same(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, init: Init, rng: &mut Rng) -> Self {
        Self::new(store, name, cin, cout, k, 1, init, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Forward with parameters treated as constants.
    pub fn forward_frozen(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.frozen_param(store, self.w);
        let b = self.b.map(|b| g.frozen_param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[0]
    }
}

/// Counts evaluations of a sub-network.
#[derive(Debug, Default)]
pub struct CallProbe(AtomicUsize);

impl CallProbe {
    pub fn hit(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for CallProbe {
    fn clone(&self) -> Self {
        Self(AtomicUsize::new(self.count()))
    }
}

/// `[C, H, W] -> [C * r^2, H / r, W / r]`; element `(c, i, j)` lands at
/// `(c * r^2 + (i % r) * r + j % r, i / r, j / r)`.
pub fn inverse_pixel_shuffle_index(c: usize, h: usize, w: usize, r: usize) -> Vec<u32> {
    let (ho, wo) = (h / r, w / r);
    let mut idx = vec![0u32; c * h * w];
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let co = ci * r * r + (i % r) * r + j % r;
                idx[(co * ho + i / r) * wo + j / r] = ((ci * h + i) * w + j) as u32;
            }
        }
    }
    idx
}

/// Inverse of [`inverse_pixel_shuffle_index`]: `[C * r^2, H, W] -> [C, H * r, W * r]`.
pub fn pixel_shuffle_index(c_out: usize, h: usize, w: usize, r: usize) -> Vec<u32> {
    let (ho, wo) = (h * r, w * r);
    let mut idx = vec![0u32; c_out * ho * wo];
    for ci in 0..c_out {
        for i in 0..ho {
            for j in 0..wo {
                let src_c = ci * r * r + (i % r) * r + j % r;
                idx[(ci * ho + i) * wo + j] = ((src_c * h + i / r) * w + j / r) as u32;
            }
        }
    }
    idx
}

pub fn pixel_shuffle(g: &mut Graph, x: Var, r: usize) -> Var {
    let (c, h, w) = g.value(x).dims3();
    assert_eq!(c % (r * r), 0, "pixel shuffle needs channels divisible by r^2");
    let co = c / (r * r);
    let idx = pixel_shuffle_index(co, h, w, r);
    g.gather(x, &[co, h * r, w * r], idx)
}

pub fn inverse_pixel_shuffle(g: &mut Graph, x: Var, r: usize) -> Var {
    let (c, h, w) = g.value(x).dims3();
    assert!(h % r == 0 && w % r == 0, "inverse pixel shuffle needs dims divisible by r");
    let idx = inverse_pixel_shuffle_index(c, h, w, r);
    g.gather(x, &[c * r * r, h / r, w / r], idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_init_is_bounded_and_zero_init_is_zero() {
        let mut r = crate::rng::rng(0);
        let t = init_tensor(&[8, 4, 3, 3], 36, Init::He(1.0), &mut r);
        let bound = (2.0 / (1.04 * 36.0f32)).sqrt() * 3f32.sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(init_tensor(&[3], 1, Init::Zero, &mut r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probe_counts_and_clones() {
        let p = CallProbe::default();
        p.hit();
        p.hit();
        assert_eq!(p.clone().count(), 2);
        p.reset();
        assert_eq!(p.count(), 0);
    }
}
