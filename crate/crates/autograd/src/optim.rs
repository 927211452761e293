use crate::{GradBuffer, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. The learning rate is passed per step so
/// schedules stay outside the optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Update every parameter whose `frozen` flag is false.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f32, frozen: &dyn Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if frozen(store.name(id)) {
                continue;
            }
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let x = store.get(id).data().to_vec();
            let mut g = GradBuffer::zeros_like(&store);
            g.add(id, &Tensor::new(&[2], vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)]));
            adam.step(&mut store, &g, 0.01, &|_| false);
        }
        let x = store.get(id).data();
        assert!((x[0] - 1.0).abs() < 1e-2 && (x[1] + 0.5).abs() < 1e-2, "{x:?}");
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(&[1], vec![0.0]));
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut g = GradBuffer::zeros_like(&store);
        g.add(id, &Tensor::scalar(5.0));
        adam.step(&mut store, &g, 0.1, &|_| false);
        assert!((store.get(id).item() + 0.1).abs() < 1e-6);
    }
}
