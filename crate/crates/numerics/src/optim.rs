//! AdamW with decoupled weight decay and a warmup-cosine learning-rate schedule.

use crate::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Optimizer state, one moment pair per parameter of the store it was built for.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
    decay: Vec<bool>,
}

impl AdamW {
    /// Weight decay applies to parameters with two or more axes; biases and
    /// norm affines are exempt.
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        let v = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        let decay = store.iter().map(|(_, p)| p.value.ndim() >= 2).collect();
        Self { cfg, step: 0, m, v, decay }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` using the gradients in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: Real) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let wd = if self.decay[i] { c.weight_decay } else { 0.0 };
            let grad = p.grad.as_ref().map(|g| g.data());
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[j]);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + wd * *w);
            }
        }
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then cosine decay to 0 at `total`.
pub fn warmup_cosine(step: usize, warmup: usize, total: usize, base_lr: Real) -> Real {
    if step < warmup {
        return base_lr * step as Real / warmup as Real;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as Real / span as Real).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI as Real * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(warmup_cosine(0, 20, 100, 1.5e-4), 0.0);
        assert_eq!(warmup_cosine(20, 20, 100, 1.5e-4), 1.5e-4);
        assert!(warmup_cosine(100, 20, 100, 1.5e-4).abs() < 1e-18);
        assert!(warmup_cosine(10, 20, 100, 1.5e-4) < warmup_cosine(15, 20, 100, 1.5e-4));
        assert!(warmup_cosine(40, 20, 100, 1.5e-4) > warmup_cosine(80, 20, 100, 1.5e-4));
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // With bias correction the first Adam step is lr·sign(g) (plus decay).
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        store.get_mut(id).grad = Some(Tensor::new(vec![1, 3], vec![0.3, -5.0, 0.0]).unwrap());
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut store, 0.1);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - -1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn decay_skips_vectors() {
        let mut store = ParamStore::new();
        let b = store.add("b", Tensor::full(&[2], 1.0)).unwrap();
        let w = store.add("w", Tensor::full(&[1, 2], 1.0)).unwrap();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.step(&mut store, 0.1);
        assert_eq!(store.value(b).data(), &[1.0, 1.0]);
        assert!((store.value(w).data()[0] - (1.0 - 0.1 * 0.05)).abs() < 1e-12);
    }
}
