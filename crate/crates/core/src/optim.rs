//! AdamW with decoupled weight decay and an optional one-cycle schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine warm-up over the first 30% of steps from lr/25 to lr, then
    /// cosine annealing down to lr/1e4.
    OneCycle,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::OneCycle => {
                let total = total.max(1) as f64;
                let t = step as f64 / total;
                let (start, peak, end) = (base / 25.0, base, base / 25.0 / 1e4);
                let cos = |a: f64, b: f64, frac: f64| b + (a - b) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
                if t < 0.3 {
                    cos(start, peak, t / 0.3)
                } else {
                    cos(peak, end, ((t - 0.3) / 0.7).min(1.0))
                }
            }
        }
    }
}

/// Per-parameter moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
        }
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Ok(Self { config, step: 0, first: zeros.clone(), second: zeros })
    }

    /// One update with learning rate `lr`. Gradients are checked for
    /// finiteness before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::dim(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.len() != params.get(id).numel() {
                return Err(Error::dim(format!("gradient shape mismatch for {}", params.name(id))));
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} at index {bad}", params.name(id))));
            }
        }
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for j in 0..p.len() {
                let gj = grads[k][j];
                p[j] -= lr * c.weight_decay * p[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::vector(vec![v]));
        s
    }

    fn value(s: &ParamStore) -> f64 {
        s.get(s.by_name("p").unwrap()).item()
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = scalar_store(1.5);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = AdamWState::new(cfg, &s).unwrap();
        st.step(&mut s, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(value(&s), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(2.0);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = AdamWState::new(cfg, &s).unwrap();
        st.step(&mut s, &[vec![1.0]], 0.1).unwrap();
        // m̂ = v̂ = 1 after bias correction
        let expected = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((value(&s) - expected).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_scales_parameter() {
        let mut s = scalar_store(3.0);
        let cfg = AdamWConfig { weight_decay: 0.01, ..Default::default() };
        let mut st = AdamWState::new(cfg, &s).unwrap();
        st.step(&mut s, &[vec![0.0]], 0.1).unwrap();
        assert!((value(&s) - 3.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut st = AdamWState::new(AdamWConfig::default(), &s).unwrap();
        let err = st.step(&mut s, &[vec![f64::NAN]], 0.1).unwrap_err();
        assert!(err.to_string().contains("gradient of p"));
        assert_eq!(value(&s), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn step_counter_increases() {
        let mut s = scalar_store(1.0);
        let mut st = AdamWState::new(AdamWConfig::default(), &s).unwrap();
        for k in 1..=3 {
            st.step(&mut s, &[vec![0.5]], 1e-3).unwrap();
            assert_eq!(st.step, k);
        }
    }

    #[test]
    fn one_cycle_shape() {
        let s = LrSchedule::OneCycle;
        let base = 1e-3;
        assert!((s.lr_at(base, 0, 100) - base / 25.0).abs() < 1e-15);
        assert!((s.lr_at(base, 30, 100) - base).abs() < 1e-15);
        assert!(s.lr_at(base, 99, 100) < base / 100.0);
        assert_eq!(LrSchedule::Constant.lr_at(base, 50, 100), base);
    }
}
