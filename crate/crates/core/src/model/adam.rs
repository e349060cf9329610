//! Adam optimizer over flat parameter slices.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// Optimizer state: first/second moment buffers for a fixed group of
/// tensors. The group's shapes are locked in on the first step; later steps
/// must pass the same tensors in the same order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update applied in place.
    ///
    /// `params` and `grads` are parallel slices of flattened tensors.
    /// Non-finite gradient entries are rejected rather than silently
    /// corrupting the moments.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::Shape(
                "optimizer was initialized with a different tensor group".into(),
            ));
        }
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.m.iter().zip(&self.v))
        {
            if p.len() != g.len() || p.len() != m.len() || v.len() != m.len() {
                return Err(Error::Shape(
                    "parameter/gradient tensor sizes changed between steps".into(),
                ));
            }
        }
        for g in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("non-finite gradient entry".into()));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(cfg);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![10.0, -0.3, 0.0001];
        let before = p.clone();
        {
            let mut refs: Vec<&mut [f64]> = vec![p.as_mut_slice()];
            st.step(&mut refs, &[g.as_slice()]).unwrap();
        }
        for i in 0..3 {
            let delta = p[i] - before[i];
            // m_hat / (sqrt(v_hat) + eps) == g / (|g| + eps) on step one.
            let expected = -cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!(
                (delta - expected).abs() < 1e-12,
                "coordinate {i}: {delta} vs {expected}"
            );
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut st = AdamState::new(AdamConfig::default());
        let mut p = vec![0.25, -0.75];
        let g = vec![0.0, 0.0];
        let before = p.clone();
        let mut refs: Vec<&mut [f64]> = vec![p.as_mut_slice()];
        st.step(&mut refs, &[g.as_slice()]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.steps_taken(), 1);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut st = AdamState::new(AdamConfig::default());
        let mut p = vec![0.0];
        let g = vec![f64::NAN];
        let mut refs: Vec<&mut [f64]> = vec![p.as_mut_slice()];
        assert!(st.step(&mut refs, &[g.as_slice()]).is_err());
    }

    #[test]
    fn rejects_shape_changes_between_steps() {
        let mut st = AdamState::new(AdamConfig::default());
        let mut p = vec![0.0, 1.0];
        let g = vec![0.1, 0.1];
        let mut refs: Vec<&mut [f64]> = vec![p.as_mut_slice()];
        st.step(&mut refs, &[g.as_slice()]).unwrap();
        let mut shorter = vec![0.0];
        let mut refs: Vec<&mut [f64]> = vec![shorter.as_mut_slice()];
        assert!(st.step(&mut refs, &[&g[..1]]).is_err());
    }
}
