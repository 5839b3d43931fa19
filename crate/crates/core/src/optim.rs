//! Adam with bias correction, plus global-norm gradient clipping.

use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state with zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one Adam update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(dim_err!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(dim_err!(
                    "adam: parameter {i} shape {:?}, gradient {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    self.first[i].shape()
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= learning_rate * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total = libm::sqrt(
        grads
            .iter()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum(),
    );
    if total > max_norm && total > 0.0 {
        let factor = max_norm / total;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_params(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_params(1.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(cfg, &p);
        st.step(&mut p, &scalar_params(1.0)).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::vector(vec![0.5, -2.0]).unwrap()];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let g = vec![Tensor::zeros(&[2])];
        st.step(&mut p, &g).unwrap();
        st.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[0.5, -2.0]);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let (lr, b1, b2, eps, g) = (0.05, 0.9, 0.999, 1e-8, 0.3);
        let mut p = scalar_params(2.0);
        let cfg = AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        let mut st = AdamState::new(cfg, &p);
        for _ in 0..2 {
            st.step(&mut p, &scalar_params(g)).unwrap();
        }
        // Hand recurrence for a constant gradient.
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p[0].data()[0] - x).abs() <= 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_params(1.0);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(st.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0]).unwrap()];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g[0].norm() - 1.0).abs() < 1e-12);
    }
}
