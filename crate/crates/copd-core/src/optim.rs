//! Adam optimizer with bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;

/// Per-parameter first/second moment state plus the shared hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Defaults: beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one bias-corrected update in place. `params` and `grads` must be
    /// index-aligned; moment buffers are allocated on first use and must keep
    /// their shape afterwards.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CoreError::InvalidShape(format!(
                "adam got {} params and {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.values().len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(CoreError::InvalidShape(
                "adam state sized for a different parameter list".into(),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.values().len() != g.len() || self.first[i].len() != g.len() {
                return Err(CoreError::InvalidShape(format!(
                    "adam parameter {i}: {} values vs {} grads",
                    p.values().len(),
                    g.len()
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pv = p.values_mut();
            for j in 0..pv.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pv[j] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut adam = AdamState::new(0.001);
        adam.step(&mut [&mut p], &[vec![1.0]]).unwrap();
        // bias correction makes m_hat/sqrt(v_hat) ~ 1 on the first step
        assert!((p.values()[0] - (1.0 - 0.001)).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = Matrix::from_vec(2, 1, vec![0.5, -0.25]).unwrap();
        let before = p.values().to_vec();
        let mut adam = AdamState::new(0.01);
        adam.step(&mut [&mut p], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p.values(), before.as_slice());
    }

    #[test]
    fn trajectory_matches_independent_recurrence() {
        // Oracle: a second scalar implementation of the published Adam
        // recurrence, run on f(x) = x^2 from x = 1.
        let (lr, b1, b2, eps) = (0.001, 0.9, 0.999, 1e-8);
        let mut x_ref = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * x_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            x_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            reference.push(x_ref);
        }

        let mut p = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut adam = AdamState::new(lr);
        for r in &reference {
            let g = vec![2.0 * p.values()[0]];
            adam.step(&mut [&mut p], &[g]).unwrap();
            assert!((p.values()[0] - r).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let mut adam = AdamState::new(0.001);
        assert!(adam.step(&mut [&mut p], &[vec![1.0]]).is_err());
    }
}
