use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam moments for one flat parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Fails with a numeric error if any value is NaN or infinite.
pub fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!(
            "non-finite {what} at index {i}: {}",
            values[i]
        ))),
        None => Ok(()),
    }
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One bias-corrected Adam update. A non-finite gradient rejects the
    /// whole step and leaves both parameters and moments untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.len() {
            return Err(Error::shape(self.len(), params.len(), "adam params"));
        }
        if grads.len() != self.len() {
            return Err(Error::shape(self.len(), grads.len(), "adam grads"));
        }
        check_finite(grads, "gradient")?;

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(
            self.first_moment
                .iter_mut()
                .zip(self.second_moment.iter_mut()),
        ) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            s.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = AdamState::new(3, AdamConfig::default());
        let mut p = vec![0.0; 3];
        s.step(&mut p, &[3.0, -0.2, 50.0]).unwrap();
        for (x, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - sign * 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn two_step_trajectory() {
        // Hand-rolled: m1 = 0.1, v1 = 0.001, m2 = 0.19, v2 = 0.001999
        let (b1, b2, lr, eps): (f64, f64, f64, f64) = (0.9, 0.999, 1e-3, 1e-8);
        let mut expected = 0.0;
        let (m1, v1) = (0.1, 0.001);
        expected -= lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let (m2, v2) = (0.19, 0.001999);
        expected -= lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);

        let mut s = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        s.step(&mut p, &[1.0, 1.0]).unwrap();
        s.step(&mut p, &[1.0, 1.0]).unwrap();
        for x in p {
            assert!((x - expected).abs() < 1e-15, "{x} vs {expected}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut s = AdamState::new(2, AdamConfig::default());
        let mut p = vec![1.0, 2.0];
        let err = s.step(&mut p, &[0.1, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(2, AdamConfig::default());
        assert!(matches!(
            s.step(&mut [0.0; 3], &[0.0; 3]),
            Err(Error::Shape(_))
        ));
    }
}
