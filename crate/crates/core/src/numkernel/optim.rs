use serde::{Deserialize, Serialize};

use super::layers::Parameter;
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Plain SGD with a single step decay of the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    /// Multiplies `lr` once `epoch >= decay_epoch`.
    pub decay_factor: f64,
    pub decay_epoch: usize,
    #[serde(default)]
    pub momentum: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    /// One update `value ← value − lr(epoch)·grad` (with optional heavy-ball momentum).
    /// Nothing is written if any gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut Parameter>, epoch: usize) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::TrainingDiverged(format!(
                "non-finite gradient in {}",
                p.name
            )));
        }
        let lr = self.config.learning_rate(epoch);
        let momentum = self.config.momentum;
        if momentum == 0.0 {
            for p in params {
                for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *v -= lr * g;
                }
            }
            return Ok(());
        }
        if self.velocity.len() != params.len() {
            self.velocity = params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect();
        }
        for (p, vel) in params.into_iter().zip(&mut self.velocity) {
            for ((v, g), m) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(vel.data_mut())
            {
                *m = momentum * *m + g;
                *v -= lr * *m;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            decay_factor: 0.1,
            decay_epoch: 30,
            momentum: 0.0,
        }
    }

    #[test]
    fn zero_grad_is_identity() {
        let mut p = Parameter::new("w", Matrix::row_vector(&[1.5, -2.0]));
        let before = p.value.clone();
        Sgd::new(cfg(0.1)).unwrap().step(vec![&mut p], 0).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn hand_step_and_decay() {
        let mut p = Parameter::new("w", Matrix::row_vector(&[1.0]));
        p.grad = Matrix::row_vector(&[1.0]);
        let mut sgd = Sgd::new(cfg(0.1)).unwrap();
        sgd.step(vec![&mut p], 0).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-15);
        sgd.step(vec![&mut p], 30).unwrap();
        assert!((p.value.data()[0] - 0.89).abs() < 1e-15);
        assert!((cfg(0.1).learning_rate(30) * 10.0 - cfg(0.1).learning_rate(29)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_diverges() {
        let mut p = Parameter::new("w", Matrix::row_vector(&[1.0]));
        p.grad = Matrix::row_vector(&[f64::NAN]);
        let err = Sgd::new(cfg(0.1)).unwrap().step(vec![&mut p], 0).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged(_)));
        assert_eq!(p.value.data(), &[1.0]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(cfg(0.0).validate().is_err());
        assert!(SgdConfig { decay_factor: 0.0, ..cfg(0.1) }.validate().is_err());
        assert!(SgdConfig { decay_factor: 1.5, ..cfg(0.1) }.validate().is_err());
    }
}
