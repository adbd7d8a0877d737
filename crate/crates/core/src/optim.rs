//! Plain SGD with a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::scalar::Scalar;

/// Optimisation settings shared by both streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub dropout_ratio: f64,
    pub batch_images: usize,
    pub rois_per_batch: usize,
    pub max_iterations: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            lr_decay_factor: 10.0,
            lr_decay_every: 2_000,
            dropout_ratio: 0.6,
            batch_images: 2,
            rois_per_batch: 256,
            max_iterations: 8_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The large-scale schedule: 200K iterations, decay by 10 every 50K.
    pub fn full_scale() -> Self {
        TrainConfig {
            lr_decay_every: 50_000,
            max_iterations: 200_000,
            ..Self::default()
        }
    }

    /// Schedule that trains the small backbone from scratch on the
    /// synthetic set in a few minutes.
    pub fn desk_scale() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            lr_decay_every: 2_000,
            max_iterations: 3_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.lr_decay_factor >= 1.0) {
            return Err(Error::config("lr_decay_factor must be >= 1"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::config("lr_decay_every must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return Err(Error::config("dropout_ratio must lie in [0,1)"));
        }
        if self.batch_images == 0 {
            return Err(Error::config("batch_images must be at least 1"));
        }
        if self.rois_per_batch == 0 {
            return Err(Error::config("rois_per_batch must be at least 1"));
        }
        Ok(())
    }

    /// `learning_rate / lr_decay_factor^floor(iteration / lr_decay_every)`.
    pub fn learning_rate_at(&self, iteration: u64) -> f64 {
        let steps = (iteration / self.lr_decay_every) as i32;
        self.learning_rate / self.lr_decay_factor.powi(steps)
    }
}

/// Applies `w -= lr(iteration) * grad` to every parameter set and zeroes the
/// gradients. Non-finite gradients abort the step: nothing is updated, the
/// gradients are cleared, and a numeric error is returned.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut LayerParams<T>],
    config: &TrainConfig,
    iteration: u64,
) -> Result<()> {
    if params.iter().any(|p| !p.grads_finite()) {
        params.iter_mut().for_each(|p| p.zero_grad());
        return Err(Error::numeric(format!(
            "non-finite gradient at iteration {iteration}"
        )));
    }
    let lr = T::of(config.learning_rate_at(iteration));
    for p in params.iter_mut() {
        let LayerParams {
            weights,
            biases,
            grad_weights,
            grad_biases,
        } = &mut **p;
        for (w, &g) in weights.data_mut().iter_mut().zip(grad_weights.data()) {
            *w -= lr * g;
        }
        for (b, &g) in biases.data_mut().iter_mut().zip(grad_biases.data()) {
            *b -= lr * g;
        }
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f64, g: f64) -> LayerParams<f64> {
        let mut p = LayerParams::new(
            Tensor::vector(&[w]).unwrap().reshape(&[1, 1]).unwrap(),
            Tensor::zeros(&[1]),
        );
        p.grad_weights.data_mut()[0] = g;
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.75, 0.0);
        let cfg = TrainConfig::default();
        sgd_step(&mut [&mut p], &cfg, 3).unwrap();
        assert_eq!(p.weights.data(), &[0.75]);
    }

    #[test]
    fn direct_substitution() {
        let mut p = single(1.0, 1.0);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        sgd_step(&mut [&mut p], &cfg, 0).unwrap();
        assert!((p.weights.data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(p.grad_weights.data(), &[0.0]);
    }

    #[test]
    fn full_scale_schedule_divides_by_ten_every_50k() {
        let cfg = TrainConfig::full_scale();
        assert_eq!(cfg.learning_rate, 1e-4);
        assert!((cfg.learning_rate_at(100_000) - 1e-6).abs() < 1e-20);
        assert_eq!(cfg.learning_rate_at(49_999), 1e-4);
        assert!((cfg.learning_rate_at(50_000) - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = single(1.0, f64::NAN);
        let mut q = single(2.0, 1.0);
        let err = sgd_step(&mut [&mut q, &mut p], &TrainConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(q.weights.data(), &[2.0]);
        assert_eq!(p.weights.data(), &[1.0]);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            dropout_ratio: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
