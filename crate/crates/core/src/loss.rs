//! Softmax, cross-entropy and smooth-L1.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor applied inside the logarithm of the cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(Error::config("softmax of an empty score vector"));
    }
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(Error::numeric("non-finite scores in softmax"));
    }
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `-ln(max(probs[label], 1e-12))`.
pub fn cross_entropy_loss<T: Scalar>(probs: &[T], label: usize) -> Result<T> {
    let p = probs.get(label).copied().ok_or_else(|| {
        Error::input(format!(
            "label {label} out of range for {} classes",
            probs.len()
        ))
    })?;
    Ok(-(p.max(T::of(LOG_FLOOR))).ln())
}

/// Gradient of `cross_entropy(softmax(s))` with respect to the scores `s`:
/// `p - onehot(label)`.
pub fn softmax_cross_entropy_grad<T: Scalar>(probs: &[T], label: usize) -> Result<Vec<T>> {
    if label >= probs.len() {
        return Err(Error::input(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let mut g = probs.to_vec();
    g[label] -= T::one();
    Ok(g)
}

/// Huber loss with transition at 1: `0.5 x²` inside, `|x| - 0.5` outside.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::of(0.5) * x * x
    } else {
        a - T::of(0.5)
    }
}

pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let p = softmax(&[0.3f64; 4]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = softmax(&[1000.0f64, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(p[1] < 1e-300);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn matches_direct_formula() {
        let s = [1.0f64, 2.0, 3.0];
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        let p = softmax(&s).unwrap();
        for (a, v) in p.iter().zip(s) {
            assert!((a - v.exp() / z).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_softmax_is_config_error() {
        assert!(matches!(softmax::<f64>(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy_loss(&[0.0f64, 1.0, 0.0], 1).unwrap(), 0.0);
        let k = 5;
        let l = cross_entropy_loss(&vec![1.0 / k as f64; k], 2).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-12);
        let l = cross_entropy_loss(&[0.7f64, 0.3], 1).unwrap();
        assert!((l - 1.203_972_804_325_936).abs() < 1e-12);
        assert!(matches!(
            cross_entropy_loss(&[0.5f64, 0.5], 2),
            Err(Error::Input(_))
        ));
        // the floor keeps a zero probability finite
        assert!(
            (cross_entropy_loss(&[1.0f64, 0.0], 1).unwrap() - 27.631_021_115_928_547).abs() < 1e-9
        );
    }

    #[test]
    fn smooth_l1_pieces() {
        assert_eq!(smooth_l1(0.5f64), 0.125);
        assert_eq!(smooth_l1(-2.0f64), 1.5);
        assert_eq!(smooth_l1_grad(0.5f64), 0.5);
        assert_eq!(smooth_l1_grad(-2.0f64), -1.0);
    }
}
