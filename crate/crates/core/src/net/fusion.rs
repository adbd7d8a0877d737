//! Region-score fusion, box regression targets and the multi-task loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{cross_entropy_loss, smooth_l1, softmax};
use crate::region::BoundingBox;
use crate::scalar::Scalar;

/// Fusion weights and the regression loss weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub w_primary: f64,
    pub w_secondary: f64,
    pub w_rgb: f64,
    pub w_flow: f64,
    pub alpha: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            w_primary: 0.6,
            w_secondary: 0.4,
            w_rgb: 0.4,
            w_flow: 0.6,
            alpha: 0.3,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |a: f64, b: f64| a >= 0.0 && b >= 0.0 && (a + b - 1.0).abs() < 1e-12;
        if !unit(self.w_primary, self.w_secondary) {
            return Err(Error::config("w_primary + w_secondary must equal 1"));
        }
        if !unit(self.w_rgb, self.w_flow) {
            return Err(Error::config("w_rgb + w_flow must equal 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha must be non-negative"));
        }
        Ok(())
    }

    /// Sets `w_primary` and its complement.
    pub fn with_primary_weight(mut self, w: f64) -> Self {
        self.w_primary = w;
        self.w_secondary = 1.0 - w;
        self
    }

    /// Sets `w_rgb` and its complement.
    pub fn with_rgb_weight(mut self, w: f64) -> Self {
        self.w_rgb = w;
        self.w_flow = 1.0 - w;
        self
    }
}

/// Per-class max over the secondary rows fused with the primary scores:
/// `fused[k] = w_p·primary[k] + w_s·max_n secondary[n][k]`. Also returns the
/// winning row per class (first on ties).
pub fn fuse_region_scores<T: Scalar>(
    primary: &[T],
    secondary: &[Vec<T>],
    cfg: &FusionConfig,
) -> Result<(Vec<T>, Vec<usize>)> {
    if secondary.is_empty() {
        return Err(Error::Invariant("no secondary regions to fuse".to_string()));
    }
    let k = primary.len();
    if secondary.iter().any(|row| row.len() != k) {
        return Err(Error::config("secondary score rows differ in length"));
    }
    let (wp, ws) = (T::of(cfg.w_primary), T::of(cfg.w_secondary));
    let mut fused = Vec::with_capacity(k);
    let mut winners = Vec::with_capacity(k);
    for c in 0..k {
        let mut best = 0;
        for (n, row) in secondary.iter().enumerate().skip(1) {
            if row[c] > secondary[best][c] {
                best = n;
            }
        }
        fused.push(wp * primary[c] + ws * secondary[best][c]);
        winners.push(best);
    }
    Ok((fused, winners))
}

/// Center/log-extent regression targets from `primary` toward `truth`.
pub fn regression_targets<T: Scalar>(primary: &BoundingBox, truth: &BoundingBox) -> [T; 4] {
    let (px, py) = primary.center();
    let (gx, gy) = truth.center();
    let (pw, ph) = (primary.width() as f64, primary.height() as f64);
    let (gw, gh) = (truth.width() as f64, truth.height() as f64);
    [
        T::of((gx - px) / pw),
        T::of((gy - py) / ph),
        T::of((gw / pw).ln()),
        T::of((gh / ph).ln()),
    ]
}

/// `total = cls + alpha·reg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn new(cls: f64, reg: f64, alpha: f64) -> Self {
        LossBreakdown {
            total: cls + alpha * reg,
            cls,
            reg,
            alpha,
        }
    }

    /// Re-derives the total on the same rounding path.
    pub fn is_consistent(&self) -> bool {
        self.total == self.cls + self.alpha * self.reg
    }
}

/// Cross-entropy of the softmaxed fused scores plus `alpha` times the summed
/// smooth-L1 error of the box deltas.
pub fn multi_task_loss<T: Scalar>(
    fused_scores: &[T],
    label: usize,
    bbox_deltas: &[T],
    targets: &[T],
    cfg: &FusionConfig,
) -> Result<LossBreakdown> {
    if fused_scores
        .iter()
        .chain(bbox_deltas)
        .chain(targets)
        .any(|v| !v.is_finite())
    {
        return Err(Error::numeric("non-finite input to the loss"));
    }
    if bbox_deltas.len() != targets.len() {
        return Err(Error::config("delta/target length mismatch"));
    }
    let probs = softmax(fused_scores)?;
    let cls = cross_entropy_loss(&probs, label)?.as_f64();
    let reg: T = bbox_deltas
        .iter()
        .zip(targets)
        .map(|(&d, &t)| smooth_l1(d - t))
        .sum();
    Ok(LossBreakdown::new(cls, reg.as_f64(), cfg.alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuse_example() {
        let (fused, win) =
            fuse_region_scores(&[1.0f64, 0.0], &[vec![0.0, 1.0]], &FusionConfig::default())
                .unwrap();
        assert!((fused[0] - 0.6).abs() < 1e-15 && (fused[1] - 0.4).abs() < 1e-15);
        assert_eq!(win, vec![0, 0]);
    }

    #[test]
    fn identical_rows_and_tie_breaking() {
        let row = vec![0.3f64, -0.2, 0.9];
        let cfg = FusionConfig::default().with_primary_weight(0.0);
        let (fused, win) =
            fuse_region_scores(&[0.0; 3], &[row.clone(), row.clone(), row.clone()], &cfg).unwrap();
        assert_eq!(fused, row);
        assert_eq!(win, vec![0, 0, 0]);
    }

    #[test]
    fn per_class_winners() {
        let sec = vec![vec![1.0f64, 0.0], vec![0.0, 2.0]];
        let (_, win) = fuse_region_scores(&[0.0, 0.0], &sec, &FusionConfig::default()).unwrap();
        assert_eq!(win, vec![0, 1]);
    }

    #[test]
    fn no_secondary_is_invariant_violation() {
        assert!(matches!(
            fuse_region_scores::<f64>(&[0.0], &[], &FusionConfig::default()),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn regression_target_constructions() {
        let p = BoundingBox::new(10, 10, 20, 30).unwrap();
        assert_eq!(regression_targets::<f64>(&p, &p), [0.0; 4]);
        let right = p.translate(10, 0);
        assert_eq!(regression_targets::<f64>(&p, &right), [1.0, 0.0, 0.0, 0.0]);
        let wide = BoundingBox::new(5, 10, 25, 30).unwrap();
        let t = regression_targets::<f64>(&p, &wide);
        assert_eq!(t[0], 0.0);
        assert!((t[2] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_ledger() {
        let l = LossBreakdown::new(2.0, 1.0, 0.3);
        assert!((l.total - 2.3).abs() < 1e-15);
        assert!(l.is_consistent());

        let cfg = FusionConfig::default();
        let scores = [0.2f64, 1.0, -0.5];
        let same = multi_task_loss(&scores, 1, &[0.1; 4], &[0.1; 4], &cfg).unwrap();
        assert_eq!(same.reg, 0.0);
        assert_eq!(same.total, same.cls);

        let off = multi_task_loss(&scores, 1, &[0.5, 0.0, 0.0, 0.0], &[0.0; 4], &cfg).unwrap();
        assert_eq!(off.reg, 0.125);
        assert!(off.is_consistent());

        assert!(matches!(
            multi_task_loss(&[f64::NAN, 0.0], 0, &[0.0; 4], &[0.0; 4], &cfg),
            Err(Error::Numeric(_))
        ));
    }
}
