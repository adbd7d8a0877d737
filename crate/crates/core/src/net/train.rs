//! Training step and inference on a single frame.

use crate::error::{Error, Result};
use crate::loss::{
    cross_entropy_loss, smooth_l1, smooth_l1_grad, softmax, softmax_cross_entropy_grad,
};
use crate::optim::{sgd_step, TrainConfig};
use crate::region::{BoundingBox, RegionAnnotation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::WmrRng;

use super::{
    fuse_region_scores, multi_task_loss, regression_targets, DropoutPlan, FrameForward,
    FusionConfig, LossBreakdown, WmrModel,
};

/// Which loss terms drive the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerms {
    /// Classification plus `alpha`-weighted box regression.
    Full,
    /// Classification only; the regression head is neither run nor updated.
    ClassificationOnly,
}

/// One training image: network input, regions, label and ground-truth box.
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a, T> {
    pub input: &'a Tensor<T>,
    pub annotation: &'a RegionAnnotation,
    pub label: usize,
    pub truth: BoundingBox,
}

/// Fused class scores and the winning secondary row per class. Without a
/// secondary path the fused scores are the primary scores.
fn fused_scores<T: Scalar>(
    model: &WmrModel<T>,
    fwd: &FrameForward<T>,
    fusion: &FusionConfig,
) -> Result<(Vec<T>, Option<Vec<usize>>)> {
    if model.secondary.is_none() {
        return Ok((fwd.primary_scores.clone(), None));
    }
    let (fused, winners) = fuse_region_scores(&fwd.primary_scores, &fwd.secondary_scores, fusion)?;
    Ok((fused, Some(winners)))
}

/// Forward and backward over the batch followed by one SGD update. Losses
/// and gradients are averaged over the batch images.
pub fn train_step<T: Scalar>(
    model: &mut WmrModel<T>,
    batch: &[TrainSample<'_, T>],
    train: &TrainConfig,
    fusion: &FusionConfig,
    terms: LossTerms,
    iteration: u64,
    rng: &mut WmrRng,
) -> Result<LossBreakdown> {
    if batch.is_empty() || batch.len() > train.batch_images {
        return Err(Error::config(format!(
            "batch holds {} images, allowed 1..={}",
            batch.len(),
            train.batch_images
        )));
    }
    let rois: usize = batch.iter().map(|s| 1 + s.annotation.secondary.len()).sum();
    if rois > train.rois_per_batch {
        return Err(Error::config(format!(
            "batch uses {rois} regions, limit is {}",
            train.rois_per_batch
        )));
    }
    let alpha = match terms {
        LossTerms::Full => fusion.alpha,
        LossTerms::ClassificationOnly => 0.0,
    };
    let inv_batch = T::of(1.0 / batch.len() as f64);
    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    for sample in batch {
        let mut plan = DropoutPlan::Sample {
            ratio: train.dropout_ratio,
            rng: &mut *rng,
        };
        let out = match accumulate_frame_gradients(
            model, sample, fusion, terms, &mut plan, inv_batch, false,
        ) {
            Ok(out) => out,
            Err(e) => {
                model.zero_grad();
                return Err(e);
            }
        };
        cls_sum += out.cls;
        reg_sum += out.reg;
    }

    let n = batch.len() as f64;
    let loss = LossBreakdown::new(cls_sum / n, reg_sum / n, alpha);
    if !loss.total.is_finite() {
        model.zero_grad();
        return Err(Error::numeric(format!(
            "non-finite loss at iteration {iteration}"
        )));
    }
    sgd_step(&mut model.params_mut(), train, iteration)?;
    Ok(loss)
}

/// Per-frame losses and, when requested, the gradient with respect to the
/// network input.
pub struct FrameGradients<T> {
    pub cls: f64,
    pub reg: f64,
    pub input_grad: Option<Tensor<T>>,
}

/// Forward and backward for one frame, scaling every loss gradient by
/// `grad_scale`. Parameter gradients accumulate into the model.
pub fn accumulate_frame_gradients<T: Scalar>(
    model: &mut WmrModel<T>,
    sample: &TrainSample<'_, T>,
    fusion: &FusionConfig,
    terms: LossTerms,
    plan: &mut DropoutPlan<'_, T>,
    grad_scale: T,
    want_input_grad: bool,
) -> Result<FrameGradients<T>> {
    let with_bbox = terms == LossTerms::Full;
    let fwd = model.forward_frame(sample.input, sample.annotation, plan, with_bbox)?;
    let (fused, winners) = fused_scores(model, &fwd, fusion)?;
    if fused.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite class scores"));
    }
    let probs = softmax(&fused)?;
    let cls = cross_entropy_loss(&probs, sample.label)?.as_f64();
    let g: Vec<T> = softmax_cross_entropy_grad(&probs, sample.label)?
        .into_iter()
        .map(|v| v * grad_scale)
        .collect();

    let (grad_primary, grad_secondary) = match winners {
        None => (g, Vec::new()),
        Some(win) => {
            let (wp, ws) = (T::of(fusion.w_primary), T::of(fusion.w_secondary));
            let mut sec = vec![vec![T::zero(); g.len()]; fwd.secondary_scores.len()];
            for (k, &n) in win.iter().enumerate() {
                sec[n][k] = ws * g[k];
            }
            (g.iter().map(|&v| wp * v).collect(), sec)
        }
    };

    let mut reg = 0.0;
    let grad_bbox = match &fwd.bbox_deltas {
        Some(deltas) => {
            let targets = regression_targets::<T>(&sample.annotation.primary, &sample.truth);
            let a = T::of(fusion.alpha);
            let mut sum = T::zero();
            let mut grad = Vec::with_capacity(4);
            for (&d, &t) in deltas.iter().zip(&targets) {
                sum += smooth_l1(d - t);
                grad.push(a * smooth_l1_grad(d - t) * grad_scale);
            }
            if !sum.is_finite() {
                return Err(Error::numeric("non-finite box deltas"));
            }
            reg = sum.as_f64();
            Some(grad)
        }
        None => None,
    };
    let input_grad = model.backward_frame(
        &fwd,
        &grad_primary,
        &grad_secondary,
        grad_bbox.as_deref(),
        want_input_grad,
    )?;
    Ok(FrameGradients {
        cls,
        reg,
        input_grad,
    })
}

/// Loss of one frame without touching gradients.
pub fn frame_loss<T: Scalar>(
    model: &WmrModel<T>,
    sample: &TrainSample<'_, T>,
    fusion: &FusionConfig,
    terms: LossTerms,
    plan: &mut DropoutPlan<'_, T>,
) -> Result<LossBreakdown> {
    let with_bbox = terms == LossTerms::Full;
    let fwd = model.forward_frame(sample.input, sample.annotation, plan, with_bbox)?;
    let (fused, _) = fused_scores(model, &fwd, fusion)?;
    match &fwd.bbox_deltas {
        Some(deltas) => {
            let targets = regression_targets::<T>(&sample.annotation.primary, &sample.truth);
            multi_task_loss(&fused, sample.label, deltas, &targets, fusion)
        }
        None => {
            let cls = cross_entropy_loss(&softmax(&fused)?, sample.label)?.as_f64();
            Ok(LossBreakdown::new(cls, 0.0, 0.0))
        }
    }
}

/// Class probabilities for one frame in evaluation mode.
pub fn predict_frame<T: Scalar>(
    model: &WmrModel<T>,
    input: &Tensor<T>,
    annotation: &RegionAnnotation,
    fusion: &FusionConfig,
) -> Result<Vec<T>> {
    let fwd = model.forward_frame(input, annotation, &mut DropoutPlan::Eval, false)?;
    let (fused, _) = fused_scores(model, &fwd, fusion)?;
    softmax(&fused)
}

/// Primary scores and, when the secondary path exists, the per-class max
/// over secondary regions, in evaluation mode.
pub fn region_scores<T: Scalar>(
    model: &WmrModel<T>,
    input: &Tensor<T>,
    annotation: &RegionAnnotation,
) -> Result<(Vec<T>, Option<Vec<T>>)> {
    let fwd = model.forward_frame(input, annotation, &mut DropoutPlan::Eval, false)?;
    let sec = (!fwd.secondary_scores.is_empty()).then(|| {
        (0..fwd.primary_scores.len())
            .map(|k| {
                fwd.secondary_scores
                    .iter()
                    .map(|row| row[k])
                    .fold(T::neg_infinity(), T::max)
            })
            .collect()
    });
    Ok((fwd.primary_scores, sec))
}
