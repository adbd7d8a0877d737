//! Central finite-difference gradient checks and the per-op suite.

use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::error::Result;
use crate::layers::{
    apply_mask, conv2d, conv2d_backward, fully_connected, fully_connected_backward, max_pool2d,
    max_pool2d_backward, relu, relu_backward, LayerParams,
};
use crate::loss::{
    cross_entropy_loss, smooth_l1, smooth_l1_grad, softmax, softmax_cross_entropy_grad,
};
use crate::net::{
    accumulate_frame_gradients, frame_loss, roi_pool, roi_pool_backward, Architecture, DropoutPlan,
    FusionConfig, LossTerms, TrainSample, WmrModel,
};
use crate::region::{BoundingBox, RegionAnnotation};
use crate::tensor::Tensor;
use crate::WmrRng;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `op` at `input` against
/// central differences with step `eps`, elementwise. `op` maps an input to
/// a scalar value and its gradient.
pub fn grad_check<F>(mut op: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let (_, analytic) = op(input)?;
    let mut x = input.clone();
    let mut worst: f64 = 0.0;
    for i in 0..input.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let (plus, _) = op(&x)?;
        x.data_mut()[i] = orig - eps;
        let (minus, _) = op(&x)?;
        x.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// One row of the gradient suite.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub elements: usize,
    pub max_relative_error: f64,
}

fn random_tensor(shape: &[usize], rng: &mut WmrRng) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

/// `Σ r·y` with fixed random `r`, turning a tensor-valued op into a scalar.
fn projection(len: usize, rng: &mut WmrRng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn project(y: &Tensor<f64>, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

fn flat_params(model: &WmrModel<f64>) -> Vec<f64> {
    model
        .named_params()
        .iter()
        .flat_map(|(_, p)| p.weights.data().iter().chain(p.biases.data()).copied())
        .collect()
}

fn set_flat_params(model: &mut WmrModel<f64>, values: &[f64]) {
    let mut it = values.iter();
    for p in model.params_mut() {
        for v in p.weights.data_mut().iter_mut().chain(p.biases.data_mut()) {
            *v = *it.next().expect("parameter vector long enough");
        }
    }
}

fn flat_grads(model: &WmrModel<f64>) -> Vec<f64> {
    model
        .named_params()
        .iter()
        .flat_map(|(_, p)| {
            p.grad_weights
                .data()
                .iter()
                .chain(p.grad_biases.data())
                .copied()
        })
        .collect()
}

/// Runs every differentiable op and the whole network through [`grad_check`]
/// on randomized double-precision inputs.
pub fn gradient_suite(seed: u64, eps: f64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = WmrRng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut push = |name: &str, elements: usize, err: f64| {
        rows.push(GradCheckEntry {
            name: name.to_string(),
            elements,
            max_relative_error: err,
        })
    };

    // convolution: input and weights
    let x = random_tensor(&[2, 6, 5], &mut rng);
    let conv = LayerParams::new(
        random_tensor(&[3, 2, 3, 3], &mut rng),
        random_tensor(&[3], &mut rng),
    );
    let r = projection(3 * 3 * 3, &mut rng);
    let err = grad_check(
        |x| {
            let y = conv2d(x, &conv, 2, 1)?;
            let mut p = conv.clone();
            let g = conv2d_backward(
                x,
                &mut p,
                2,
                1,
                &Tensor::from_vec(y.shape(), r.clone())?,
                true,
            )?;
            Ok((project(&y, &r), g.expect("input gradient")))
        },
        &x,
        eps,
    )?;
    push("conv2d (input)", x.len(), err);
    let err = grad_check(
        |w| {
            let p = LayerParams::new(w.clone(), conv.biases.clone());
            let y = conv2d(&x, &p, 2, 1)?;
            let mut q = p.clone();
            conv2d_backward(
                &x,
                &mut q,
                2,
                1,
                &Tensor::from_vec(y.shape(), r.clone())?,
                false,
            )?;
            Ok((project(&y, &r), q.grad_weights))
        },
        &conv.weights,
        eps,
    )?;
    push("conv2d (weights)", conv.weights.len(), err);

    // max pooling
    let x = random_tensor(&[2, 6, 6], &mut rng);
    let r = projection(2 * 3 * 3, &mut rng);
    let err = grad_check(
        |x| {
            let (y, idx) = max_pool2d(x, 2, 2)?;
            let g = max_pool2d_backward(x.shape(), &idx, &Tensor::from_vec(y.shape(), r.clone())?)?;
            Ok((project(&y, &r), g))
        },
        &x,
        eps,
    )?;
    push("max_pool2d", x.len(), err);

    // fully connected: input and weights
    let x = random_tensor(&[7], &mut rng);
    let fc = LayerParams::new(
        random_tensor(&[4, 7], &mut rng),
        random_tensor(&[4], &mut rng),
    );
    let r = projection(4, &mut rng);
    let err = grad_check(
        |x| {
            let y = fully_connected(x, &fc)?;
            let mut p = fc.clone();
            let g = fully_connected_backward(x, &mut p, &Tensor::vector(&r)?)?;
            Ok((project(&y, &r), g))
        },
        &x,
        eps,
    )?;
    push("fully_connected (input)", x.len(), err);
    let err = grad_check(
        |w| {
            let p = LayerParams::new(w.clone(), fc.biases.clone());
            let y = fully_connected(&x, &p)?;
            let mut q = p.clone();
            fully_connected_backward(&x, &mut q, &Tensor::vector(&r)?)?;
            Ok((project(&y, &r), q.grad_weights))
        },
        &fc.weights,
        eps,
    )?;
    push("fully_connected (weights)", fc.weights.len(), err);

    // conv + relu + fully connected composite
    let x = random_tensor(&[1, 5, 5], &mut rng);
    let conv = LayerParams::new(
        random_tensor(&[2, 1, 3, 3], &mut rng),
        random_tensor(&[2], &mut rng),
    );
    let fc = LayerParams::new(
        random_tensor(&[3, 50], &mut rng),
        random_tensor(&[3], &mut rng),
    );
    let r = projection(3, &mut rng);
    let err = grad_check(
        |x| {
            let h = conv2d(x, &conv, 1, 1)?;
            let a = relu(&h);
            let flat = a.clone().reshape(&[50])?;
            let y = fully_connected(&flat, &fc)?;
            let mut p = fc.clone();
            let g_flat = fully_connected_backward(&flat, &mut p, &Tensor::vector(&r)?)?;
            let g_h = relu_backward(&h, &g_flat.reshape(h.shape())?)?;
            let mut c = conv.clone();
            let g = conv2d_backward(x, &mut c, 1, 1, &g_h, true)?;
            Ok((project(&y, &r), g.expect("input gradient")))
        },
        &x,
        eps,
    )?;
    push("conv2d+relu+fully_connected", x.len(), err);

    // softmax + cross-entropy
    let s = random_tensor(&[5], &mut rng);
    let err = grad_check(
        |s| {
            let p = softmax(s.data())?;
            let loss = cross_entropy_loss(&p, 2)?;
            Ok((loss, Tensor::vector(&softmax_cross_entropy_grad(&p, 2)?)?))
        },
        &s,
        eps,
    )?;
    push("softmax+cross_entropy", s.len(), err);

    // smooth L1, away from the |x| = 1 seam
    let d = Tensor::vector(&[0.3, -0.7, 1.6, -2.4])?;
    let err = grad_check(
        |d| {
            let v = d.data().iter().map(|&x| smooth_l1(x)).sum();
            Ok((v, d.map(smooth_l1_grad)))
        },
        &d,
        eps,
    )?;
    push("smooth_l1", d.len(), err);

    // dropout with a fixed mask
    let x = random_tensor(&[12], &mut rng);
    let mask = Tensor::vector(
        &(0..12)
            .map(|i| if i % 3 == 0 { 0.0 } else { 2.5 })
            .collect::<Vec<_>>(),
    )?;
    let r = projection(12, &mut rng);
    let err = grad_check(
        |x| {
            let y = apply_mask(x, &mask)?;
            let g = apply_mask(&Tensor::vector(&r)?, &mask)?;
            Ok((project(&y, &r), g))
        },
        &x,
        eps,
    )?;
    push("dropout (fixed mask)", x.len(), err);

    // ROI pooling on a region partly outside the map
    let fm = random_tensor(&[2, 8, 8], &mut rng);
    let region = BoundingBox::new(3, -2, 14, 13)?;
    let r = projection(2 * 3 * 3, &mut rng);
    let err = grad_check(
        |fm| {
            let (y, idx) = roi_pool(fm, &region, 3, 3, 0.5)?;
            let mut g = Tensor::zeros(fm.shape());
            roi_pool_backward(&idx, &r, &mut g)?;
            Ok((project(&y, &r), g))
        },
        &fm,
        eps,
    )?;
    push("roi_pool", fm.len(), err);

    // full network: multi-task loss through shared backbone, both region
    // paths, per-class max fusion and the box head, with replayed dropout
    let arch = Architecture::tiny(2, 3);
    let mut model = WmrModel::<f64>::new(arch, seed)?;
    let input = random_tensor(&[2, 12, 12], &mut rng).map(|v| 0.5 + 0.5 * v);
    let annotation = RegionAnnotation {
        primary: BoundingBox::new(3, 2, 9, 10)?,
        secondary: vec![
            BoundingBox::new(0, 0, 8, 8)?,
            BoundingBox::new(4, 4, 12, 12)?,
            BoundingBox::new(1, 3, 11, 11)?,
        ],
        frame_id: 0,
    };
    let sample = TrainSample {
        input: &input,
        annotation: &annotation,
        label: 1,
        truth: BoundingBox::new(2, 3, 10, 11)?,
    };
    let fusion = FusionConfig::default();
    let masks = {
        let mut plan = DropoutPlan::Sample {
            ratio: 0.3,
            rng: &mut rng,
        };
        model
            .forward_frame(&input, &annotation, &mut plan, true)?
            .masks()
    };
    let err = grad_check(
        |x| {
            let s = TrainSample { input: x, ..sample };
            model.zero_grad();
            let loss = frame_loss(
                &model,
                &s,
                &fusion,
                LossTerms::Full,
                &mut DropoutPlan::replay(&masks),
            )?;
            let out = accumulate_frame_gradients(
                &mut model,
                &s,
                &fusion,
                LossTerms::Full,
                &mut DropoutPlan::replay(&masks),
                1.0,
                true,
            )?;
            Ok((loss.total, out.input_grad.expect("input gradient")))
        },
        &input,
        eps,
    )?;
    push("wmr network (input)", input.len(), err);

    let theta = Tensor::vector(&flat_params(&model))?;
    let err = grad_check(
        |theta| {
            set_flat_params(&mut model, theta.data());
            model.zero_grad();
            let loss = frame_loss(
                &model,
                &sample,
                &fusion,
                LossTerms::Full,
                &mut DropoutPlan::replay(&masks),
            )?;
            accumulate_frame_gradients(
                &mut model,
                &sample,
                &fusion,
                LossTerms::Full,
                &mut DropoutPlan::replay(&masks),
                1.0,
                false,
            )?;
            Ok((loss.total, Tensor::vector(&flat_grads(&model))?))
        },
        &theta,
        eps,
    )?;
    push("wmr network (parameters)", theta.len(), err);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(&[0.5, -1.25, 3.0, 0.0]).unwrap();
        let err = grad_check(
            |x| Ok((x.data().iter().map(|v| v * v).sum(), x.map(|v| 2.0 * v))),
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::vector(&[0.5, 2.0]).unwrap();
        let err = grad_check(
            |x| Ok((x.data().iter().map(|v| v * v).sum(), x.map(|v| 3.0 * v))),
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err > 0.3);
    }
}
