//! Differentiable layers: convolution, max pooling, fully connected, ReLU
//! and inverted dropout. Each forward op has an explicit backward
//! companion; parameter gradients are accumulated into [`LayerParams`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights, biases and their accumulated gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_biases: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(weights: Tensor<T>, biases: Tensor<T>) -> Self {
        let grad_weights = Tensor::zeros(weights.shape());
        let grad_biases = Tensor::zeros(biases.shape());
        LayerParams {
            weights,
            biases,
            grad_weights,
            grad_biases,
        }
    }

    pub fn zeros(weight_shape: &[usize], bias_len: usize) -> Self {
        Self::new(Tensor::zeros(weight_shape), Tensor::zeros(&[bias_len]))
    }

    /// Zero-mean uniform weights with bound `sqrt(6 / fan_in)`, zero biases.
    pub fn he_uniform<R: Rng + ?Sized>(
        weight_shape: &[usize],
        bias_len: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut weights = Tensor::zeros(weight_shape);
        for w in weights.data_mut() {
            *w = T::of(rng.random_range(-bound..bound));
        }
        Self::new(weights, Tensor::zeros(&[bias_len]))
    }

    pub fn zero_grad(&mut self) {
        self.grad_weights.fill(T::zero());
        self.grad_biases.fill(T::zero());
    }

    pub fn grads_finite(&self) -> bool {
        self.grad_weights.is_finite() && self.grad_biases.is_finite()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

fn conv_geometry(
    input: (usize, usize, usize),
    weights: &[usize],
    bias_len: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = input;
    let [oc, ic, kh, kw] = weights[..] else {
        return Err(Error::config(format!(
            "conv weights must be O×C×K×K, got {weights:?}"
        )));
    };
    if ic != c {
        return Err(Error::config(format!(
            "conv expects {ic} input channels, got {c}"
        )));
    }
    if bias_len != oc {
        return Err(Error::config(format!(
            "conv has {oc} filters but {bias_len} biases"
        )));
    }
    if stride == 0 {
        return Err(Error::config("conv stride must be positive"));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::config(format!(
            "kernel {kh}×{kw} exceeds padded input {}×{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    Ok((oc, kh, ho, wo))
}

fn pad_input<T: Scalar>(input: &Tensor<T>, pad: usize) -> (Vec<T>, usize, usize) {
    let (c, h, w) = input.chw().expect("checked by caller");
    if pad == 0 {
        return (input.data().to_vec(), h, w);
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![T::zero(); c * hp * wp];
    let src = input.data();
    for ch in 0..c {
        for y in 0..h {
            let from = (ch * h + y) * w;
            let to = (ch * hp + y + pad) * wp + pad;
            padded[to..to + w].copy_from_slice(&src[from..from + w]);
        }
    }
    (padded, hp, wp)
}

/// 2-D cross-correlation of a C×H×W input with O×C×K×K filters.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    let (oc, kh, ho, wo) = conv_geometry(
        (c, h, w),
        params.weights.shape(),
        params.biases.len(),
        stride,
        pad,
    )?;
    let kw = params.weights.shape()[3];
    let (padded, hp, wp) = pad_input(input, pad);
    let weights = params.weights.data();
    let biases = params.biases.data();
    let mut out = vec![T::zero(); oc * ho * wo];

    for o in 0..oc {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = biases[o]);
        for ch in 0..c {
            let src = &padded[ch * hp * wp..(ch + 1) * hp * wp];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weights[((o * c + ch) * kh + ky) * kw + kx];
                    for oy in 0..ho {
                        let row = &src[(oy * stride + ky) * wp..];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            for (acc, &x) in orow.iter_mut().zip(&row[kx..kx + wo]) {
                                *acc += wv * x;
                            }
                        } else {
                            for (ox, acc) in orow.iter_mut().enumerate() {
                                *acc += wv * row[ox * stride + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[oc, ho, wo], out)
}

/// Backward pass of [`conv2d`]. Accumulates parameter gradients and returns
/// the input gradient when `want_input_grad` is set.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &mut LayerParams<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    want_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let (c, h, w) = input.chw()?;
    let (oc, kh, ho, wo) = conv_geometry(
        (c, h, w),
        params.weights.shape(),
        params.biases.len(),
        stride,
        pad,
    )?;
    if grad_out.shape() != [oc, ho, wo] {
        return Err(Error::config(format!(
            "conv grad shape {:?} != {:?}",
            grad_out.shape(),
            [oc, ho, wo]
        )));
    }
    let kw = params.weights.shape()[3];
    let (padded, hp, wp) = pad_input(input, pad);
    let g = grad_out.data();
    let mut grad_padded = if want_input_grad {
        vec![T::zero(); c * hp * wp]
    } else {
        Vec::new()
    };

    for o in 0..oc {
        let gplane = &g[o * ho * wo..(o + 1) * ho * wo];
        params.grad_biases.data_mut()[o] += gplane.iter().copied().sum::<T>();
        for ch in 0..c {
            let src = &padded[ch * hp * wp..(ch + 1) * hp * wp];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((o * c + ch) * kh + ky) * kw + kx;
                    let wv = params.weights.data()[widx];
                    let mut acc = T::zero();
                    for oy in 0..ho {
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let base = (oy * stride + ky) * wp + kx;
                        if stride == 1 {
                            for (&gv, &x) in grow.iter().zip(&src[base..base + wo]) {
                                acc += gv * x;
                            }
                            if want_input_grad {
                                let dst =
                                    &mut grad_padded[ch * hp * wp + base..ch * hp * wp + base + wo];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        } else {
                            for (ox, &gv) in grow.iter().enumerate() {
                                acc += gv * src[base + ox * stride];
                                if want_input_grad {
                                    grad_padded[ch * hp * wp + base + ox * stride] += wv * gv;
                                }
                            }
                        }
                    }
                    params.grad_weights.data_mut()[widx] += acc;
                }
            }
        }
    }

    if !want_input_grad {
        return Ok(None);
    }
    let mut grad_in = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let from = (ch * hp + y + pad) * wp + pad;
            grad_in[(ch * h + y) * w..(ch * h + y + 1) * w]
                .copy_from_slice(&grad_padded[from..from + w]);
        }
    }
    Tensor::from_vec(&[c, h, w], grad_in).map(Some)
}

/// Flat input index of the element selected by each pooled output.
pub type PoolIndices = Vec<usize>;

/// Max pooling over square windows. The first maximal cell in row-major
/// scan order wins ties; its flat index is recorded for backward.
pub fn max_pool2d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolIndices)> {
    let (c, h, w) = input.chw()?;
    if window == 0 || stride == 0 {
        return Err(Error::config("pool window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::config(format!(
            "pool window {window} larger than input {h}×{w}"
        )));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let data = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut indices = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (ch * h + oy * stride) * w + ox * stride;
                for y in oy * stride..oy * stride + window {
                    for x in ox * stride..ox * stride + window {
                        let idx = (ch * h + y) * w + x;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                indices.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, ho, wo], out)?, indices))
}

/// Routes each output gradient to the input cell recorded by the forward pass.
pub fn max_pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    indices: &PoolIndices,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if indices.len() != grad_out.len() {
        return Err(Error::config("pool indices do not match gradient"));
    }
    let mut grad_in = Tensor::zeros(input_shape);
    let gi = grad_in.data_mut();
    for (&idx, &g) in indices.iter().zip(grad_out.data()) {
        gi[idx] += g;
    }
    Ok(grad_in)
}

/// Affine map `W·x + b` over the flattened input.
pub fn fully_connected<T: Scalar>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    let (m, n) = fc_dims(input, params)?;
    let x = input.data();
    let wts = params.weights.data();
    let out: Vec<T> = (0..m)
        .map(|i| {
            let row = &wts[i * n..(i + 1) * n];
            params.biases.data()[i] + row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>()
        })
        .collect();
    Tensor::from_vec(&[m], out)
}

fn fc_dims<T: Scalar>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<(usize, usize)> {
    let [m, n] = params.weights.shape()[..] else {
        return Err(Error::config("fully connected weights must be 2-D"));
    };
    if input.len() != n {
        return Err(Error::config(format!(
            "fully connected layer expects {n} inputs, got {}",
            input.len()
        )));
    }
    if params.biases.len() != m {
        return Err(Error::config("fully connected bias length mismatch"));
    }
    Ok((m, n))
}

/// Backward pass of [`fully_connected`]; the input gradient has the input's shape.
pub fn fully_connected_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &mut LayerParams<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (m, n) = fc_dims(input, params)?;
    if grad_out.len() != m {
        return Err(Error::config("fully connected gradient length mismatch"));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut grad_in = vec![T::zero(); n];
    {
        let gw = params.grad_weights.data_mut();
        for i in 0..m {
            let gi = g[i];
            for (d, &xv) in gw[i * n..(i + 1) * n].iter_mut().zip(x) {
                *d += gi * xv;
            }
        }
    }
    for (d, &gv) in params.grad_biases.data_mut().iter_mut().zip(g) {
        *d += gv;
    }
    let wts = params.weights.data();
    for i in 0..m {
        let gi = g[i];
        for (d, &wv) in grad_in.iter_mut().zip(&wts[i * n..(i + 1) * n]) {
            *d += wv * gi;
        }
    }
    Tensor::from_vec(input.shape(), grad_in)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`]; zero where the input is not strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::config("relu gradient shape mismatch"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted dropout. In train mode every element survives with probability
/// `1 - ratio` and is scaled by `1 / (1 - ratio)`; the returned mask holds
/// the per-element multiplier for backward. Eval mode is the identity.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    ratio: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("dropout ratio {ratio} not in [0,1)")));
    }
    if mode == DropoutMode::Eval {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 - ratio;
    let scale = T::of(1.0 / keep);
    let mut mask = Tensor::zeros(input.shape());
    for m in mask.data_mut() {
        if rng.random::<f64>() < keep {
            *m = scale;
        }
    }
    Ok((apply_mask(input, &mask)?, Some(mask)))
}

/// Elementwise product with a recorded dropout mask. Serves as both the
/// fixed-mask forward and the backward of [`dropout`].
pub fn apply_mask<T: Scalar>(input: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != mask.shape() {
        return Err(Error::config("dropout mask shape mismatch"));
    }
    let data = input
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&x, &m)| x * m)
        .collect();
    Tensor::from_vec(input.shape(), data)
}
