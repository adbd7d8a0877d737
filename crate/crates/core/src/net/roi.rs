//! ROI max pooling over a shared feature map.

use crate::error::{Error, Result};
use crate::region::BoundingBox;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Flat feature-map index chosen by each pooled cell; `None` for empty bins.
pub type RoiIndices = Vec<Option<usize>>;

/// Feature-map cell range `[start, end)` covered by the scaled region along
/// one axis, before clipping.
fn scaled_span(lo: i32, hi: i32, scale: f64) -> (i64, i64) {
    let start = (lo as f64 * scale).round() as i64;
    let end = ((hi as f64 * scale).round() as i64).max(start + 1);
    (start, end)
}

/// Max-pools `region` (image coordinates, scaled by `spatial_scale`) of a
/// C×H×W feature map into C×`out_h`×`out_w`.
///
/// Bin `i` of a region spanning `n` cells covers cells
/// `floor(i·n/out) .. ceil((i+1)·n/out)` relative to the region start,
/// clipped to the map. Empty bins output zero and receive no gradient; ties
/// pick the first cell in row-major scan order.
pub fn roi_pool<T: Scalar>(
    featmap: &Tensor<T>,
    region: &BoundingBox,
    out_h: usize,
    out_w: usize,
    spatial_scale: f64,
) -> Result<(Tensor<T>, RoiIndices)> {
    let (c, h, w) = featmap.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("ROI output size must be positive"));
    }
    let (x0, x1) = scaled_span(region.x_min, region.x_max, spatial_scale);
    let (y0, y1) = scaled_span(region.y_min, region.y_max, spatial_scale);
    if x1 <= 0 || y1 <= 0 || x0 >= w as i64 || y0 >= h as i64 {
        return Err(Error::input(format!(
            "region {region} lies outside the {w}×{h} feature map"
        )));
    }
    let (rh, rw) = (y1 - y0, x1 - x0);
    let bin = |i: usize, n: i64, out: usize, origin: i64, limit: usize| -> (usize, usize) {
        let i = i as i64;
        let out = out as i64;
        let lo = origin + (i * n).div_euclid(out);
        let hi = origin + ((i + 1) * n + out - 1).div_euclid(out);
        (
            lo.clamp(0, limit as i64) as usize,
            hi.clamp(0, limit as i64) as usize,
        )
    };

    let data = featmap.data();
    let mut out = vec![T::zero(); c * out_h * out_w];
    let mut indices = vec![None; c * out_h * out_w];
    for ph in 0..out_h {
        let (ys, ye) = bin(ph, rh, out_h, y0, h);
        for pw in 0..out_w {
            let (xs, xe) = bin(pw, rw, out_w, x0, w);
            if ys >= ye || xs >= xe {
                continue;
            }
            for ch in 0..c {
                let mut best = (ch * h + ys) * w + xs;
                for y in ys..ye {
                    let row = (ch * h + y) * w;
                    for x in xs..xe {
                        if data[row + x] > data[best] {
                            best = row + x;
                        }
                    }
                }
                let o = (ch * out_h + ph) * out_w + pw;
                out[o] = data[best];
                indices[o] = Some(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, out_h, out_w], out)?, indices))
}

/// Adds the pooled-output gradient into `grad_featmap` at the recorded argmax
/// positions.
pub fn roi_pool_backward<T: Scalar>(
    indices: &RoiIndices,
    grad_out: &[T],
    grad_featmap: &mut Tensor<T>,
) -> Result<()> {
    if indices.len() != grad_out.len() {
        return Err(Error::config("ROI gradient does not match pooled size"));
    }
    let g = grad_featmap.data_mut();
    for (idx, &v) in indices.iter().zip(grad_out) {
        if let Some(i) = idx {
            g[*i] += v;
        }
    }
    Ok(())
}
