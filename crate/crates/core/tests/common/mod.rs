//! Brute-force reference implementations shared by the oracle tests and the
//! acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use wmr_core::layers::{conv2d, max_pool2d, LayerParams};
use wmr_core::net::roi_pool;
use wmr_core::region::{filter_secondary, iou, BoundingBox, ProposalFilterConfig, ProposalSet};
use wmr_core::tensor::Tensor;
use wmr_core::WmrRng;

pub type Check = std::result::Result<(), String>;

pub fn random_box(rng: &mut WmrRng, lo: i32, hi: i32) -> BoundingBox {
    let x0 = rng.random_range(lo..hi);
    let y0 = rng.random_range(lo..hi);
    let x1 = rng.random_range(x0 + 1..=hi);
    let y1 = rng.random_range(y0 + 1..=hi);
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

fn random_tensor(rng: &mut WmrRng, shape: &[usize], levels: Option<i32>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match levels {
            // few distinct values so ties are common
            Some(k) => rng.random_range(0..k) as f64,
            None => rng.random_range(-1.0..1.0),
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// IoU by counting covered pixels one at a time, as an exact fraction.
pub fn iou_by_pixels(a: &BoundingBox, b: &BoundingBox) -> (i64, i64) {
    let (mut inter, mut union) = (0i64, 0i64);
    let inside = |bx: &BoundingBox, x: i32, y: i32| {
        x >= bx.x_min && x < bx.x_max && y >= bx.y_min && y < bx.y_max
    };
    let x_lo = a.x_min.min(b.x_min);
    let x_hi = a.x_max.max(b.x_max);
    let y_lo = a.y_min.min(b.y_min);
    let y_hi = a.y_max.max(b.y_max);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as i64;
            union += (ia || ib) as i64;
        }
    }
    (inter, union)
}

pub fn check_iou(seed: u64, n: usize) -> Check {
    let mut rng = WmrRng::seed_from_u64(seed);
    for case in 0..n {
        let a = random_box(&mut rng, -5, 30);
        let b = random_box(&mut rng, -5, 30);
        let (inter, union) = iou_by_pixels(&a, &b);
        let expected = inter as f64 / union as f64;
        let got = iou(&a, &b);
        if (got - expected).abs() > 1e-12 {
            return Err(format!(
                "case {case}: iou({a}, {b}) = {got}, pixel count gives {expected}"
            ));
        }
    }
    Ok(())
}

/// Secondary-region selection by exhaustive comparison with exact
/// rational IoU: in-band boxes ranked by IoU, then larger area, then
/// coordinates; first `max` kept; the frame when none qualify.
pub fn filter_by_brute_force(
    boxes: &[BoundingBox],
    primary: &BoundingBox,
    cfg: &ProposalFilterConfig,
    width: usize,
    height: usize,
) -> Vec<BoundingBox> {
    let mut unique: Vec<BoundingBox> = Vec::new();
    for b in boxes {
        if !unique.contains(b) {
            unique.push(*b);
        }
    }
    let frac = |b: &BoundingBox| iou_by_pixels(b, primary);
    let mut kept: Vec<BoundingBox> = unique
        .into_iter()
        .filter(|b| {
            let (i, u) = frac(b);
            let v = i as f64 / u as f64;
            v >= cfg.l && v <= cfg.u
        })
        .collect();
    // selection sort with the exact comparison
    let better = |a: &BoundingBox, b: &BoundingBox| {
        let (ia, ua) = frac(a);
        let (ib, ub) = frac(b);
        let lhs = ia * ub;
        let rhs = ib * ua;
        if lhs != rhs {
            return lhs > rhs;
        }
        (-a.area(), a.x_min, a.y_min, a.x_max, a.y_max)
            < (-b.area(), b.x_min, b.y_min, b.x_max, b.y_max)
    };
    let mut ranked = Vec::new();
    while !kept.is_empty() {
        let mut best = 0;
        for i in 1..kept.len() {
            if better(&kept[i], &kept[best]) {
                best = i;
            }
        }
        ranked.push(kept.remove(best));
    }
    ranked.truncate(cfg.max_secondary);
    if ranked.is_empty() {
        ranked.push(BoundingBox::new(0, 0, width as i32, height as i32).unwrap());
    }
    ranked
}

pub fn check_filter(seed: u64, n: usize) -> Check {
    let mut rng = WmrRng::seed_from_u64(seed);
    for case in 0..n {
        let count = rng.random_range(0..30);
        let mut boxes: Vec<BoundingBox> = (0..count).map(|_| random_box(&mut rng, 0, 24)).collect();
        if count > 2 && rng.random_bool(0.3) {
            boxes.push(boxes[0]);
        }
        let primary = random_box(&mut rng, 0, 24);
        let l = rng.random_range(0.0..0.5);
        let cfg = ProposalFilterConfig {
            l,
            u: rng.random_range(l..=1.0),
            max_secondary: rng.random_range(1..12),
        };
        let expected = filter_by_brute_force(&boxes, &primary, &cfg, 24, 24);
        let got = filter_secondary(&ProposalSet::new(boxes, case, 24, 24), &primary, &cfg);
        if got.secondary != expected || got.primary != primary {
            return Err(format!(
                "case {case}: got {:?}, expected {expected:?}",
                got.secondary
            ));
        }
    }
    Ok(())
}

/// ROI max pooling by scanning the whole map for every output bin and
/// testing bin membership with real-valued bin edges.
pub fn roi_pool_by_scan(
    map: &Tensor<f64>,
    region: &BoundingBox,
    out_h: usize,
    out_w: usize,
    scale: f64,
) -> Vec<f64> {
    let (c, h, w) = map.chw().unwrap();
    let x0 = (region.x_min as f64 * scale).round();
    let y0 = (region.y_min as f64 * scale).round();
    let x1 = (region.x_max as f64 * scale).round().max(x0 + 1.0);
    let y1 = (region.y_max as f64 * scale).round().max(y0 + 1.0);
    let (rw, rh) = (x1 - x0, y1 - y0);
    let mut out = Vec::new();
    for ch in 0..c {
        for ph in 0..out_h {
            for pw in 0..out_w {
                let ys = y0 + (ph as f64 * rh / out_h as f64).floor();
                let ye = y0 + ((ph + 1) as f64 * rh / out_h as f64).ceil();
                let xs = x0 + (pw as f64 * rw / out_w as f64).floor();
                let xe = x0 + ((pw + 1) as f64 * rw / out_w as f64).ceil();
                let mut best: Option<f64> = None;
                for y in 0..h {
                    for x in 0..w {
                        let (fy, fx) = (y as f64, x as f64);
                        if fy >= ys && fy < ye && fx >= xs && fx < xe {
                            let v = map.at3(ch, y, x);
                            best = Some(best.map_or(v, |b: f64| b.max(v)));
                        }
                    }
                }
                out.push(best.unwrap_or(0.0));
            }
        }
    }
    out
}

pub fn check_roi_pool(seed: u64, n: usize) -> Check {
    let mut rng = WmrRng::seed_from_u64(seed);
    for case in 0..n {
        let (c, h, w) = (
            rng.random_range(1..4),
            rng.random_range(1..12),
            rng.random_range(1..12),
        );
        let levels = rng.random_bool(0.5).then_some(4);
        let map = random_tensor(&mut rng, &[c, h, w], levels);
        let scale = [1.0, 0.5, 0.25][rng.random_range(0..3)];
        let extent = (w.max(h) as f64 / scale) as i32;
        let (out_h, out_w) = (rng.random_range(1..6), rng.random_range(1..6));
        let region = loop {
            let b = random_box(&mut rng, -4, extent + 4);
            if let Ok(r) = roi_pool(&map, &b, out_h, out_w, scale) {
                break (b, r);
            }
        };
        let (b, (pooled, indices)) = region;
        let expected = roi_pool_by_scan(&map, &b, out_h, out_w, scale);
        if pooled.data() != expected.as_slice() {
            return Err(format!(
                "case {case}: region {b} scale {scale}: {:?} vs {expected:?}",
                pooled.data()
            ));
        }
        for (i, idx) in indices.iter().enumerate() {
            if let Some(idx) = idx {
                if map.data()[*idx] != pooled.data()[i] {
                    return Err(format!(
                        "case {case}: index {idx} does not hold the pooled value"
                    ));
                }
            }
        }
    }
    Ok(())
}

pub fn check_max_pool(seed: u64, n: usize) -> Check {
    let mut rng = WmrRng::seed_from_u64(seed);
    for case in 0..n {
        let (c, h, w) = (
            rng.random_range(1..4),
            rng.random_range(2..12),
            rng.random_range(2..12),
        );
        let window = rng.random_range(1..=h.min(w).min(3));
        let stride = rng.random_range(1..=3);
        let levels = rng.random_bool(0.5).then_some(3);
        let input = random_tensor(&mut rng, &[c, h, w], levels);
        let (out, indices) = max_pool2d(&input, window, stride).unwrap();
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let mut k = 0;
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let cells: Vec<(usize, f64)> = (0..window * window)
                        .map(|t| {
                            let (y, x) = (oy * stride + t / window, ox * stride + t % window);
                            ((ch * h + y) * w + x, input.at3(ch, y, x))
                        })
                        .collect();
                    let max = cells.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
                    let first = cells.iter().find(|c| c.1 == max).unwrap().0;
                    if out.data()[k] != max || indices[k] != first {
                        return Err(format!(
                            "case {case}: cell {k} got ({}, {}), expected ({max}, {first})",
                            out.data()[k],
                            indices[k]
                        ));
                    }
                    k += 1;
                }
            }
        }
        if k != out.len() {
            return Err(format!(
                "case {case}: output has {} cells, expected {k}",
                out.len()
            ));
        }
    }
    Ok(())
}

/// Direct convolution sum with explicit zero-padding tests.
pub fn conv_by_definition(
    input: &Tensor<f64>,
    params: &LayerParams<f64>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (c, h, w) = input.chw().unwrap();
    let s = params.weights.shape();
    let (oc, k) = (s[0], s[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for o in 0..oc {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = params.biases.data()[o];
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as i64 - pad as i64;
                            let x = (ox * stride + kx) as i64 - pad as i64;
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                let wv = params.weights.data()[((o * c + ch) * k + ky) * k + kx];
                                acc += wv * input.at3(ch, y as usize, x as usize);
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

pub fn check_conv(seed: u64, n: usize) -> Check {
    let mut rng = WmrRng::seed_from_u64(seed);
    for case in 0..n {
        let (c, oc) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(1..=3);
        let pad = rng.random_range(0..=k / 2 + 1);
        let stride = rng.random_range(1..=2);
        let (h, w) = (rng.random_range(k..10), rng.random_range(k..10));
        let input = random_tensor(&mut rng, &[c, h, w], None);
        let params = LayerParams::new(
            random_tensor(&mut rng, &[oc, c, k, k], None),
            random_tensor(&mut rng, &[oc], None),
        );
        let got = conv2d(&input, &params, stride, pad).unwrap();
        let expected = conv_by_definition(&input, &params, stride, pad);
        if got.len() != expected.len() {
            return Err(format!(
                "case {case}: {} outputs, expected {}",
                got.len(),
                expected.len()
            ));
        }
        for (i, (a, b)) in got.data().iter().zip(&expected).enumerate() {
            if (a - b).abs() > 1e-12 * (1.0 + b.abs()) {
                return Err(format!("case {case}: output {i} is {a}, expected {b}"));
            }
        }
    }
    Ok(())
}

pub const ORACLE_CASES: usize = 1000;

pub fn oracle_suite(seed: u64) -> Vec<(&'static str, Check)> {
    vec![
        ("iou", check_iou(seed, ORACLE_CASES)),
        ("filter_secondary", check_filter(seed + 1, ORACLE_CASES)),
        ("roi_pool", check_roi_pool(seed + 2, ORACLE_CASES)),
        ("max_pool2d", check_max_pool(seed + 3, ORACLE_CASES)),
        ("conv2d", check_conv(seed + 4, ORACLE_CASES)),
    ]
}
