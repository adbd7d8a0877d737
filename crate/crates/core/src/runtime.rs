//! Video-level orchestration: frame sampling, stream fusion, the linear
//! score-fusion classifier and the latency model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::net::FusionConfig;
use crate::WmrRng;

/// Flow fields per temporal-stream input.
pub const FLOW_STACK_LEN: usize = 10;
/// Sampled positions per video at test time.
pub const TEST_SAMPLES: usize = 25;
/// Clip length of the clip-accumulation latency baseline.
pub const CLIP_BASELINE_FRAMES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub frames: Vec<Frame>,
    pub label: usize,
    pub fps: f64,
    pub id: String,
}

impl VideoSample {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < FLOW_STACK_LEN + 1 {
            return Err(Error::input(format!(
                "video {} has {} frames, need at least {}",
                self.id,
                self.frames.len(),
                FLOW_STACK_LEN + 1
            )));
        }
        let (w, h) = (self.frames[0].width(), self.frames[0].height());
        if self
            .frames
            .iter()
            .any(|f| f.width() != w || f.height() != h)
        {
            return Err(Error::input(format!(
                "video {} changes frame size",
                self.id
            )));
        }
        if !(self.fps > 0.0) {
            return Err(Error::input(format!(
                "video {} has non-positive fps",
                self.id
            )));
        }
        Ok(())
    }
}

/// Number of legal flow-stack start positions in a video of `frames` frames.
pub fn flow_start_count(frames: usize) -> Result<usize> {
    if frames < FLOW_STACK_LEN + 1 {
        return Err(Error::input(format!(
            "{frames} frames cannot hold a {FLOW_STACK_LEN}-field flow stack"
        )));
    }
    Ok(frames - FLOW_STACK_LEN)
}

/// One uniformly random RGB frame and one uniformly random flow-stack start.
pub fn sample_training_frames(frames: usize, rng: &mut WmrRng) -> Result<(usize, usize)> {
    let starts = flow_start_count(frames)?;
    Ok((rng.random_range(0..frames), rng.random_range(0..starts)))
}

/// `floor(i · len / count)` for `i < count`.
pub fn sample_test_frames(len: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| i * len / count).collect()
}

/// `p = w_rgb·p_rgb + w_flow·p_flow`.
pub fn fuse_streams(p_rgb: &[f64], p_flow: &[f64], cfg: &FusionConfig) -> Result<Vec<f64>> {
    if p_rgb.len() != p_flow.len() {
        return Err(Error::input("stream outputs differ in class count"));
    }
    Ok(p_rgb
        .iter()
        .zip(p_flow)
        .map(|(&a, &b)| cfg.w_rgb * a + cfg.w_flow * b)
        .collect())
}

/// Arithmetic mean of per-frame probability vectors.
pub fn mean_probs(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::input("no per-frame outputs to average"))?;
    let mut acc = vec![0.0; first.len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Seconds of video that must accumulate before a prediction.
pub fn latency_model(fps: f64, accumulation_frames: usize) -> f64 {
    accumulation_frames as f64 / fps
}

/// One-vs-rest linear classifier over `[primary, secondary_max]` scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScoreFusion {
    pub classes: usize,
    /// Per class: weights over the 2K features followed by the bias.
    pub weights: Vec<Vec<f64>>,
    pub majority: usize,
    /// Set when every training feature vector is identical.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearFusionConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub decay_every: usize,
    pub regularization: f64,
    pub seed: u64,
}

impl Default for LinearFusionConfig {
    fn default() -> Self {
        LinearFusionConfig {
            steps: 10_000,
            learning_rate: 0.1,
            decay_every: 2_500,
            regularization: 1e-4,
            seed: 0,
        }
    }
}

/// A score pair and its label.
pub type ScorePair = (Vec<f64>, Vec<f64>, usize);

fn features(primary: &[f64], secondary: &[f64]) -> Vec<f64> {
    primary
        .iter()
        .chain(secondary)
        .copied()
        .chain([1.0])
        .collect()
}

/// Hinge-loss subgradient descent, one random sample per step, learning rate
/// halved every `decay_every` steps.
pub fn linear_score_fusion_train(
    pairs: &[ScorePair],
    classes: usize,
    cfg: &LinearFusionConfig,
) -> Result<LinearScoreFusion> {
    let mut counts = vec![0usize; classes];
    for (p, s, label) in pairs {
        if *label >= classes || p.len() != classes || s.len() != classes {
            return Err(Error::input("score pair does not match the class count"));
        }
        counts[*label] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::input(
            "score fusion needs at least two classes present",
        ));
    }
    let majority = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let feats: Vec<Vec<f64>> = pairs.iter().map(|(p, s, _)| features(p, s)).collect();
    let dim = 2 * classes + 1;
    let degenerate = feats.iter().all(|f| f == &feats[0]);
    let mut weights = vec![vec![0.0; dim]; classes];
    if !degenerate {
        let mut rng = WmrRng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut pos = order.len();
        for step in 0..cfg.steps {
            if pos == order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            let i = order[pos];
            pos += 1;
            let lr = cfg.learning_rate * 0.5f64.powi((step / cfg.decay_every.max(1)) as i32);
            let x = &feats[i];
            for (k, w) in weights.iter_mut().enumerate() {
                let y = if pairs[i].2 == k { 1.0 } else { -1.0 };
                let margin = y * w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                for (j, wj) in w.iter_mut().enumerate() {
                    let reg = if j + 1 < dim {
                        cfg.regularization * *wj
                    } else {
                        0.0
                    };
                    let hinge = if margin < 1.0 { y * x[j] } else { 0.0 };
                    *wj -= lr * (reg - hinge);
                }
            }
        }
        if weights.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numeric("score fusion weights diverged"));
        }
    }
    Ok(LinearScoreFusion {
        classes,
        weights,
        majority,
        degenerate,
    })
}

impl LinearScoreFusion {
    pub fn decision_values(&self, primary: &[f64], secondary: &[f64]) -> Vec<f64> {
        let x = features(primary, secondary);
        self.weights
            .iter()
            .map(|w| w.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn predict(&self, primary: &[f64], secondary: &[f64]) -> usize {
        if self.degenerate {
            return self.majority;
        }
        crate::tensor::argmax(&self.decision_values(primary, secondary))
    }
}

/// Mean, median, 95th percentile and maximum of a sample (nearest-rank
/// percentiles).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl DistributionSummary {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return DistributionSummary {
                count: 0,
                mean: 0.0,
                p50: 0.0,
                p95: 0.0,
                max: 0.0,
            };
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        DistributionSummary {
            count: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: rank(0.5),
            p95: rank(0.95),
            max: s[s.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub per_frame_spatial_ms: DistributionSummary,
    pub per_stack_temporal_ms: DistributionSummary,
    pub analytic_accumulation_s: f64,
    pub baseline_clip_accumulation_s: f64,
    /// Raw timings, kept for histograms.
    pub spatial_samples_ms: Vec<f64>,
    pub temporal_samples_ms: Vec<f64>,
}

impl LatencyReport {
    /// Analytic fields only, for `fps`.
    pub fn analytic(fps: f64) -> Self {
        LatencyReport {
            per_frame_spatial_ms: DistributionSummary::from_samples(&[]),
            per_stack_temporal_ms: DistributionSummary::from_samples(&[]),
            analytic_accumulation_s: latency_model(fps, FLOW_STACK_LEN),
            baseline_clip_accumulation_s: latency_model(fps, CLIP_BASELINE_FRAMES),
            spatial_samples_ms: Vec::new(),
            temporal_samples_ms: Vec::new(),
        }
    }
}

/// Equal-width histogram `(bin_start, bin_end, count)` over `samples`.
pub fn histogram(samples: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if samples.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut counts = vec![0usize; bins];
    for &s in samples {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}
