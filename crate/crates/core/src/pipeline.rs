//! End-to-end experiment: region and flow preprocessing, per-stream
//! training, video-level evaluation and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, stack_flow, FlowField, HornSchunckParams, DEFAULT_FLOW_BOUND};
use crate::frame::Frame;
use crate::net::{
    predict_frame, region_scores, train_step, Architecture, FusionConfig, LossBreakdown, LossTerms,
    TrainSample,
};
use crate::optim::TrainConfig;
use crate::region::{
    filter_secondary, flow_primary_max_magnitude, iou, load_detections, primary_or_frame,
    selective_search, BoundingBox, Detection, ProposalFilterConfig, RegionAnnotation,
    SelectiveSearchParams,
};
use crate::runtime::{
    flow_start_count, fuse_streams, histogram, latency_model, mean_probs, sample_test_frames,
    sample_training_frames, DistributionSummary, LatencyReport, ScorePair, VideoSample,
    CLIP_BASELINE_FRAMES, FLOW_STACK_LEN,
};
use crate::synth::{
    simulated_detections, Manifest, ManifestEntry, Split, SynthConfig, DETECTIONS_FILE,
};
use crate::tensor::{argmax, Tensor};
use crate::{Model64, WmrRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Rgb,
    Flow,
}

impl StreamKind {
    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Rgb => "rgb",
            StreamKind::Flow => "flow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamSelection {
    Rgb,
    Flow,
    Both,
}

impl StreamSelection {
    pub fn streams(self) -> Vec<StreamKind> {
        match self {
            StreamSelection::Rgb => vec![StreamKind::Rgb],
            StreamSelection::Flow => vec![StreamKind::Flow],
            StreamSelection::Both => vec![StreamKind::Rgb, StreamKind::Flow],
        }
    }
}

/// How the primary region of a flow stack is found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowPrimaryMethod {
    /// Window of the detector box's size with the largest flow magnitude.
    Method1,
    /// Bounding union of the RGB primaries spanned by the stack.
    Method2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub stream: StreamSelection,
    pub flow_primary: FlowPrimaryMethod,
    /// False trains and evaluates the primary-region-only ablation.
    pub secondary_regions: bool,
    /// False drops the box-regression term entirely.
    pub regression: bool,
    pub test_samples: usize,
    pub log_every: u64,
    pub flow_bound: f64,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub filter: ProposalFilterConfig,
    pub search: SelectiveSearchParams,
    pub flow: HornSchunckParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            stream: StreamSelection::Both,
            flow_primary: FlowPrimaryMethod::Method2,
            secondary_regions: true,
            regression: true,
            test_samples: crate::runtime::TEST_SAMPLES,
            log_every: 10,
            flow_bound: DEFAULT_FLOW_BOUND,
            synth: SynthConfig::default(),
            train: TrainConfig::desk_scale(),
            fusion: FusionConfig::default(),
            filter: ProposalFilterConfig::default(),
            search: SelectiveSearchParams::default(),
            flow: HornSchunckParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.fusion.validate()?;
        self.filter.validate()?;
        if self.test_samples == 0 || self.log_every == 0 {
            return Err(Error::config("test_samples and log_every must be positive"));
        }
        if !(self.flow_bound > 0.0) {
            return Err(Error::config("flow_bound must be positive"));
        }
        Ok(())
    }

    pub fn loss_terms(&self) -> LossTerms {
        if self.regression {
            LossTerms::Full
        } else {
            LossTerms::ClassificationOnly
        }
    }

    fn architecture(&self, kind: StreamKind, frame_channels: usize) -> Architecture {
        let channels = match kind {
            StreamKind::Rgb => frame_channels,
            StreamKind::Flow => 2 * FLOW_STACK_LEN,
        };
        let arch = Architecture::small(channels, self.synth.class_count);
        if self.secondary_regions {
            arch
        } else {
            arch.primary_only()
        }
    }
}

/// A video with everything both streams consume precomputed: per-frame
/// region annotations and the flow field of every consecutive pair.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub id: String,
    pub label: usize,
    pub fps: f64,
    pub frames: Vec<Frame>,
    pub truth: Vec<BoundingBox>,
    pub annotations: Vec<RegionAnnotation>,
    pub flows: Vec<FlowField>,
}

/// Region annotation of one frame: the detector's primary (or the whole
/// frame) and the filtered selective-search proposals.
pub fn annotate_frame(
    frame: &Frame,
    frame_id: usize,
    detections: &[Detection],
    search: &SelectiveSearchParams,
    filter: &ProposalFilterConfig,
) -> RegionAnnotation {
    let primary = primary_or_frame(detections, frame.width(), frame.height());
    let proposals = selective_search(frame, frame_id, search);
    filter_secondary(&proposals, &primary, filter)
}

pub fn prepare_video(
    video: &VideoSample,
    truth: &[BoundingBox],
    detections: &BTreeMap<usize, Vec<Detection>>,
    cfg: &PipelineConfig,
) -> Result<PreparedVideo> {
    video.validate()?;
    if truth.len() != video.frames.len() {
        return Err(Error::input(format!(
            "video {} has {} frames but {} boxes",
            video.id,
            video.frames.len(),
            truth.len()
        )));
    }
    let annotations = video
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let dets = detections.get(&i).map(Vec::as_slice).unwrap_or(&[]);
            annotate_frame(f, i, dets, &cfg.search, &cfg.filter)
        })
        .collect();
    let flows = video
        .frames
        .windows(2)
        .enumerate()
        .map(|(i, pair)| {
            let mut f = estimate_flow(&pair[0], &pair[1], &cfg.flow)?;
            f.frame_index = i;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedVideo {
        id: video.id.clone(),
        label: video.label,
        fps: video.fps,
        frames: video.frames.clone(),
        truth: truth.to_vec(),
        annotations,
        flows,
    })
}

/// Spatial-stream network input: intensities in `[0, 1]` shifted to be
/// centered on zero.
pub fn rgb_network_input(frame: &Frame) -> Tensor<f64> {
    frame.to_tensor::<f64>().map(|v| v - 0.5)
}

/// Temporal-stream network input: the normalized stack mapped back to
/// clamped displacements in pixels.
pub fn flow_network_input(fields: &[&FlowField], bound: f64) -> Result<Tensor<f64>> {
    let stack = stack_flow::<f64>(fields, FLOW_STACK_LEN, bound)?;
    let (offset, scale) = (stack.offset, stack.scale);
    Ok(stack.channels.map(|v| (v - offset) / scale))
}

impl PreparedVideo {
    pub fn rgb_input(&self, frame: usize) -> Tensor<f64> {
        rgb_network_input(&self.frames[frame])
    }

    pub fn flow_input(&self, start: usize, bound: f64) -> Result<Tensor<f64>> {
        let fields: Vec<&FlowField> = self.flows[start..start + FLOW_STACK_LEN].iter().collect();
        flow_network_input(&fields, bound)
    }

    /// Regions of the flow stack starting at `start`, and its regression
    /// target. The stack spans frames `start..=start + L`; its secondary
    /// regions are the union of those frames' secondary regions, ranked by
    /// IoU with the stack primary and capped at `max_secondary`.
    pub fn flow_annotation(
        &self,
        start: usize,
        method: FlowPrimaryMethod,
        filter: &ProposalFilterConfig,
    ) -> Result<(RegionAnnotation, BoundingBox)> {
        let span = start..=start + FLOW_STACK_LEN;
        let anns = &self.annotations[span.clone()];
        let union = |boxes: &mut dyn Iterator<Item = BoundingBox>| {
            boxes
                .reduce(|a, b| a.bounding_union(&b))
                .expect("non-empty span")
        };
        let rgb_union = union(&mut anns.iter().map(|a| a.primary));
        let truth = union(&mut self.truth[span].iter().copied());
        let primary = match method {
            FlowPrimaryMethod::Method2 => rgb_union,
            FlowPrimaryMethod::Method1 => {
                let (w, h) = (self.frames[0].width(), self.frames[0].height());
                let mut magnitude = vec![0.0; w * h];
                for f in &self.flows[start..start + FLOW_STACK_LEN] {
                    for (m, v) in magnitude.iter_mut().zip(f.magnitude()) {
                        *m += v;
                    }
                }
                let size = anns[0].primary;
                crate::region::max_mean_window(
                    &magnitude,
                    w,
                    h,
                    size.width() as usize,
                    size.height() as usize,
                )?
            }
        };
        let mut secondary: Vec<BoundingBox> =
            anns.iter().flat_map(|a| a.secondary.clone()).collect();
        secondary.sort_by(|a, b| {
            iou(b, &primary).total_cmp(&iou(a, &primary)).then(
                (a.x_min, a.y_min, a.x_max, a.y_max).cmp(&(b.x_min, b.y_min, b.x_max, b.y_max)),
            )
        });
        secondary.dedup();
        secondary.truncate(filter.max_secondary.max(1));
        Ok((
            RegionAnnotation {
                primary,
                secondary,
                frame_id: start,
            },
            truth,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub train: Vec<PreparedVideo>,
    pub test: Vec<PreparedVideo>,
    pub classes: usize,
}

/// Loads and preprocesses the manifest videos of `splits`. Detections come
/// from each video's detection file when present, otherwise from the
/// ground-truth boxes.
pub fn prepare_manifest(
    manifest: &Manifest,
    splits: &[Split],
    cfg: &PipelineConfig,
) -> Result<PreparedDataset> {
    let mut data = PreparedDataset {
        train: Vec::new(),
        test: Vec::new(),
        classes: cfg.synth.class_count,
    };
    for entry in &manifest.entries {
        if !splits.contains(&entry.split) {
            continue;
        }
        if entry.label >= data.classes {
            return Err(Error::input(format!(
                "{}: label {} outside {} classes",
                entry.path, entry.label, data.classes
            )));
        }
        let video = manifest.load_video(entry, cfg.synth.fps)?;
        let truth = entry.frame_boxes()?;
        let dets = entry_detections(manifest, entry, &truth)?;
        let prepared = prepare_video(&video, &truth, &dets, cfg)?;
        match entry.split {
            Split::Train => data.train.push(prepared),
            Split::Test => data.test.push(prepared),
        }
    }
    Ok(data)
}

fn entry_detections(
    manifest: &Manifest,
    entry: &ManifestEntry,
    truth: &[BoundingBox],
) -> Result<BTreeMap<usize, Vec<Detection>>> {
    let path = manifest.video_dir(entry).join(DETECTIONS_FILE);
    if path.is_file() {
        return load_detections(&path, truth.len());
    }
    Ok(truth
        .iter()
        .enumerate()
        .map(|(i, b)| {
            (
                i,
                vec![Detection {
                    bbox: *b,
                    score: 1.0,
                    class_id: crate::region::DetectionClass::Person,
                }],
            )
        })
        .collect())
}

/// Generates the synthetic set in memory and preprocesses it, without
/// touching the file system.
pub fn prepare_synthetic(cfg: &PipelineConfig) -> Result<PreparedDataset> {
    cfg.validate()?;
    let s = &cfg.synth;
    let mut data = PreparedDataset {
        train: Vec::new(),
        test: Vec::new(),
        classes: s.class_count,
    };
    for i in 0..s.train_videos + s.test_videos {
        let seed = crate::synth::video_seed(s.seed, i);
        let (video, truth) = crate::synth::generate_video(i % s.class_count, s, seed)?;
        let dets = simulated_detections(&truth, s.detector_jitter, seed, s.size, s.size);
        let prepared = prepare_video(&video, &truth, &dets, cfg)?;
        if i < s.train_videos {
            data.train.push(prepared);
        } else {
            data.test.push(prepared);
        }
    }
    Ok(data)
}

/// One logged optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stream: StreamKind,
    pub iteration: u64,
    pub learning_rate: f64,
    pub loss: LossBreakdown,
}

fn stream_offset(kind: StreamKind) -> u64 {
    match kind {
        StreamKind::Rgb => 0x5247_4200,
        StreamKind::Flow => 0x464c_4f57,
    }
}

/// Network input, regions and regression target for one training or test
/// position of a stream.
fn stream_sample(
    video: &PreparedVideo,
    kind: StreamKind,
    position: usize,
    cfg: &PipelineConfig,
) -> Result<(Tensor<f64>, RegionAnnotation, BoundingBox)> {
    match kind {
        StreamKind::Rgb => Ok((
            video.rgb_input(position),
            video.annotations[position].clone(),
            video.truth[position],
        )),
        StreamKind::Flow => {
            let (ann, truth) = video.flow_annotation(position, cfg.flow_primary, &cfg.filter)?;
            Ok((video.flow_input(position, cfg.flow_bound)?, ann, truth))
        }
    }
}

/// Trains one stream from scratch. Every `log_every`-th step (and the last)
/// is appended to `logs`.
pub fn train_stream(
    data: &PreparedDataset,
    kind: StreamKind,
    cfg: &PipelineConfig,
    logs: &mut Vec<StepLog>,
) -> Result<Model64> {
    cfg.validate()?;
    let first = data
        .train
        .first()
        .ok_or_else(|| Error::input("no training videos"))?;
    let arch = cfg.architecture(kind, first.frames[0].channels());
    let seed = cfg.seed ^ stream_offset(kind);
    let mut model = Model64::new(arch, seed)?;
    let mut rng = WmrRng::seed_from_u64(seed.wrapping_add(1));
    let terms = cfg.loss_terms();
    for iteration in 0..cfg.train.max_iterations {
        let mut items = Vec::with_capacity(cfg.train.batch_images);
        for _ in 0..cfg.train.batch_images {
            let video = &data.train[rng.random_range(0..data.train.len())];
            let (rgb, start) = sample_training_frames(video.frames.len(), &mut rng)?;
            let position = if kind == StreamKind::Rgb { rgb } else { start };
            let (input, ann, truth) = stream_sample(video, kind, position, cfg)?;
            items.push((input, ann, truth, video.label));
        }
        let batch: Vec<TrainSample<'_, f64>> = items
            .iter()
            .map(|(input, annotation, truth, label)| TrainSample {
                input,
                annotation,
                label: *label,
                truth: *truth,
            })
            .collect();
        let loss = train_step(
            &mut model,
            &batch,
            &cfg.train,
            &cfg.fusion,
            terms,
            iteration,
            &mut rng,
        )?;
        if iteration % cfg.log_every == 0 || iteration + 1 == cfg.train.max_iterations {
            logs.push(StepLog {
                stream: kind,
                iteration,
                learning_rate: cfg.train.learning_rate_at(iteration),
                loss,
            });
        }
    }
    Ok(model)
}

/// Test positions of a stream: evenly spaced frames for RGB, evenly spaced
/// legal stack starts for flow.
fn test_positions(video: &PreparedVideo, kind: StreamKind, count: usize) -> Result<Vec<usize>> {
    Ok(match kind {
        StreamKind::Rgb => sample_test_frames(video.frames.len(), count),
        StreamKind::Flow => sample_test_frames(flow_start_count(video.frames.len())?, count),
    })
}

/// Mean per-position class probabilities of one stream over a video.
pub fn stream_probs(
    model: &Model64,
    kind: StreamKind,
    video: &PreparedVideo,
    cfg: &PipelineConfig,
) -> Result<Vec<f64>> {
    let rows = test_positions(video, kind, cfg.test_samples)?
        .into_iter()
        .map(|p| {
            let (input, ann, _) = stream_sample(video, kind, p, cfg)?;
            predict_frame(model, &input, &ann, &cfg.fusion)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_probs(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub id: String,
    pub label: usize,
    pub p_rgb: Option<Vec<f64>>,
    pub p_flow: Option<Vec<f64>>,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

/// Averages each available stream over its sampled positions and fuses
/// them with `w_rgb`/`w_flow`; a single stream is used as is.
pub fn video_predict(
    model_rgb: Option<&Model64>,
    model_flow: Option<&Model64>,
    video: &PreparedVideo,
    cfg: &PipelineConfig,
) -> Result<VideoPrediction> {
    let p_rgb = model_rgb
        .map(|m| stream_probs(m, StreamKind::Rgb, video, cfg))
        .transpose()?;
    let p_flow = model_flow
        .map(|m| stream_probs(m, StreamKind::Flow, video, cfg))
        .transpose()?;
    let probs = match (&p_rgb, &p_flow) {
        (Some(r), Some(f)) => fuse_streams(r, f, &cfg.fusion)?,
        (Some(p), None) | (None, Some(p)) => p.clone(),
        (None, None) => return Err(Error::config("no stream model to evaluate")),
    };
    Ok(VideoPrediction {
        id: video.id.clone(),
        label: video.label,
        predicted: argmax(&probs),
        p_rgb,
        p_flow,
        probs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: Vec<VideoPrediction>,
    pub accuracy: f64,
    pub rgb_accuracy: Option<f64>,
    pub flow_accuracy: Option<f64>,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn accuracy_of(
    videos: &[VideoPrediction],
    pick: impl Fn(&VideoPrediction) -> Option<usize>,
) -> Option<f64> {
    let hits = videos
        .iter()
        .map(|v| pick(v).map(|p| (p == v.label) as usize))
        .collect::<Option<Vec<_>>>()?;
    Some(hits.iter().sum::<usize>() as f64 / videos.len().max(1) as f64)
}

pub fn evaluate(
    model_rgb: Option<&Model64>,
    model_flow: Option<&Model64>,
    videos: &[PreparedVideo],
    classes: usize,
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    let preds = videos
        .iter()
        .map(|v| video_predict(model_rgb, model_flow, v, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = vec![vec![0usize; classes]; classes];
    for p in &preds {
        confusion[p.label][p.predicted] += 1;
    }
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[k] as f64 / n as f64
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: accuracy_of(&preds, |v| Some(v.predicted)).unwrap_or(0.0),
        rgb_accuracy: accuracy_of(&preds, |v| v.p_rgb.as_deref().map(argmax)),
        flow_accuracy: accuracy_of(&preds, |v| v.p_flow.as_deref().map(argmax)),
        per_class_accuracy,
        confusion,
        videos: preds,
    })
}

/// Primary and secondary-max scores of every RGB test position, for the
/// linear score-fusion classifier.
pub fn rgb_score_pairs(
    model: &Model64,
    videos: &[PreparedVideo],
    cfg: &PipelineConfig,
) -> Result<Vec<ScorePair>> {
    let mut out = Vec::new();
    for v in videos {
        for p in sample_test_frames(v.frames.len(), cfg.test_samples) {
            let (prim, sec) = region_scores(model, &v.rgb_input(p), &v.annotations[p])?;
            let sec = sec.ok_or_else(|| Error::config("score fusion needs the secondary path"))?;
            out.push((prim, sec, v.label));
        }
    }
    Ok(out)
}

/// Trained stream models with their logs and test-set report.
pub struct ExperimentResult {
    pub rgb: Option<Model64>,
    pub flow: Option<Model64>,
    pub logs: Vec<StepLog>,
    pub report: EvalReport,
}

pub fn run_experiment(data: &PreparedDataset, cfg: &PipelineConfig) -> Result<ExperimentResult> {
    let mut logs = Vec::new();
    let mut rgb = None;
    let mut flow = None;
    for kind in cfg.stream.streams() {
        let model = train_stream(data, kind, cfg, &mut logs)?;
        match kind {
            StreamKind::Rgb => rgb = Some(model),
            StreamKind::Flow => flow = Some(model),
        }
    }
    let report = evaluate(rgb.as_ref(), flow.as_ref(), &data.test, data.classes, cfg)?;
    Ok(ExperimentResult {
        rgb,
        flow,
        logs,
        report,
    })
}

/// Times online prediction over a video: per frame for the spatial stream
/// (proposals, filtering and the network), per 10 frames for the temporal
/// stream (flow estimation, stacking and the network). One discarded pass
/// of each warms up first.
pub fn measure_latency(
    model_rgb: &Model64,
    model_flow: &Model64,
    video: &VideoSample,
    detections: &BTreeMap<usize, Vec<Detection>>,
    cfg: &PipelineConfig,
) -> Result<LatencyReport> {
    video.validate()?;
    let n = video.frames.len();
    let mut annotations = Vec::with_capacity(n);
    let mut spatial = Vec::with_capacity(n);
    let spatial_pass = |i: usize| -> Result<RegionAnnotation> {
        let dets = detections.get(&i).map(Vec::as_slice).unwrap_or(&[]);
        let ann = annotate_frame(&video.frames[i], i, dets, &cfg.search, &cfg.filter);
        predict_frame(
            model_rgb,
            &rgb_network_input(&video.frames[i]),
            &ann,
            &cfg.fusion,
        )?;
        Ok(ann)
    };
    spatial_pass(0)?;
    for i in 0..n {
        let t = Instant::now();
        annotations.push(spatial_pass(i)?);
        spatial.push(t.elapsed().as_secs_f64() * 1e3);
    }

    let temporal_pass = |start: usize| -> Result<()> {
        let flows = (start..start + FLOW_STACK_LEN)
            .map(|i| estimate_flow(&video.frames[i], &video.frames[i + 1], &cfg.flow))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&FlowField> = flows.iter().collect();
        let input = flow_network_input(&refs, cfg.flow_bound)?;
        let span = &annotations[start..=start + FLOW_STACK_LEN];
        let primary = match cfg.flow_primary {
            FlowPrimaryMethod::Method2 => span
                .iter()
                .map(|a| a.primary)
                .reduce(|a, b| a.bounding_union(&b))
                .expect("non-empty span"),
            FlowPrimaryMethod::Method1 => {
                let b = span[0].primary;
                flow_primary_max_magnitude(&flows[0], b.width() as usize, b.height() as usize)?
            }
        };
        let mut secondary: Vec<BoundingBox> =
            span.iter().flat_map(|a| a.secondary.clone()).collect();
        secondary.sort_by(|a, b| iou(b, &primary).total_cmp(&iou(a, &primary)));
        secondary.truncate(cfg.filter.max_secondary.max(1));
        let ann = RegionAnnotation {
            primary,
            secondary,
            frame_id: start,
        };
        predict_frame(model_flow, &input, &ann, &cfg.fusion)?;
        Ok(())
    };
    temporal_pass(0)?;
    let mut temporal = Vec::new();
    for g in 0..n / FLOW_STACK_LEN {
        let start = (g * FLOW_STACK_LEN).min(n - FLOW_STACK_LEN - 1);
        let t = Instant::now();
        temporal_pass(start)?;
        temporal.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyReport {
        per_frame_spatial_ms: DistributionSummary::from_samples(&spatial),
        per_stack_temporal_ms: DistributionSummary::from_samples(&temporal),
        analytic_accumulation_s: latency_model(video.fps, FLOW_STACK_LEN),
        baseline_clip_accumulation_s: latency_model(video.fps, CLIP_BASELINE_FRAMES),
        spatial_samples_ms: spatial,
        temporal_samples_ms: temporal,
    })
}

/// `stream,iteration,learning_rate,total,cls,reg,alpha` rows.
pub fn metrics_csv(logs: &[StepLog]) -> String {
    let mut out = String::from("stream,iteration,learning_rate,total,cls,reg,alpha\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            l.stream.name(),
            l.iteration,
            l.learning_rate,
            l.loss.total,
            l.loss.cls,
            l.loss.reg,
            l.loss.alpha
        );
    }
    out
}

pub fn per_class_csv(report: &EvalReport) -> String {
    let mut out = String::from("class,accuracy\n");
    for (k, a) in report.per_class_accuracy.iter().enumerate() {
        let _ = writeln!(out, "{k},{a}");
    }
    out
}

pub fn confusion_csv(report: &EvalReport) -> String {
    let k = report.confusion.len();
    let mut out = String::from("true");
    for p in 0..k {
        let _ = write!(out, ",pred_{p}");
    }
    out.push('\n');
    for (t, row) in report.confusion.iter().enumerate() {
        let _ = write!(out, "{t}");
        for c in row {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

pub fn latency_histogram_csv(report: &LatencyReport, bins: usize) -> String {
    let mut out = String::from("stream,bin_start_ms,bin_end_ms,count\n");
    for (name, samples) in [
        ("spatial", &report.spatial_samples_ms),
        ("temporal", &report.temporal_samples_ms),
    ] {
        for (lo, hi, c) in histogram(samples, bins) {
            let _ = writeln!(out, "{name},{lo},{hi},{c}");
        }
    }
    out
}

/// Writes `report.json`, `metrics.csv`, `per_class.csv`, `confusion.csv`
/// and one checkpoint per trained stream into `dir`.
pub fn write_experiment(dir: &Path, result: &ExperimentResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&result.report)? + "\n",
    )?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&result.logs))?;
    std::fs::write(dir.join("per_class.csv"), per_class_csv(&result.report))?;
    std::fs::write(dir.join("confusion.csv"), confusion_csv(&result.report))?;
    if let Some(m) = &result.rgb {
        m.save(&dir.join("rgb.wmr"))?;
    }
    if let Some(m) = &result.flow {
        m.save(&dir.join("flow.wmr"))?;
    }
    Ok(())
}
