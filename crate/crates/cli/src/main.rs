mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wmr_core::flow::estimate_flow;
use wmr_core::gradcheck::{gradient_suite, DEFAULT_EPS};
use wmr_core::net::Architecture;
use wmr_core::pipeline::{
    confusion_csv, evaluate, latency_histogram_csv, measure_latency, metrics_csv, per_class_csv,
    prepare_manifest, prepare_synthetic, train_stream, FlowPrimaryMethod, PipelineConfig,
    PreparedDataset, StreamKind, StreamSelection,
};
use wmr_core::region::{
    filter_secondary, format_proposals, load_detections, primary_or_frame, selective_search,
};
use wmr_core::runtime::{latency_model, LatencyReport, FLOW_STACK_LEN};
use wmr_core::synth::{
    generate_dataset, generate_video, read_manifest, simulated_detections, video_seed, Split,
    DETECTIONS_FILE,
};
use wmr_core::{Error, Model64, Result};

#[derive(Parser)]
#[command(
    name = "wmr",
    about = "Weighted multi-region two-stream action recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the dataset and its manifest.
    GenData(Common),
    /// Run selective search and the secondary-region filter, dump regions.
    Propose(Common),
    /// Compute and cache the optical flow of every consecutive frame pair.
    Flow(Common),
    /// Train the selected streams.
    Train(Common),
    /// Video-level accuracy and confusion matrix of trained checkpoints.
    Eval(Common),
    /// Accumulation latency model and measured per-frame latency.
    Latency(Common),
    /// One train/eval per dropout ratio and/or alpha value.
    Sweep(Common),
    /// Finite-difference check of every differentiable op.
    Gradcheck(Common),
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset manifest; without it the synthetic set is generated in memory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory holding rgb.wmr / flow.wmr checkpoints.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = config::parse_stream)]
    stream: Option<StreamSelection>,
    #[arg(long, value_parser = config::parse_flow_primary)]
    flow_primary: Option<FlowPrimaryMethod>,
    #[arg(long)]
    l: Option<f64>,
    #[arg(long)]
    u: Option<f64>,
    /// Regression loss weight; a comma-separated list for `sweep`.
    #[arg(long = "alpha", value_parser = config::parse_list)]
    alpha_list: Option<config::FloatList>,
    #[arg(skip)]
    alpha: Option<f64>,
    /// Dropout ratio; a comma-separated list for `sweep`.
    #[arg(long = "dropout", value_parser = config::parse_list)]
    dropout: Option<config::FloatList>,
    #[arg(long)]
    w_primary: Option<f64>,
    #[arg(long)]
    w_rgb: Option<f64>,
    /// Training iterations per stream.
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    fps: Option<f64>,
    /// Frames accumulated before a prediction (latency model).
    #[arg(long)]
    accumulation: Option<usize>,
}

fn out_dir(common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("wmr-out"))
}

fn single(values: &Option<config::FloatList>, flag: &str) -> Result<Option<f64>> {
    match values.as_ref().map(|v| v.0.as_slice()) {
        None => Ok(None),
        Some([v]) => Ok(Some(*v)),
        Some(_) => Err(Error::config(format!("--{flag} takes a single value here"))),
    }
}

fn load_dataset(
    common: &Common,
    cfg: &PipelineConfig,
    splits: &[Split],
) -> Result<PreparedDataset> {
    match &common.data {
        Some(path) => prepare_manifest(&read_manifest(path)?, splits, cfg),
        None => prepare_synthetic(cfg),
    }
}

fn checkpoint_dir(common: &Common) -> PathBuf {
    common.checkpoint.clone().unwrap_or_else(|| out_dir(common))
}

fn load_models(dir: &Path, stream: StreamSelection) -> Result<(Option<Model64>, Option<Model64>)> {
    let mut rgb = None;
    let mut flow = None;
    for kind in stream.streams() {
        let model = Model64::load(&dir.join(format!("{}.wmr", kind.name())))?;
        match kind {
            StreamKind::Rgb => rgb = Some(model),
            StreamKind::Flow => flow = Some(model),
        }
    }
    Ok((rgb, flow))
}

fn gen_data(common: &Common, cfg: &PipelineConfig) -> Result<()> {
    let dir = out_dir(common);
    let manifest = generate_dataset(&cfg.synth, &dir)?;
    config::write_resolved(cfg, &dir)?;
    println!(
        "wrote {} videos and {}",
        manifest.entries.len(),
        dir.join("manifest.json").display()
    );
    Ok(())
}

fn require_data(common: &Common) -> Result<&Path> {
    common
        .data
        .as_deref()
        .ok_or_else(|| Error::config("this command needs --data <manifest>"))
}

fn propose(common: &Common, cfg: &PipelineConfig) -> Result<()> {
    let manifest = read_manifest(require_data(common)?)?;
    let out = out_dir(common);
    for entry in &manifest.entries {
        let video = manifest.load_video(entry, cfg.synth.fps)?;
        let det_path = manifest.video_dir(entry).join(DETECTIONS_FILE);
        let detections = if det_path.is_file() {
            load_detections(&det_path, video.frames.len())?
        } else {
            BTreeMap::new()
        };
        let mut all = Vec::new();
        let mut primaries = Vec::new();
        let mut secondaries = Vec::new();
        for (i, frame) in video.frames.iter().enumerate() {
            let dets = detections.get(&i).map(Vec::as_slice).unwrap_or(&[]);
            let primary = primary_or_frame(dets, frame.width(), frame.height());
            let proposals = selective_search(frame, i, &cfg.search);
            let ann = filter_secondary(&proposals, &primary, &cfg.filter);
            all.push((i, proposals.boxes().to_vec()));
            primaries.push((i, vec![primary]));
            secondaries.push((i, ann.secondary));
        }
        let dir = out.join(&entry.path);
        std::fs::create_dir_all(&dir)?;
        let dump = |sets: &[(usize, Vec<_>)]| {
            format_proposals(sets.iter().map(|(i, b)| (*i, b.as_slice())))
        };
        std::fs::write(dir.join("proposals.txt"), dump(&all))?;
        std::fs::write(dir.join("primary.txt"), dump(&primaries))?;
        std::fs::write(dir.join("secondary.txt"), dump(&secondaries))?;
    }
    config::write_resolved(cfg, &out)?;
    println!(
        "wrote regions for {} videos under {}",
        manifest.entries.len(),
        out.display()
    );
    Ok(())
}

fn flow(common: &Common, cfg: &PipelineConfig) -> Result<()> {
    let manifest = read_manifest(require_data(common)?)?;
    let out = out_dir(common);
    let mut pairs = 0;
    for entry in &manifest.entries {
        let video = manifest.load_video(entry, cfg.synth.fps)?;
        let dir = out.join(&entry.path);
        std::fs::create_dir_all(&dir)?;
        for (i, pair) in video.frames.windows(2).enumerate() {
            estimate_flow(&pair[0], &pair[1], &cfg.flow)?
                .write(&dir.join(format!("{i:04}.wflo")))?;
            pairs += 1;
        }
    }
    config::write_resolved(cfg, &out)?;
    println!("wrote {pairs} flow fields under {}", out.display());
    Ok(())
}

fn train(common: &Common, cfg: &PipelineConfig) -> Result<()> {
    let out = out_dir(common);
    config::write_resolved(cfg, &out)?;
    let data = load_dataset(common, cfg, &[Split::Train])?;
    let mut logs = Vec::new();
    for kind in cfg.stream.streams() {
        let model = train_stream(&data, kind, cfg, &mut logs)?;
        model.save(&out.join(format!("{}.wmr", kind.name())))?;
        if let Some(last) = logs.last() {
            println!(
                "{} stream: final loss {:.4} (cls {:.4}, reg {:.4})",
                kind.name(),
                last.loss.total,
                last.loss.cls,
                last.loss.reg
            );
        }
    }
    std::fs::write(out.join("metrics.csv"), metrics_csv(&logs))?;
    Ok(())
}

fn eval(common: &Common, cfg: &PipelineConfig) -> Result<()> {
    let out = out_dir(common);
    config::write_resolved(cfg, &out)?;
    let (rgb, flow) = load_models(&checkpoint_dir(common), cfg.stream)?;
    let data = load_dataset(common, cfg, &[Split::Test])?;
    let report = evaluate(rgb.as_ref(), flow.as_ref(), &data.test, data.classes, cfg)?;
    std::fs::write(out.join("report.json"), serde_json_pretty(&report)?)?;
    std::fs::write(out.join("per_class.csv"), per_class_csv(&report))?;
    std::fs::write(out.join("confusion.csv"), confusion_csv(&report))?;
    println!(
        "accuracy {:.4} over {} videos",
        report.accuracy,
        report.videos.len()
    );
    if let Some(a) = report.rgb_accuracy {
        println!("rgb-only {a:.4}");
    }
    if let Some(a) = report.flow_accuracy {
        println!("flow-only {a:.4}");
    }
    Ok(())
}

fn serde_json_pretty<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn latency(common: &Common, cfg: &PipelineConfig) -> Result<()> {
    let fps = cfg.synth.fps;
    let frames = common.accumulation.unwrap_or(FLOW_STACK_LEN);
    println!("{:.4} s", latency_model(fps, frames));
    let Some(out) = &common.out else {
        return Ok(());
    };
    let (rgb, flow) = match &common.checkpoint {
        Some(dir) => {
            let (r, f) = load_models(dir, StreamSelection::Both)?;
            (r.expect("rgb model"), f.expect("flow model"))
        }
        None => (
            Model64::new(Architecture::small(1, cfg.synth.class_count), cfg.seed)?,
            Model64::new(
                Architecture::small(2 * FLOW_STACK_LEN, cfg.synth.class_count),
                cfg.seed,
            )?,
        ),
    };
    let seed = video_seed(cfg.synth.seed, 0);
    let (video, truth) = generate_video(0, &cfg.synth, seed)?;
    let dets = simulated_detections(
        &truth,
        cfg.synth.detector_jitter,
        seed,
        cfg.synth.size,
        cfg.synth.size,
    );
    let report: LatencyReport = measure_latency(&rgb, &flow, &video, &dets, cfg)?;
    config::write_resolved(cfg, out)?;
    std::fs::write(out.join("latency.json"), serde_json_pretty(&report)?)?;
    std::fs::write(
        out.join("latency_histogram.csv"),
        latency_histogram_csv(&report, 10),
    )?;
    println!(
        "spatial per frame: mean {:.2} ms, p95 {:.2} ms; temporal per stack: mean {:.2} ms",
        report.per_frame_spatial_ms.mean,
        report.per_frame_spatial_ms.p95,
        report.per_stack_temporal_ms.mean
    );
    println!("clip baseline {:.4} s", report.baseline_clip_accumulation_s);
    Ok(())
}

fn sweep(common: &Common, cfg: &PipelineConfig) -> Result<()> {
    let out = out_dir(common);
    config::write_resolved(cfg, &out)?;
    let dropouts = common
        .dropout
        .clone()
        .map(|v| v.0)
        .unwrap_or_else(|| vec![cfg.train.dropout_ratio]);
    let alphas = common
        .alpha_list
        .clone()
        .map(|v| v.0)
        .unwrap_or_else(|| vec![cfg.fusion.alpha]);
    let data = load_dataset(common, cfg, &[Split::Train, Split::Test])?;
    let mut csv = String::from("dropout,alpha,accuracy,rgb_accuracy,flow_accuracy\n");
    for &d in &dropouts {
        for &a in &alphas {
            let mut point = cfg.clone();
            point.train.dropout_ratio = d;
            point.fusion.alpha = a;
            point.validate()?;
            let result = wmr_core::pipeline::run_experiment(&data, &point)?;
            let r = &result.report;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                csv,
                "{d},{a},{},{},{}",
                r.accuracy,
                opt(r.rgb_accuracy),
                opt(r.flow_accuracy)
            );
            println!("dropout {d} alpha {a}: accuracy {:.4}", r.accuracy);
        }
    }
    std::fs::write(out.join("sweep.csv"), csv)?;
    Ok(())
}

fn gradcheck(common: &Common) -> Result<()> {
    let rows = gradient_suite(common.seed.unwrap_or(7), DEFAULT_EPS)?;
    println!("{:<32} {:>8} {:>14}", "op", "elements", "max rel error");
    let mut ok = true;
    for r in &rows {
        println!(
            "{:<32} {:>8} {:>14.3e}",
            r.name, r.elements, r.max_relative_error
        );
        ok &= r.max_relative_error < 1e-4;
    }
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("gradcheck.json"), serde_json_pretty(&rows)?)?;
    }
    if ok {
        Ok(())
    } else {
        Err(Error::numeric("gradient check above 1e-4"))
    }
}

fn run(command: Command) -> Result<()> {
    let common = match &command {
        Command::GenData(c)
        | Command::Propose(c)
        | Command::Flow(c)
        | Command::Train(c)
        | Command::Eval(c)
        | Command::Latency(c)
        | Command::Sweep(c)
        | Command::Gradcheck(c) => c.clone(),
    };
    let mut common = common;
    if !matches!(command, Command::Sweep(_)) {
        common.alpha = single(&common.alpha_list, "alpha")?;
    }
    let mut cfg = config::resolve(&common)?;
    if !matches!(command, Command::Sweep(_)) {
        if let Some(d) = single(&common.dropout, "dropout")? {
            cfg.train.dropout_ratio = d;
            cfg.validate()?;
        }
    }
    match command {
        Command::GenData(_) => gen_data(&common, &cfg),
        Command::Propose(_) => propose(&common, &cfg),
        Command::Flow(_) => flow(&common, &cfg),
        Command::Train(_) => train(&common, &cfg),
        Command::Eval(_) => eval(&common, &cfg),
        Command::Latency(_) => latency(&common, &cfg),
        Command::Sweep(_) => sweep(&common, &cfg),
        Command::Gradcheck(_) => gradcheck(&common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
