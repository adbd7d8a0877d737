//! Run configuration: TOML file values overridden by command-line flags.

use std::path::Path;

use wmr_core::pipeline::{FlowPrimaryMethod, PipelineConfig, StreamSelection};
use wmr_core::{Error, Result};

use crate::Common;

pub const RESOLVED_CONFIG: &str = "config.toml";

pub fn load(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// File config with every flag that was given applied on top.
pub fn resolve(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(stream) = common.stream {
        cfg.stream = stream;
    }
    if let Some(m) = common.flow_primary {
        cfg.flow_primary = m;
    }
    if let Some(l) = common.l {
        cfg.filter.l = l;
    }
    if let Some(u) = common.u {
        cfg.filter.u = u;
    }
    if let Some(a) = common.alpha {
        cfg.fusion.alpha = a;
    }
    if let Some(w) = common.w_primary {
        cfg.fusion = cfg.fusion.with_primary_weight(w);
    }
    if let Some(w) = common.w_rgb {
        cfg.fusion = cfg.fusion.with_rgb_weight(w);
    }
    if let Some(n) = common.iters {
        cfg.train.max_iterations = n;
    }
    if let Some(fps) = common.fps {
        cfg.synth.fps = fps;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_resolved(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string(cfg).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(dir.join(RESOLVED_CONFIG), text)?;
    Ok(())
}

pub fn parse_stream(s: &str) -> std::result::Result<StreamSelection, String> {
    match s {
        "rgb" => Ok(StreamSelection::Rgb),
        "flow" => Ok(StreamSelection::Flow),
        "both" => Ok(StreamSelection::Both),
        _ => Err(format!("expected rgb, flow or both, got {s}")),
    }
}

pub fn parse_flow_primary(s: &str) -> std::result::Result<FlowPrimaryMethod, String> {
    match s {
        "method1" => Ok(FlowPrimaryMethod::Method1),
        "method2" => Ok(FlowPrimaryMethod::Method2),
        _ => Err(format!("expected method1 or method2, got {s}")),
    }
}

#[derive(Clone, Debug)]
pub struct FloatList(pub Vec<f64>);

/// Comma-separated list of reals.
pub fn parse_list(s: &str) -> std::result::Result<FloatList, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(FloatList)
}
