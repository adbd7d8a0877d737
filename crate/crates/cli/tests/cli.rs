use std::path::Path;
use std::process::{Command, Output};

fn wmr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmr"))
        .args(args)
        .output()
        .expect("run wmr")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, "[synth]\ntrain_videos = 8\ntest_videos = 4\n").unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn latency_prints_accumulation_model() {
    let out = wmr(&["latency", "--fps", "30", "--accumulation", "10"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "0.3333 s");
    let out = wmr(&["latency", "--accumulation", "16"]);
    assert_eq!(stdout(&out).trim(), "0.5333 s");
}

#[test]
fn unknown_flag_and_bad_values_exit_one() {
    assert_eq!(wmr(&["latency", "--bogus"]).status.code(), Some(1));
    assert_eq!(wmr(&["train", "--stream", "depth"]).status.code(), Some(1));
    assert_eq!(wmr(&["train", "--dropout", "1.5"]).status.code(), Some(1));
    assert_eq!(
        wmr(&["train", "--l", "0.95", "--u", "0.5"]).status.code(),
        Some(1)
    );
    assert_eq!(
        wmr(&["eval", "--config", "/nonexistent/run.toml"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(wmr(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "alhpa = 0.3\n").unwrap();
    let out = wmr(&["latency", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alhpa"));
}

#[test]
fn gradcheck_passes() {
    let out = wmr(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("roi_pool"));
}

#[test]
fn flags_override_config_and_resolved_config_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let out = wmr(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert!(out.status.success());
    let resolved = std::fs::read_to_string(data.join("config.toml")).unwrap();
    let value: toml::Table = resolved.parse().unwrap();
    assert_eq!(value["seed"].as_integer(), Some(11));
    assert_eq!(value["synth"]["seed"].as_integer(), Some(11));
    assert_eq!(value["synth"]["train_videos"].as_integer(), Some(8));

    let manifest = data.join("manifest.json");
    let entries: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(entries.len(), 12);
    for e in &entries {
        assert!(data
            .join(e["path"].as_str().unwrap())
            .join("0000.pgm")
            .is_file());
    }

    // the resolved config is itself a valid config
    let again = wmr(&[
        "latency",
        "--config",
        data.join("config.toml").to_str().unwrap(),
    ]);
    assert!(again.status.success());
}

#[test]
fn data_pipeline_commands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_owned();
    assert!(wmr(&["gen-data", "--config", &cfg, "--out", &p("data")])
        .status
        .success());
    let manifest = p("data/manifest.json");

    assert!(wmr(&[
        "propose",
        "--config",
        &cfg,
        "--data",
        &manifest,
        "--out",
        &p("regions")
    ])
    .status
    .success());
    let secondary =
        std::fs::read_to_string(dir.path().join("regions/train/0000/secondary.txt")).unwrap();
    assert!(secondary.lines().count() > 0);

    assert!(wmr(&[
        "flow",
        "--config",
        &cfg,
        "--data",
        &manifest,
        "--out",
        &p("flow")
    ])
    .status
    .success());
    assert!(dir.path().join("flow/test/0003/0014.wflo").is_file());

    let run = wmr(&[
        "train",
        "--config",
        &cfg,
        "--data",
        &manifest,
        "--out",
        &p("run"),
        "--iters",
        "12",
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(metrics.starts_with("stream,iteration,learning_rate,total,cls,reg,alpha"));
    assert!(metrics.lines().any(|l| l.starts_with("flow,")));

    let ev = wmr(&[
        "eval",
        "--config",
        &cfg,
        "--data",
        &manifest,
        "--checkpoint",
        &p("run"),
        "--out",
        &p("eval"),
    ]);
    assert!(
        ev.status.success(),
        "{}",
        String::from_utf8_lossy(&ev.stderr)
    );
    for f in [
        "report.json",
        "per_class.csv",
        "confusion.csv",
        "config.toml",
    ] {
        assert!(dir.path().join("eval").join(f).is_file(), "{f}");
    }

    let lat = wmr(&["latency", "--checkpoint", &p("run"), "--out", &p("lat")]);
    assert!(lat.status.success());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("lat/latency.json")).unwrap(),
    )
    .unwrap();
    assert!(report["per_frame_spatial_ms"]["p95"].as_f64().unwrap() > 0.0);
}

#[test]
fn eval_without_checkpoint_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = wmr(&[
        "eval",
        "--checkpoint",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = wmr(&[
        "sweep",
        "--config",
        &cfg,
        "--iters",
        "6",
        "--dropout",
        "0.5,0.6,0.9",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("0.5,0.3,"));
    assert!(rows[2].starts_with("0.9,0.3,"));
}
