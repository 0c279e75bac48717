#![allow(dead_code)]

use std::path::Path;

use rgalign::cli::run_cli;
use rgalign::io::write_json;
use rgalign::PipelineConfig;

/// A few-second configuration: a few hundred users and short schedules.
pub fn small_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.generator.n_users = 300;
    cfg.generator.n_intents = 40;
    cfg.qerec.epochs = 2;
    cfg.align.sft_epochs = 1;
    cfg.align.epochs = 2;
    cfg.stage2_samples = 60;
    cfg.apply_seed(seed);
    cfg
}

/// Runs the CLI in-process and returns (exit code, stdout, stderr).
pub fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["rgalign"];
    full.extend_from_slice(args);
    let code = run_cli(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

/// Writes `cfg` under `dir` and returns the file path as a string.
pub fn config_file(dir: &Path, cfg: &PipelineConfig) -> String {
    let p = dir.join("small.json");
    write_json(&p, cfg).unwrap();
    p.to_string_lossy().into_owned()
}

/// Full small run through the CLI; panics with stderr on failure.
pub fn run_all(out: &Path, cfg: &PipelineConfig, workers: usize) {
    let conf = config_file(out.parent().unwrap(), cfg);
    let w = workers.to_string();
    let (code, _, err) = cli(&["--config", &conf, "--out", out.to_str().unwrap(), "--workers", &w, "run-all"]);
    assert_eq!(code, 0, "{err}");
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
