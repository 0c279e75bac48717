//! Acceptance suite: one PASS/FAIL line per criterion. Runs the default
//! pipeline on seeds 1-5 (seed 1 twice), so it takes several minutes.
//! Set RGALIGN_ACCEPT_OUT to keep the run directories.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rgalign::io::{parse_metrics_csv, read_json, read_text};
use rgalign::pipeline::{AlignSummary, MANIFEST, STAGE1_METRICS, TIMINGS};
use rgalign::{PipelineConfig, Round, Run, RunManifest};
use rgalign_core::align::AlignConfig;
use rgalign_core::metrics::evaluate;
use support::gradcases::{check, check_config, Loss, H};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Line {
    pass: bool,
    name: &'static str,
    detail: String,
}

fn gradients() -> Line {
    let t = Instant::now();
    let cfg = check_config();
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for loss in Loss::ALL {
        for seed in 0..20 {
            let rep = check(loss, seed, &cfg, H);
            worst = worst.max(rep.max_rel_error);
            if !rep.passed {
                failed.push(format!("{loss:?}/{seed}"));
            }
        }
    }
    let mut sharp_worst = 0.0f64;
    for loss in [Loss::Cl, Loss::Joint] {
        for seed in 0..20 {
            let rep = check(loss, seed, &AlignConfig::default(), 1e-4);
            sharp_worst = sharp_worst.max(rep.max_rel_error);
            if !rep.passed {
                failed.push(format!("{loss:?}/{seed}/tau=0.05"));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Line {
        pass: failed.is_empty() && secs < 120.0,
        name: "gradient checks, 5 losses x 20 seeds, h=1e-5, tol 1e-4, < 2 min",
        detail: format!(
            "max rel err {worst:.2e} (contrastive terms at tau=0.1); tau=0.05 at h=1e-4: {sharp_worst:.2e}; {} failing, {secs:.1}s {failed:?}",
            failed.len()
        ),
    }
}

fn metric_oracles() -> Line {
    let perms = support::oracles::all_permutations();
    let mut worst = 0.0f64;
    for seed in 0..1000 {
        let items = support::oracles::instance(seed);
        let r = evaluate(&items, seed, "oracle").unwrap();
        let got = [r.gauc, r.recall_at_3, r.recall_at_5, r.ndcg_at_3, r.ndcg_at_5, r.mrr, r.ihr.unwrap()];
        for (g, w) in got.iter().zip(support::oracles::report(&items, &perms)) {
            worst = worst.max((g - w).abs());
        }
    }
    Line {
        pass: worst <= 1e-9,
        name: "metric oracle equivalence on 1000 instances",
        detail: format!("max abs diff {worst:.1e}"),
    }
}

fn identities() -> Line {
    let all = support::identities::identities();
    let broken: Vec<&str> = all.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    Line {
        pass: broken.is_empty(),
        name: "closed-form loss identities",
        detail: format!("{}/{} hold {broken:?}", all.len() - broken.len(), all.len()),
    }
}

fn strategies() -> Line {
    let sets = support::fixtures::fixtures();
    let bad: Vec<String> = sets.iter().flat_map(support::fixtures::violations).collect();
    Line {
        pass: sets.len() == 50 && bad.is_empty(),
        name: "strategy semantics on 50 fixtures",
        detail: format!("{} violations {bad:?}", bad.len()),
    }
}

struct SeedRun {
    dir: PathBuf,
    secs: f64,
}

fn run_seed(root: &Path, seed: u64, tag: &str) -> SeedRun {
    let mut cfg = PipelineConfig::default();
    cfg.apply_seed(seed);
    let dir = root.join(format!("seed-{seed}{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    let run = Run::new(cfg, &dir, 1).unwrap();
    let t = Instant::now();
    run.run_all().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    SeedRun {
        dir,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn n3(dir: &Path, file: &str, label: &str) -> f64 {
    let rows = parse_metrics_csv(&read_text(&dir.join(file)).unwrap()).unwrap();
    rows.iter().find(|r| r.label == label).unwrap_or_else(|| panic!("{label} in {file}")).ndcg_at_3
}

fn stage1_effect(runs: &[SeedRun]) -> Line {
    let mut wins = 0;
    let mut gaps = Vec::new();
    let mut slowest = 0.0f64;
    for r in runs {
        let gap = n3(&r.dir, STAGE1_METRICS, "reward_model") - n3(&r.dir, STAGE1_METRICS, "baseline");
        wins += usize::from(gap >= 0.02);
        gaps.push(format!("{gap:+.4}"));
        let t: BTreeMap<String, f64> = read_json(&r.dir.join(TIMINGS)).unwrap();
        slowest = slowest.max(t["gen-data"] + t["stage1"]);
    }
    Line {
        pass: wins >= 4 && slowest < 180.0,
        name: "Stage 1: oracle-query QE-Rec beats omega=1 baseline by >= 0.02 NDCG@3 on >= 4/5 seeds, < 3 min",
        detail: format!("{wins}/5 seeds, gaps {gaps:?}, slowest {slowest:.1}s"),
    }
}

/// Mean cos per CL epoch from the alignment log.
fn cl_cos(dir: &Path) -> Vec<f64> {
    let log = read_text(&dir.join(Round(1).align_log(rgalign_core::align::AlignMode::SftCl))).unwrap();
    log.lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[1] == "cl")
        .map(|f| f[3].parse().unwrap())
        .collect()
}

fn stage2_effect(runs: &[SeedRun]) -> Line {
    let mut up = 0;
    let mut monotone = 0;
    let mut deltas = Vec::new();
    for r in runs {
        let s: AlignSummary = read_json(&r.dir.join(Round(1).align_summary(rgalign_core::align::AlignMode::SftCl))).unwrap();
        up += usize::from(s.reward_eval_after > s.reward_eval_before);
        deltas.push(format!("{:+.4}", s.reward_eval_after - s.reward_eval_before));
        let cos = cl_cos(&r.dir);
        let tail = &cos[cos.len() / 2..];
        monotone += usize::from(tail.windows(2).all(|w| w[1] > w[0]));
    }
    Line {
        pass: up >= 4 && monotone == runs.len(),
        name: "Stage 2: SFT+CL raises held-out reward on >= 4/5 seeds; cos rises over last half of CL epochs",
        detail: format!("reward up on {up}/5 {deltas:?}, monotone cos on {monotone}/5"),
    }
}

fn stage3_effect(runs: &[SeedRun]) -> Line {
    let mode = rgalign_core::align::AlignMode::SftCl;
    let (mut ok, mut better) = (0, 0);
    let mut deltas = Vec::new();
    for r in runs {
        let before = n3(&r.dir, STAGE1_METRICS, "qerec");
        let after = n3(&r.dir, &Round(1).stage3_metrics(mode), &format!("{}_recalibrated", mode.as_str()));
        ok += usize::from(after >= before - 0.005);
        better += usize::from(after > before);
        deltas.push(format!("{:+.4}", after - before));
    }
    Line {
        pass: ok == runs.len() && better * 2 > runs.len(),
        name: "Stage 3: recalibrated NDCG@3 >= Stage 1 - 0.005 on all seeds, better on a majority",
        detail: format!("non-regression {ok}/5, improved {better}/5 {deltas:?}"),
    }
}

fn determinism(a: &SeedRun, b: &SeedRun) -> Line {
    let read = |p: &Path| std::fs::read(p).unwrap();
    let manifest: RunManifest = read_json(&a.dir.join(MANIFEST)).unwrap();
    let mut differ: Vec<String> = manifest
        .stages
        .values()
        .flatten()
        .filter(|art| read(&a.dir.join(&art.path)) != read(&b.dir.join(&art.path)))
        .map(|art| art.path.clone())
        .collect();
    if read(&a.dir.join(MANIFEST)) != read(&b.dir.join(MANIFEST)) {
        differ.push(MANIFEST.into());
    }
    let n = manifest.stages.values().map(Vec::len).sum::<usize>();
    let slowest = a.secs.max(b.secs);
    Line {
        pass: differ.is_empty() && slowest < 600.0,
        name: "determinism: run-all twice is byte-identical, < 10 min single-threaded",
        detail: format!("{n} artifacts, {} differ {differ:?}, slowest run {slowest:.1}s", differ.len()),
    }
}

fn main() {
    let keep = std::env::var_os("RGALIGN_ACCEPT_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());

    let mut lines = vec![gradients(), metric_oracles(), identities(), strategies()];
    let runs: Vec<SeedRun> = SEEDS.iter().map(|s| run_seed(&root, *s, "")).collect();
    let again = run_seed(&root, SEEDS[0], "-repeat");
    lines.push(stage1_effect(&runs));
    lines.push(stage2_effect(&runs));
    lines.push(stage3_effect(&runs));
    lines.push(determinism(&runs[0], &again));

    println!("acceptance");
    for (i, l) in lines.iter().enumerate() {
        println!("criterion {}: {} - {}: {}", i + 1, if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("acceptance result: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
