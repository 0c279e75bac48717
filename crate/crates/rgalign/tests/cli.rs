mod common;

use common::cli;

const SUBCOMMANDS: [&str; 9] = [
    "gen-data",
    "train-stage1",
    "gen-candidates",
    "select",
    "align",
    "calibrate",
    "eval",
    "report",
    "run-all",
];

#[test]
fn help_lists_flags_with_defaults() {
    for sub in SUBCOMMANDS {
        let (code, out, _) = cli(&[sub, "--help"]);
        assert_eq!(code, 0, "{sub}");
        for needle in ["--seed", "--out", "--workers", "--config", "[default: 0.7]", "[default: 0.05]", "[default: 1.0]", "[default: 0.01]", "[default: 5]", "[default: 0.1]"] {
            assert!(out.contains(needle), "`{sub} --help` lacks {needle}:\n{out}");
        }
    }
    let (code, out, _) = cli(&["--help"]);
    assert_eq!(code, 0);
    for sub in SUBCOMMANDS {
        assert!(out.contains(sub), "top-level help lacks {sub}");
    }
    assert!(cli(&["select", "--help"]).1.contains("v1, v2, v3 or v4"));
    assert!(cli(&["align", "--help"]).1.contains("sft, sft-dpo or sft-cl"));
}

#[test]
fn invalid_usage_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, _, err) = cli(&["--out", out, "select", "--strategy", "v5"]);
    assert_eq!(code, 1);
    assert!(err.contains("v5"), "{err}");
    assert_eq!(cli(&["--out", out, "align", "--mode", "rlhf"]).0, 1);
    assert_eq!(cli(&["--out", out, "no-such-command"]).0, 1);
    assert_eq!(cli(&["--out", out, "--tau", "0", "report"]).0, 1);
    assert_eq!(cli(&["--out", out, "--omega", "1.5", "report"]).0, 1);
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, _, err) = cli(&["--out", out, "train-stage1"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error:"), "{err}");
    assert_eq!(cli(&["--out", out, "eval", "--checkpoint", "/nonexistent/ck.json"]).0, 2);
}

#[test]
fn bad_config_file_is_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.json");
    std::fs::write(&conf, "{\"no_such_field\": 1}").unwrap();
    let (code, _, err) = cli(&["--config", conf.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "gen-data"]);
    assert_eq!(code, 1, "{err}");
}
