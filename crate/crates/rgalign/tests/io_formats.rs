use proptest::prelude::*;
use rgalign::io::*;
use rgalign::AppError;
use rgalign_core::metrics::MetricReport;
use rgalign_core::reasoner::ReasonerModel;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Row {
    id: u64,
    vals: Vec<f64>,
}

#[test]
fn json_and_jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![Row { id: 1, vals: vec![0.1, -2.5e-17] }, Row { id: 2, vals: vec![] }];
    let j = dir.path().join("nested/rows.json");
    write_json(&j, &rows).unwrap();
    assert_eq!(read_json::<Vec<Row>>(&j).unwrap(), rows);
    let l = dir.path().join("rows.jsonl");
    write_jsonl(&l, &rows).unwrap();
    assert_eq!(read_jsonl::<Row>(&l).unwrap(), rows);
    assert_eq!(read_text(&l).unwrap().lines().count(), 2);
}

#[test]
fn jsonl_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let l = dir.path().join("bad.jsonl");
    write_text(&l, "{\"id\":1,\"vals\":[]}\n{\"id\":\"x\"}\n").unwrap();
    match read_jsonl::<Row>(&l) {
        Err(AppError::Json { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a JSON error, got {other:?}"),
    }
    assert!(matches!(read_json::<Row>(&dir.path().join("missing.json")), Err(AppError::Io { .. })));
}

#[test]
fn checkpoint_checks_kind_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.json");
    let m = ReasonerModel::new(16, 4, 3).unwrap();
    save_checkpoint(&p, "reasoner", &m).unwrap();
    let back: ReasonerModel = load_checkpoint(&p, "reasoner").unwrap();
    assert_eq!(back.fingerprint(), m.fingerprint());
    assert!(matches!(load_checkpoint::<ReasonerModel>(&p, "qerec"), Err(AppError::Invalid(_))));

    let mut raw: serde_json::Value = read_json(&p).unwrap();
    raw["format_version"] = serde_json::json!(FORMAT_VERSION + 1);
    write_json(&p, &raw).unwrap();
    match load_checkpoint::<ReasonerModel>(&p, "reasoner") {
        Err(e @ AppError::FormatVersion { .. }) => assert_eq!(e.exit_code(), 2),
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn file_hash_tracks_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.txt");
    write_text(&p, "abc").unwrap();
    let h = file_hash(&p).unwrap();
    assert_eq!(h, file_hash(&p).unwrap());
    write_text(&p, "abd").unwrap();
    assert_ne!(h, file_hash(&p).unwrap());
}

fn report(vals: [f64; 6], ihr: Option<f64>, label: String) -> MetricReport {
    MetricReport {
        gauc: vals[0],
        recall_at_3: vals[1],
        recall_at_5: vals[2],
        ndcg_at_3: vals[3],
        ndcg_at_5: vals[4],
        mrr: vals[5],
        ihr,
        n_impressions: 12,
        n_users: 7,
        n_no_relevant: 0,
        n_gauc_excluded: 0,
        seed: 4,
        label,
    }
}

proptest! {
    #[test]
    fn metrics_csv_round_trips_to_ten_digits(
        vals in proptest::array::uniform6(0.0f64..1.0),
        ihr in proptest::option::of(0.0f64..1.0),
        label in "[a-z_]{1,12}",
    ) {
        let r = report(vals, ihr, label);
        let back = parse_metrics_csv(&metrics_csv(std::slice::from_ref(&r))).unwrap();
        prop_assert_eq!(back.len(), 1);
        let b = &back[0];
        for (x, y) in [(b.gauc, r.gauc), (b.recall_at_3, r.recall_at_3), (b.ndcg_at_5, r.ndcg_at_5), (b.mrr, r.mrr)] {
            prop_assert!((x - y).abs() <= 5e-11);
        }
        prop_assert_eq!(b.ihr.is_some(), r.ihr.is_some());
        prop_assert_eq!(&b.label, &r.label);
        prop_assert_eq!((b.n_impressions, b.n_users, b.seed), (12, 7, 4));
    }
}

#[test]
fn metrics_csv_rejects_bad_header() {
    assert!(matches!(parse_metrics_csv("nope\n"), Err(AppError::Invalid(_))));
}
