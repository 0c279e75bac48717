//! File formats: JSON and JSON Lines artifacts, versioned checkpoints and
//! CSV logs. Every writer produces deterministic bytes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rgalign_core::align::AlignEpoch;
use rgalign_core::hash::fnv1a64;
use rgalign_core::metrics::{MetricReport, CSV_HEADER};
use rgalign_core::qerec::EpochLog;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const FORMAT_VERSION: u32 = 1;

fn create(path: &Path) -> AppResult<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(AppError::io(path))?))
}

fn json_err(path: &Path, line: usize) -> impl FnOnce(serde_json::Error) -> AppError + '_ {
    move |source| AppError::Json {
        path: path.to_path_buf(),
        line,
        source,
    }
}

pub fn write_text(path: &Path, text: &str) -> AppResult<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(AppError::io(path))?;
    w.flush().map_err(AppError::io(path))
}

pub fn read_text(path: &Path) -> AppResult<String> {
    fs::read_to_string(path).map_err(AppError::io(path))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> AppResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(json_err(path, 0))?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> AppResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(json_err(path, 0))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> AppResult<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(json_err(path, 0))?;
        w.write_all(b"\n").map_err(AppError::io(path))?;
    }
    w.flush().map_err(AppError::io(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> AppResult<Vec<T>> {
    let f = fs::File::open(path).map_err(AppError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(AppError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(json_err(path, i + 1))?);
    }
    Ok(out)
}

/// FNV-1a of the file's bytes as 16 hex digits.
pub fn file_hash(path: &Path) -> AppResult<String> {
    let bytes = fs::read(path).map_err(AppError::io(path))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub kind: String,
    pub model: T,
}

pub fn save_checkpoint<T: Serialize>(path: &Path, kind: &str, model: &T) -> AppResult<()> {
    #[derive(Serialize)]
    struct Out<'a, T> {
        format_version: u32,
        kind: &'a str,
        model: &'a T,
    }
    write_json(
        path,
        &Out {
            format_version: FORMAT_VERSION,
            kind,
            model,
        },
    )
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, kind: &str) -> AppResult<T> {
    let ck: Checkpoint<serde_json::Value> = read_json(path)?;
    if ck.format_version != FORMAT_VERSION {
        return Err(AppError::FormatVersion {
            path: path.to_path_buf(),
            kind: ck.kind,
            found: ck.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if ck.kind != kind {
        return Err(AppError::Invalid(format!("{} holds a {} checkpoint, expected {kind}", path.display(), ck.kind)));
    }
    serde_json::from_value(ck.model).map_err(json_err(path, 0))
}

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Parses rows written by [`metrics_csv`] back into reports. Counters that
/// are not part of the CSV come back as zero.
pub fn parse_metrics_csv(text: &str) -> AppResult<Vec<MetricReport>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(AppError::Invalid("metrics CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.splitn(11, ',').collect();
            if f.len() != 11 {
                return Err(AppError::Invalid(format!("metrics CSV row has {} fields: {l}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| AppError::Invalid(format!("`{s}`: {e}")));
            let int = |s: &str| s.parse::<u64>().map_err(|e| AppError::Invalid(format!("`{s}`: {e}")));
            Ok(MetricReport {
                gauc: num(f[0])?,
                recall_at_3: num(f[1])?,
                recall_at_5: num(f[2])?,
                ndcg_at_3: num(f[3])?,
                ndcg_at_5: num(f[4])?,
                mrr: num(f[5])?,
                ihr: if f[6].is_empty() { None } else { Some(num(f[6])?) },
                n_impressions: int(f[7])? as usize,
                n_users: int(f[8])? as usize,
                n_no_relevant: 0,
                n_gauc_excluded: 0,
                seed: int(f[9])?,
                label: f[10].to_string(),
            })
        })
        .collect()
}

pub fn ranker_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,mean_w,grad_norm,lr\n");
    for e in log {
        s.push_str(&format!("{},{:.10},{:.10},{:.10},{:.10}\n", e.epoch, e.loss, e.mean_w, e.grad_norm, e.lr));
    }
    s
}

pub fn align_log_csv(log: &[AlignEpoch]) -> String {
    let mut s = String::from("epoch,phase,loss,mean_cos,grad_norm,lr\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{:.10},{:.10},{:.10},{:.10}\n",
            e.epoch,
            e.phase.as_str(),
            e.loss,
            e.mean_cos,
            e.grad_norm,
            e.lr
        ));
    }
    s
}
