//! Comparison table with relative improvements over the first row.

use rgalign_core::metrics::{MetricReport, METRIC_COLUMNS};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    /// Row name and its metric values in [`METRIC_COLUMNS`] order.
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ReportTable {
    pub fn new(rows: Vec<(String, MetricReport)>) -> AppResult<Self> {
        if rows.is_empty() {
            return Err(AppError::Invalid("report needs at least one run".into()));
        }
        let rows = rows
            .into_iter()
            .map(|(name, r)| {
                let vals = METRIC_COLUMNS
                    .iter()
                    .map(|c| r.metric(c).ok_or_else(|| AppError::Invalid(format!("row {name} lacks metric {c}"))))
                    .collect::<AppResult<Vec<_>>>()?;
                Ok((name, vals))
            })
            .collect::<AppResult<Vec<_>>>()?;
        Ok(ReportTable { rows })
    }

    /// `(x - base) / base` per metric for every row after the first.
    pub fn improvements(&self) -> Vec<(String, Vec<f64>)> {
        let base = &self.rows[0].1;
        self.rows[1..]
            .iter()
            .map(|(name, vals)| (name.clone(), vals.iter().zip(base).map(|(x, b)| (x - b) / b).collect()))
            .collect()
    }
}

/// CSV and aligned text renderings.
pub fn render_report(table: &ReportTable) -> (String, String) {
    let mut csv = format!("row,{}\n", METRIC_COLUMNS.join(","));
    for (name, vals) in &table.rows {
        let v: Vec<String> = vals.iter().map(|x| format!("{x:.6}")).collect();
        csv.push_str(&format!("{name},{}\n", v.join(",")));
    }
    let base = &table.rows[0].0;
    for (name, vals) in table.improvements() {
        let v: Vec<String> = vals.iter().map(|x| format!("{:.4}", 100.0 * x)).collect();
        csv.push_str(&format!("{name} vs {base} (%),{}\n", v.join(",")));
    }

    let width = table.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(12) + 2;
    let mut txt = format!("{:width$}", "");
    for c in METRIC_COLUMNS {
        txt.push_str(&format!("{c:>10}"));
    }
    txt.push('\n');
    for (name, vals) in &table.rows {
        txt.push_str(&format!("{name:width$}"));
        for x in vals {
            txt.push_str(&format!("{x:>10.4}"));
        }
        txt.push('\n');
    }
    let improvements = table.improvements();
    if !improvements.is_empty() {
        txt.push_str(&format!("\nRelative improvement over {base}\n"));
        for (name, vals) in improvements {
            txt.push_str(&format!("{name:width$}"));
            for x in vals {
                txt.push_str(&format!("{:>9.4}%", 100.0 * x));
            }
            txt.push('\n');
        }
    }
    (csv, txt)
}
