//! Side-by-side tables of reports with deltas against a retrain anchor.

use std::path::{Path, PathBuf};

use semu::metrics::{format_cell, Deltas, UnlearnReport};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::pipeline::read_report;

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub name: String,
    pub report: UnlearnReport,
    pub deltas: Option<Deltas>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub anchor: Option<String>,
    pub rows: Vec<Row>,
}

/// Directory name for `run/report.json`, file stem otherwise.
fn row_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "report" {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

/// The anchor is `anchor` when given (and added if not among `paths`),
/// otherwise the one report whose method is `retrain`, if any.
pub fn compare(paths: &[PathBuf], anchor: Option<&Path>) -> CliResult<Comparison> {
    if paths.is_empty() && anchor.is_none() {
        return Err(CliError::config("compare needs at least one report"));
    }
    let mut files: Vec<PathBuf> = paths.to_vec();
    if let Some(a) = anchor {
        if !files.iter().any(|p| p == a) {
            files.insert(0, a.to_path_buf());
        }
    }
    let reports = files.iter().map(|p| read_report(p)).collect::<CliResult<Vec<_>>>()?;
    let anchor_idx = match anchor {
        Some(a) => files.iter().position(|p| p == a),
        None => {
            let retrains: Vec<usize> = (0..reports.len()).filter(|&i| reports[i].method == "retrain").collect();
            if retrains.len() > 1 {
                return Err(CliError::config(
                    "several retrain reports given; choose the anchor with --anchor",
                ));
            }
            retrains.first().copied()
        }
    };
    let anchor_metrics = anchor_idx.map(|i| reports[i].metrics.clone());
    let rows = files
        .iter()
        .zip(reports)
        .map(|(p, report)| Row {
            name: row_name(p),
            deltas: anchor_metrics.as_ref().map(|a| report.metrics.deltas_from(a)),
            report,
        })
        .collect::<Vec<_>>();
    Ok(Comparison {
        anchor: anchor_idx.map(|i| rows[i].name.clone()),
        rows,
    })
}

pub fn render(cmp: &Comparison) -> String {
    let header = ["Method", "UA", "RA", "TA", "MIA", "TParams"];
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for row in &cmp.rows {
        let m = &row.report.metrics;
        let d = row.deltas.as_ref();
        let mia = match m.mia {
            Some(v) => format_cell(v, d.and_then(|d| d.mia)),
            None => "-".to_string(),
        };
        table.push(vec![
            row.name.clone(),
            format_cell(m.ua, d.map(|d| d.ua)),
            format_cell(m.ra, d.map(|d| d.ra)),
            format_cell(m.ta, d.map(|d| d.ta)),
            mia,
            format_cell(m.tparams_pct, d.map(|d| d.tparams_pct)),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in table.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, &w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    if let Some(a) = &cmp.anchor {
        out.push_str(&format!("(deltas against {a})\n"));
    }
    out
}
