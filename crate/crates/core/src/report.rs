//! Per-bit-width accuracy table, relative metric and teacher histograms for
//! a finished run.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::trainer::{
    delta_b, histogram_csv, read_metrics_csv, teacher_histogram, HistogramRow, ResultKind,
    RunSummary, SUMMARY_FILE,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub b: u8,
    pub kind: ResultKind,
    pub accuracy: f64,
    pub reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Relative accuracy over the trained bit-widths, when references cover them.
    pub delta_b: Option<f64>,
    pub histogram: Vec<HistogramRow>,
}

/// Builds the report from a run's metrics CSV and the `summary.json` next to
/// it. Reference summaries (e.g. one per individually trained bit-width) are
/// merged; their trained accuracies serve as the baseline.
pub fn build_report(metrics: &Path, references: &[PathBuf]) -> Result<Report> {
    let (_, rows) = read_metrics_csv(metrics)?;
    let summary_path = metrics
        .parent()
        .unwrap_or(Path::new("."))
        .join(SUMMARY_FILE);
    let summary = RunSummary::load(&summary_path)?;
    let mut reference = BTreeMap::new();
    for p in references {
        reference.extend(RunSummary::load(p)?.trained());
    }
    let table = summary
        .bits
        .iter()
        .map(|(b, r)| ReportRow {
            b: *b,
            kind: r.kind,
            accuracy: r.accuracy,
            reference: reference.get(b).copied(),
        })
        .collect();
    let trained = summary.trained();
    let delta = if references.is_empty() {
        None
    } else {
        Some(delta_b(&trained, &reference)?)
    };
    Ok(Report {
        rows: table,
        delta_b: delta,
        histogram: teacher_histogram(&rows),
    })
}

impl Report {
    /// CSV sections: the per-bit-width table, the relative metric, and the
    /// teacher histogram, separated by blank lines.
    pub fn render(&self) -> Result<String> {
        let mut out = String::from("b,kind,accuracy,reference,relative\n");
        for r in &self.rows {
            let kind = match r.kind {
                ResultKind::Trained => "trained",
                ResultKind::ZeroShot => "zero_shot",
            };
            let (reference, relative) = match r.reference {
                Some(x) if x > 0.0 => (format!("{x:.2}"), format!("{:.2}", r.accuracy / x * 100.0)),
                _ => (String::new(), String::new()),
            };
            writeln!(
                out,
                "{},{kind},{:.2},{reference},{relative}",
                r.b, r.accuracy
            )
            .expect("string write");
        }
        if let Some(d) = self.delta_b {
            write!(out, "\ndelta_b\n{d:.1}\n").expect("string write");
        }
        out.push('\n');
        out.push_str(&histogram_csv(&self.histogram)?);
        Ok(out)
    }
}
