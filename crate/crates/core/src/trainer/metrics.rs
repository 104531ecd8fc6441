use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CONFIG_PREFIX: &str = "# config=";

/// One bit-width's loss terms on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub batch: usize,
    pub mode: String,
    pub b: u8,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub teacher_b: Option<u8>,
    pub entropy_term: Option<f64>,
    pub distance_term: Option<f64>,
    pub swap_student_fraction: f64,
}

/// How often `teacher_b` taught `student_b` during one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub epoch: usize,
    pub student_b: u8,
    pub teacher_b: u8,
    pub count: usize,
}

/// Metrics CSV text: a `# config=<json>` line, a header, one row per record.
pub fn metrics_csv(config_json: &str, rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "epoch",
            "batch",
            "mode",
            "b",
            "loss",
            "ce",
            "kl",
            "teacher_b",
            "entropy_term",
            "distance_term",
            "swap_student_fraction",
        ])?;
    }
    let body = String::from_utf8(
        w.into_inner()
            .map_err(|e| Error::Csv(e.into_error().into()))?,
    )
    .expect("csv output is utf-8");
    Ok(format!("{CONFIG_PREFIX}{config_json}\n{body}"))
}

/// Parses metrics CSV text into its config snapshot (if present) and rows.
pub fn parse_metrics_csv(text: &str) -> Result<(Option<String>, Vec<MetricsRow>)> {
    let (config, body) = match text.strip_prefix(CONFIG_PREFIX) {
        Some(rest) => {
            let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
            (Some(line.to_string()), body)
        }
        None => (None, text),
    };
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok((config, rows))
}

pub fn read_metrics_csv(path: &Path) -> Result<(Option<String>, Vec<MetricsRow>)> {
    parse_metrics_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Teacher-selection counts per `(epoch, student_b, teacher_b)`.
pub fn teacher_histogram(rows: &[MetricsRow]) -> Vec<HistogramRow> {
    let mut counts: BTreeMap<(usize, u8, u8), usize> = BTreeMap::new();
    for r in rows {
        if let Some(t) = r.teacher_b {
            *counts.entry((r.epoch, r.b, t)).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|((epoch, student_b, teacher_b), count)| HistogramRow {
            epoch,
            student_b,
            teacher_b,
            count,
        })
        .collect()
}

pub fn histogram_csv(rows: &[HistogramRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["epoch", "student_b", "teacher_b", "count"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(
        w.into_inner()
            .map_err(|e| Error::Csv(e.into_error().into()))?,
    )
    .expect("utf-8"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultKind {
    Trained,
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitResult {
    pub accuracy: f64,
    pub kind: ResultKind,
}

/// Final per-bit-width accuracies of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub bits: BTreeMap<u8, BitResult>,
    /// Probability/variance clamps that fired during training.
    pub eps_clamps: u64,
}

impl RunSummary {
    pub fn trained(&self) -> BTreeMap<u8, f64> {
        self.bits
            .iter()
            .filter(|(_, r)| r.kind == ResultKind::Trained)
            .map(|(b, r)| (*b, r.accuracy))
            .collect()
    }

    pub fn accuracy(&self, b: u8) -> Option<f64> {
        self.bits.get(&b).map(|r| r.accuracy)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
