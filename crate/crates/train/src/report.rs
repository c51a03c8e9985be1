//! Per-example evaluation reports and metric logs as CSV.

use std::path::Path;

use qfsum_core::prompt::build_prompt_with_repeat;
use qfsum_core::{ArchConfig, Error, ParamStore, Result};
use qfsum_eval::{exact_match, score_all, RougeSet};
use qfsum_tensor::{Rng, Scalar};
use serde::Serialize;

use crate::data::Example;
use crate::generate::{generate_text, GenConfig};
use crate::train::EpochMetrics;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub id: String,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub rlsum: f64,
    pub exact_match: f64,
    #[serde(skip)]
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    /// Column means, in the order r1, r2, rl, rlsum, exact_match.
    pub fn means(&self) -> [f64; 5] {
        let n = self.rows.len().max(1) as f64;
        let mut m = [0.0; 5];
        for r in &self.rows {
            for (acc, v) in m.iter_mut().zip([r.r1, r.r2, r.rl, r.rlsum, r.exact_match]) {
                *acc += v;
            }
        }
        m.map(|x| x / n)
    }

    pub fn exact_match(&self) -> f64 {
        self.means()[4]
    }

    /// Per-example rows followed by a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        let m = self.means();
        w.serialize(ReportRow {
            id: "mean".into(),
            r1: m[0],
            r2: m[1],
            rl: m[2],
            rlsum: m[3],
            exact_match: m[4],
            prediction: String::new(),
        })
        .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

pub fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Generate a summary for each example and score it against its references.
pub fn evaluate<T: Scalar>(
    arch: &ArchConfig,
    params: &ParamStore<T>,
    examples: &[Example],
    repeat_query: bool,
    gen: &GenConfig,
    seed: u64,
) -> Result<Report> {
    let root = Rng::seed(seed);
    let mut rows = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let prompt = build_prompt_with_repeat(&ex.query, &ex.document, None, repeat_query)?;
        let mut rng = root.fork(i as u64);
        let prediction = generate_text(arch, params, &prompt, gen, &mut rng)?;
        let s: RougeSet = score_all(&prediction, &ex.summaries).map_err(|e| Error::Config(e.to_string()))?;
        rows.push(ReportRow {
            id: ex.id_or(i),
            r1: s.r1.f1,
            r2: s.r2.f1,
            rl: s.rl.f1,
            rlsum: s.rlsum.f1,
            exact_match: if exact_match(&prediction, &ex.summaries) { 1.0 } else { 0.0 },
            prediction,
        });
    }
    Ok(Report { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct MetricRow {
    epoch: usize,
    split: &'static str,
    loss: f64,
    exact_match: Option<f64>,
    r1: Option<f64>,
    r2: Option<f64>,
    rl: Option<f64>,
    rlsum: Option<f64>,
}

/// Training log: one `train` and (when available) one `val` row per epoch,
/// plus an optional final `eval` row from a generation report.
pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics], eval: Option<&Report>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for m in history {
        let row = |split, loss| MetricRow {
            epoch: m.epoch,
            split,
            loss,
            exact_match: None,
            r1: None,
            r2: None,
            rl: None,
            rlsum: None,
        };
        w.serialize(row("train", m.train_loss)).map_err(csv_err)?;
        if let Some(v) = m.val_loss {
            w.serialize(row("val", v)).map_err(csv_err)?;
        }
    }
    if let Some(r) = eval {
        let mm = r.means();
        w.serialize(MetricRow {
            epoch: history.last().map_or(0, |m| m.epoch),
            split: "eval",
            loss: f64::NAN,
            exact_match: Some(mm[4]),
            r1: Some(mm[0]),
            r2: Some(mm[1]),
            rl: Some(mm[2]),
            rlsum: Some(mm[3]),
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
