//! Patch-level confusion counts and the three error rates (overall, false
//! alarm, missed detection), with text and CSV reports.

use std::fmt::Write as _;
use std::ops::Add;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Patch, PatchLabel};
use crate::model::CnnModel;
use crate::trainer::{predict_labels, Result, TrainError};

/// Positive class is Occlusion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    pub fn record(&mut self, truth: PatchLabel, predicted: PatchLabel) {
        match (truth, predicted) {
            (PatchLabel::Occlusion, PatchLabel::Occlusion) => self.tp += 1,
            (PatchLabel::Occlusion, PatchLabel::NoOcclusion) => self.fn_ += 1,
            (PatchLabel::NoOcclusion, PatchLabel::Occlusion) => self.fp += 1,
            (PatchLabel::NoOcclusion, PatchLabel::NoOcclusion) => self.tn += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (PatchLabel, PatchLabel)>) -> Self {
        let mut c = Self::default();
        for (truth, predicted) in pairs {
            c.record(truth, predicted);
        }
        c
    }
}

/// Rates as fractions; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_error: Option<f64>,
    pub false_alarm: Option<f64>,
    pub missed_detection: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    Metrics {
        overall_error: ratio(c.fp + c.fn_, c.total()),
        false_alarm: ratio(c.fp, c.negatives()),
        missed_detection: ratio(c.fn_, c.positives()),
    }
}

const EVAL_CHUNK: usize = 100;

/// Argmax predictions against patch labels.
pub fn evaluate(model: &CnnModel, patches: &[Patch]) -> Result<ConfusionCounts> {
    if patches.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let parts = patches
        .par_chunks(EVAL_CHUNK * 10)
        .map(|group| {
            let predicted = predict_labels(model, group, EVAL_CHUNK)?;
            Ok(ConfusionCounts::from_pairs(group.iter().map(|p| p.label).zip(predicted)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().fold(ConfusionCounts::default(), Add::add))
}

/// One named configuration's result.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub counts: ConfusionCounts,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{:.2}%", 100.0 * v))
}

fn frac(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn text_report(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>14} {:>14} {:>17} {:>10}",
        "input", "overall error", "false alarm", "missed detection", "patches"
    );
    for r in rows {
        let m = metrics(&r.counts);
        let _ = writeln!(
            out,
            "{:<12} {:>14} {:>14} {:>17} {:>10}",
            r.name,
            pct(m.overall_error),
            pct(m.false_alarm),
            pct(m.missed_detection),
            r.counts.total()
        );
    }
    out
}

pub const REPORT_CSV_HEADER: &str = "input,overall_error,false_alarm,missed_detection,tp,fp,tn,fn";

/// Undefined rates are left empty.
pub fn csv_report(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in rows {
        let m = metrics(&r.counts);
        let c = r.counts;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.name,
            frac(m.overall_error),
            frac(m.false_alarm),
            frac(m.missed_detection),
            c.tp,
            c.fp,
            c.tn,
            c.fn_
        );
    }
    out
}
