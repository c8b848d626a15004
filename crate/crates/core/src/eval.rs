//! Accuracy metrics: MAE, percentage of tick accuracy, at-risk classification.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grades::{clip, snap, tick_distance};

pub const AT_RISK_THRESHOLD: f64 = 2.0;

fn check_lengths(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    Ok(())
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64)
}

/// Snapped tick distance between a prediction and a label.
pub fn ticks(pred: f64, label: f64) -> usize {
    tick_distance(snap(pred), snap(label)).expect("snapped values are on the grid")
}

/// Percentage of predictions within `max_tick` ticks of the label.
pub fn pta(preds: &[f64], labels: &[f64], max_tick: usize) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| ticks(**p, **y) <= max_tick).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// False-negative rate among actual positives; 0 when there are none.
    pub fn fnr(&self) -> f64 {
        ratio(self.fn_, self.tp + self.fn_)
    }

    /// False-positive rate among actual negatives; 0 when there are none.
    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// At-risk rule: strictly below the threshold, or at-or-below when inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskRule {
    pub threshold: f64,
    pub inclusive: bool,
}

impl Default for RiskRule {
    fn default() -> Self {
        RiskRule {
            threshold: AT_RISK_THRESHOLD,
            inclusive: false,
        }
    }
}

impl RiskRule {
    pub fn at_risk(&self, g: f64) -> bool {
        if self.inclusive {
            g <= self.threshold
        } else {
            g < self.threshold
        }
    }
}

pub fn confusion(preds: &[f64], labels: &[f64], rule: RiskRule) -> Result<Confusion> {
    check_lengths(preds, labels)?;
    let mut c = Confusion::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (rule.at_risk(p), rule.at_risk(y)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtRiskMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub prevalence: f64,
    /// No predicted or no actual positives, so F1 is reported as 0.
    pub degenerate: bool,
    pub confusion: Confusion,
}

pub fn at_risk_metrics(preds: &[f64], labels: &[f64], rule: RiskRule) -> Result<AtRiskMetrics> {
    let c = confusion(preds, labels, rule)?;
    let n = c.total() as f64;
    let predicted = c.tp + c.fp;
    let actual = c.tp + c.fn_;
    let precision = ratio(c.tp, predicted);
    let recall = ratio(c.tp, actual);
    let degenerate = predicted == 0 || actual == 0;
    let f1 = if degenerate || precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(AtRiskMetrics {
        accuracy: (c.tp + c.tn) as f64 / n,
        precision,
        recall,
        f1,
        prevalence: actual as f64 / n,
        degenerate,
        confusion: c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub mae: f64,
    pub pta: [f64; 3],
    pub at_risk: AtRiskMetrics,
}

/// Full report; predictions are clipped to the grade range first.
pub fn metric_report(preds: &[f64], labels: &[f64], rule: RiskRule) -> Result<MetricReport> {
    let clipped: Vec<f64> = preds.iter().map(|p| clip(*p)).collect();
    Ok(MetricReport {
        n: preds.len(),
        mae: mae(&clipped, labels)?,
        pta: [pta(&clipped, labels, 0)?, pta(&clipped, labels, 1)?, pta(&clipped, labels, 2)?],
        at_risk: at_risk_metrics(&clipped, labels, rule)?,
    })
}

/// Fixed-width table, one row per named report.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "model", "n", "MAE", "PTA0", "PTA1", "PTA2", "Acc", "F1"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>7.4} {:>7.2} {:>7.2} {:>7.2} {:>7.4} {:>7.4}{}",
            name,
            r.n,
            r.mae,
            r.pta[0],
            r.pta[1],
            r.pta[2],
            r.at_risk.accuracy,
            r.at_risk.f1,
            if r.at_risk.degenerate { " *" } else { "" }
        );
    }
    out
}
