//! Counterfactual influence of prior courses on a prediction.
//!
//! Per student: raise one taken prior to 4.0 and take the change in the raw
//! (unclipped) deterministic prediction. Collectively: raise by 1.0 (capped
//! at 4.0) and sum the change over every student who took that prior.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::grades::{clip, MAX_GRADE};
use crate::models::ModelArtifact;

pub const COLLECTIVE_INCREMENT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEntry {
    pub prior: String,
    /// The student's latest grade in the prior.
    pub grade: f64,
    pub counterfactual: f64,
    pub counterfactual_clipped: f64,
    pub influence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub student: String,
    pub target: String,
    pub base: f64,
    pub base_clipped: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub true_grade: Option<f64>,
    /// Sorted by descending influence, ties by prior id.
    pub entries: Vec<InfluenceEntry>,
    /// Entries were cut to a top-k list.
    #[serde(default)]
    pub truncated: bool,
}

impl InfluenceReport {
    /// Keeps the `k` most influential entries.
    pub fn top(mut self, k: usize) -> Self {
        if self.entries.len() > k {
            self.entries.truncate(k);
            self.truncated = true;
        }
        self
    }

    /// Copy with influences divided by the largest absolute influence.
    pub fn normalized(&self) -> Self {
        let max = self.entries.iter().map(|e| e.influence.abs()).fold(0.0, f64::max);
        let mut out = self.clone();
        if max > 0.0 {
            out.entries.iter_mut().for_each(|e| e.influence /= max);
        }
        out
    }
}

fn sort_desc<T>(items: &mut [T], key: impl Fn(&T) -> (f64, &str)) {
    items.sort_by(|a, b| {
        let (ia, na) = key(a);
        let (ib, nb) = key(b);
        ib.total_cmp(&ia).then_with(|| na.cmp(nb))
    });
}

/// Influence of every prior the student took.
pub fn influence_student(artifact: &ModelArtifact, example: &Example) -> Result<InfluenceReport> {
    artifact.check_example(example)?;
    let base = artifact.predict_raw(example)?;
    let mut entries = Vec::new();
    for slot in example.taken_slots() {
        let grade = example.latest_grade(slot).expect("taken slot has a grade");
        let counterfactual = artifact.predict_raw(&example.with_grade(slot, MAX_GRADE)?)?;
        entries.push(InfluenceEntry {
            prior: artifact.priors[slot].clone(),
            grade,
            counterfactual,
            counterfactual_clipped: clip(counterfactual),
            influence: counterfactual - base,
        });
    }
    sort_desc(&mut entries, |e| (e.influence, e.prior.as_str()));
    Ok(InfluenceReport {
        student: example.student_id.clone(),
        target: artifact.target_course.clone(),
        base,
        base_clipped: clip(base),
        true_grade: example.label.is_finite().then_some(example.label),
        entries,
        truncated: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveEntry {
    pub prior: String,
    pub influence: f64,
    pub n_students: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveInfluence {
    pub target: String,
    /// One entry per prior, in prior order.
    pub entries: Vec<CollectiveEntry>,
}

/// Per-student change when `slot` is raised by the collective increment.
pub fn increment_influence(artifact: &ModelArtifact, example: &Example, slot: usize) -> Result<Option<f64>> {
    let Some(grade) = example.latest_grade(slot) else {
        return Ok(None);
    };
    let base = artifact.predict_raw(example)?;
    let raised = (grade + COLLECTIVE_INCREMENT).min(MAX_GRADE);
    Ok(Some(artifact.predict_raw(&example.with_grade(slot, raised)?)? - base))
}

/// Sum of +1.0 influences over the students who took each prior.
pub fn influence_collective(artifact: &ModelArtifact, examples: &[Example]) -> Result<CollectiveInfluence> {
    let mut entries: Vec<CollectiveEntry> = artifact
        .priors
        .iter()
        .map(|p| CollectiveEntry {
            prior: p.clone(),
            influence: 0.0,
            n_students: 0,
        })
        .collect();
    for ex in examples {
        artifact.check_example(ex)?;
        let base = artifact.predict_raw(ex)?;
        for slot in ex.taken_slots() {
            let grade = ex.latest_grade(slot).expect("taken slot has a grade");
            let raised = (grade + COLLECTIVE_INCREMENT).min(MAX_GRADE);
            let delta = artifact.predict_raw(&ex.with_grade(slot, raised)?)? - base;
            entries[slot].influence += delta;
            entries[slot].n_students += 1;
        }
    }
    Ok(CollectiveInfluence {
        target: artifact.target_course.clone(),
        entries,
    })
}

/// The `k` largest collective influences among priors with at least one
/// taker, descending, ties by id. The flag is set when fewer than `k` exist.
pub fn top_influential(table: &CollectiveInfluence, k: usize) -> Result<(Vec<CollectiveEntry>, bool)> {
    let mut rows: Vec<CollectiveEntry> = table.entries.iter().filter(|e| e.n_students > 0).cloned().collect();
    if rows.is_empty() {
        return Err(Error::InsufficientHistory(format!(
            "no student took any prior of `{}`",
            table.target
        )));
    }
    sort_desc(&mut rows, |e| (e.influence, e.prior.as_str()));
    let short = rows.len() < k;
    rows.truncate(k);
    Ok((rows, short))
}

/// `prior,influence,n_students`, rows in the given order.
pub fn write_collective_csv<W: Write>(rows: &[CollectiveEntry], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["prior", "influence", "n_students"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.write_record([r.prior.clone(), r.influence.to_string(), r.n_students.to_string()])
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
