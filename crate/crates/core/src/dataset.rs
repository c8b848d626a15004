//! Transcript ingestion, per-target course datasets and temporal splits.
//!
//! A [`CourseDataset`] holds one example per (student, term) in which the
//! student took the target course. Each example keeps the raw prior-course
//! history it was built from, so encodings can be recomputed under
//! counterfactual grade overrides.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grades::{self, GRID_TOLERANCE};

/// Value written into an encoding slot for an earned F, keeping it distinct
/// from "not taken" (0.0).
pub const FAIL_ENCODING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub student_id: String,
    pub course_id: String,
    pub term: u32,
    pub grade: f64,
}

/// Maps semester labels such as `Fall2016` to dense term indices.
pub type TermMap = BTreeMap<String, u32>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub target_course: String,
    pub priors: Vec<String>,
}

pub fn read_catalog<R: Read>(source: R) -> Result<Vec<CatalogEntry>> {
    Ok(serde_json::from_reader(source)?)
}

pub fn read_term_map<R: Read>(source: R) -> Result<TermMap> {
    Ok(serde_json::from_reader(source)?)
}

const GRADES_HEADER: [&str; 4] = ["student_id", "course_id", "term", "grade"];

fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn field(row: &csv::StringRecord, i: usize, line: u64) -> Result<&str> {
    row.get(i).map(str::trim).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing column {}", i + 1),
    })
}

fn parse_term(token: &str, terms: Option<&TermMap>, line: u64) -> Result<u32> {
    if let Ok(t) = token.parse::<u32>() {
        return Ok(t);
    }
    terms.and_then(|m| m.get(token).copied()).ok_or_else(|| Error::Parse {
        line,
        message: format!("unknown term `{token}`"),
    })
}

/// Reads the grades CSV. Terms are integers or labels resolved through `terms`.
pub fn ingest_records<R: Read>(source: R) -> Result<Vec<GradeRecord>> {
    ingest_records_with_terms(source, None)
}

pub fn ingest_records_with_terms<R: Read>(source: R, terms: Option<&TermMap>) -> Result<Vec<GradeRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(source);
    check_header(reader.headers().map_err(csv_error)?, &GRADES_HEADER)?;

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", row.len()),
            });
        }
        let student_id = field(&row, 0, line)?.to_string();
        let course_id = field(&row, 1, line)?.to_string();
        if student_id.is_empty() || course_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty identifier".into(),
            });
        }
        let term = parse_term(field(&row, 2, line)?, terms, line)?;
        let grade = grades::parse_grade(field(&row, 3, line)?)?.get();
        if !seen.insert((student_id.clone(), course_id.clone(), term)) {
            return Err(Error::DuplicateRecord {
                student: student_id,
                course: course_id,
                term,
            });
        }
        out.push(GradeRecord {
            student_id,
            course_id,
            term,
            grade,
        });
    }
    Ok(out)
}

/// Writes records in the grades CSV format. With `labels`, terms are written
/// as their semester label.
pub fn write_records<W: Write>(records: &[GradeRecord], labels: Option<&BTreeMap<u32, String>>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(GRADES_HEADER).map_err(csv_error)?;
    for r in records {
        let term = match labels.and_then(|l| l.get(&r.term)) {
            Some(label) => label.clone(),
            None => r.term.to_string(),
        };
        w.write_record([r.student_id.as_str(), r.course_id.as_str(), term.as_str(), &r.grade.to_string()])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentFeatures {
    pub academic_level: u32,
    pub prior_gpa: f64,
    pub major: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseFeatures {
    pub level: u32,
    pub discipline: String,
    pub credits: u32,
}

/// Column layout of a flattened content-feature vector:
/// `[academic_level, prior_gpa, major one-hot.., course_level, discipline one-hot.., credits]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub majors: Vec<String>,
    pub disciplines: Vec<String>,
}

impl FeatureLayout {
    pub fn width(&self) -> usize {
        self.majors.len() + self.disciplines.len() + 4
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["academic_level".to_string(), "prior_gpa".to_string()];
        names.extend(self.majors.iter().map(|m| format!("major={m}")));
        names.push("course_level".into());
        names.extend(self.disciplines.iter().map(|d| format!("discipline={d}")));
        names.push("credits".into());
        names
    }

    /// Indices of the real-valued (non one-hot) columns.
    pub fn real_columns(&self) -> Vec<usize> {
        let course_level = 2 + self.majors.len();
        vec![0, 1, course_level, self.width() - 1]
    }

    fn encode(&self, s: &StudentFeatures, c: &CourseFeatures) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.width());
        v.push(s.academic_level as f64);
        v.push(s.prior_gpa);
        v.extend(self.majors.iter().map(|m| if *m == s.major { 1.0 } else { 0.0 }));
        v.push(c.level as f64);
        v.extend(self.disciplines.iter().map(|d| if *d == c.discipline { 1.0 } else { 0.0 }));
        v.push(c.credits as f64);
        v
    }
}

/// Per-(student, term) and per-course content features.
#[derive(Debug, Clone, Default)]
pub struct FeatureSource {
    students: HashMap<(String, u32), StudentFeatures>,
    courses: HashMap<String, CourseFeatures>,
}

impl FeatureSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_student(&mut self, student: &str, term: u32, f: StudentFeatures) {
        self.students.insert((student.to_string(), term), f);
    }

    pub fn insert_course(&mut self, course: &str, f: CourseFeatures) {
        self.courses.insert(course.to_string(), f);
    }

    pub fn student(&self, student: &str, term: u32) -> Option<&StudentFeatures> {
        self.students.get(&(student.to_string(), term))
    }

    pub fn course(&self, course: &str) -> Option<&CourseFeatures> {
        self.courses.get(course)
    }

    pub fn layout(&self) -> FeatureLayout {
        let majors: BTreeSet<&String> = self.students.values().map(|s| &s.major).collect();
        let disciplines: BTreeSet<&String> = self.courses.values().map(|c| &c.discipline).collect();
        FeatureLayout {
            majors: majors.into_iter().cloned().collect(),
            disciplines: disciplines.into_iter().cloned().collect(),
        }
    }

    pub fn content_vector(&self, layout: &FeatureLayout, student: &str, term: u32, course: &str) -> Option<Vec<f64>> {
        let s = self.student(student, term)?;
        let c = self.course(course)?;
        Some(layout.encode(s, c))
    }

    /// Reads `student_id,term,academic_level,prior_gpa,major` and
    /// `course_id,level,discipline,credits`.
    pub fn read<R1: Read, R2: Read>(students: R1, courses: R2, terms: Option<&TermMap>) -> Result<Self> {
        let mut src = FeatureSource::new();
        let mut reader = csv::Reader::from_reader(students);
        check_header(
            reader.headers().map_err(csv_error)?,
            &["student_id", "term", "academic_level", "prior_gpa", "major"],
        )?;
        for row in reader.records() {
            let row = row.map_err(csv_error)?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let bad = |what: &str| Error::Parse {
                line,
                message: format!("invalid {what}"),
            };
            let term = parse_term(field(&row, 1, line)?, terms, line)?;
            let level = field(&row, 2, line)?.parse().map_err(|_| bad("academic_level"))?;
            let gpa: f64 = field(&row, 3, line)?.parse().map_err(|_| bad("prior_gpa"))?;
            if !(0.0..=4.0).contains(&gpa) {
                return Err(bad("prior_gpa"));
            }
            src.insert_student(
                field(&row, 0, line)?,
                term,
                StudentFeatures {
                    academic_level: level,
                    prior_gpa: gpa,
                    major: field(&row, 4, line)?.to_string(),
                },
            );
        }
        let mut reader = csv::Reader::from_reader(courses);
        check_header(
            reader.headers().map_err(csv_error)?,
            &["course_id", "level", "discipline", "credits"],
        )?;
        for row in reader.records() {
            let row = row.map_err(csv_error)?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let bad = |what: &str| Error::Parse {
                line,
                message: format!("invalid {what}"),
            };
            let credits: u32 = field(&row, 3, line)?.parse().map_err(|_| bad("credits"))?;
            if credits == 0 {
                return Err(bad("credits"));
            }
            src.insert_course(
                field(&row, 0, line)?,
                CourseFeatures {
                    level: field(&row, 1, line)?.parse().map_err(|_| bad("level"))?,
                    discipline: field(&row, 2, line)?.to_string(),
                    credits,
                },
            );
        }
        Ok(src)
    }

    pub fn write<W1: Write, W2: Write>(&self, students: W1, courses: W2) -> Result<()> {
        let mut w = csv::Writer::from_writer(students);
        w.write_record(["student_id", "term", "academic_level", "prior_gpa", "major"])
            .map_err(csv_error)?;
        let mut keys: Vec<_> = self.students.keys().collect();
        keys.sort();
        for key in keys {
            let f = &self.students[key];
            w.write_record([
                key.0.clone(),
                key.1.to_string(),
                f.academic_level.to_string(),
                f.prior_gpa.to_string(),
                f.major.clone(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_writer(courses);
        w.write_record(["course_id", "level", "discipline", "credits"]).map_err(csv_error)?;
        let mut ids: Vec<_> = self.courses.keys().collect();
        ids.sort();
        for id in ids {
            let c = &self.courses[id];
            w.write_record([id.clone(), c.level.to_string(), c.discipline.clone(), c.credits.to_string()])
                .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One observed grade in a prior course, addressed by its slot in the prior list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorAttempt {
    pub slot: usize,
    pub term: u32,
    pub grade: f64,
}

/// Multi-hot grade vector for one enrolled term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermStep {
    pub term: u32,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub student_id: String,
    /// Prior-course attempts strictly before `label_term`, sorted by (term, slot).
    pub history: Vec<PriorAttempt>,
    pub static_vector: Vec<f64>,
    pub sequence: Vec<TermStep>,
    pub content: Option<Vec<f64>>,
    pub label: f64,
    pub label_term: u32,
}

/// Grade as written into an encoding slot.
pub fn encode_grade(g: f64) -> f64 {
    if g.abs() <= GRID_TOLERANCE {
        FAIL_ENCODING
    } else {
        g
    }
}

impl Example {
    pub fn new(
        student_id: impl Into<String>,
        mut history: Vec<PriorAttempt>,
        n_priors: usize,
        content: Option<Vec<f64>>,
        label: f64,
        label_term: u32,
    ) -> Self {
        history.sort_by_key(|a| (a.term, a.slot));
        let static_vector = encode_static(&history, n_priors);
        let sequence = encode_sequence(&history, n_priors);
        Example {
            student_id: student_id.into(),
            history,
            static_vector,
            sequence,
            content,
            label,
            label_term,
        }
    }

    pub fn n_priors(&self) -> usize {
        self.static_vector.len()
    }

    pub fn took(&self, slot: usize) -> bool {
        self.history.iter().any(|a| a.slot == slot)
    }

    /// Slots the student took at least once, ascending.
    pub fn taken_slots(&self) -> Vec<usize> {
        let s: BTreeSet<usize> = self.history.iter().map(|a| a.slot).collect();
        s.into_iter().collect()
    }

    /// Most recent raw grade in `slot`.
    pub fn latest_grade(&self, slot: usize) -> Option<f64> {
        self.history.iter().rev().find(|a| a.slot == slot).map(|a| a.grade)
    }

    /// Copy with the most recent attempt in `slot` replaced by `grade`
    /// (same term), encodings rebuilt.
    pub fn with_grade(&self, slot: usize, grade: f64) -> Result<Example> {
        grades::GradeValue::new(grade)?;
        let mut history = self.history.clone();
        let pos = history
            .iter()
            .rposition(|a| a.slot == slot)
            .ok_or_else(|| Error::InvalidConfig(format!("prior slot {slot} was not taken")))?;
        history[pos].grade = grade;
        Ok(Example::new(
            self.student_id.clone(),
            history,
            self.n_priors(),
            self.content.clone(),
            self.label,
            self.label_term,
        ))
    }
}

/// Last-attempt grade per prior slot; 0.0 for untaken, 0.1 for an F.
pub fn encode_static(history: &[PriorAttempt], n_priors: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_priors];
    let mut last_term = vec![None; n_priors];
    for a in history {
        if last_term[a.slot].is_none_or(|t| a.term >= t) {
            v[a.slot] = encode_grade(a.grade);
            last_term[a.slot] = Some(a.term);
        }
    }
    v
}

/// One multi-hot vector per enrolled term, ascending; terms with no prior
/// course are skipped.
pub fn encode_sequence(history: &[PriorAttempt], n_priors: usize) -> Vec<TermStep> {
    let mut by_term: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for a in history {
        by_term.entry(a.term).or_insert_with(|| vec![0.0; n_priors])[a.slot] = encode_grade(a.grade);
    }
    by_term.into_iter().map(|(term, vector)| TermStep { term, vector }).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub included: usize,
    /// Enrollments dropped because the student had no prior-course history.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseDataset {
    pub target_course: String,
    pub priors: Vec<String>,
    pub feature_layout: Option<FeatureLayout>,
    pub examples: Vec<Example>,
    pub report: BuildReport,
}

impl CourseDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn slot_of(&self, course: &str) -> Option<usize> {
        self.priors.iter().position(|p| p == course)
    }

    pub fn label_terms(&self) -> BTreeSet<u32> {
        self.examples.iter().map(|e| e.label_term).collect()
    }

    fn with_examples(&self, examples: Vec<Example>) -> CourseDataset {
        CourseDataset {
            target_course: self.target_course.clone(),
            priors: self.priors.clone(),
            feature_layout: self.feature_layout.clone(),
            report: BuildReport {
                included: examples.len(),
                excluded: 0,
            },
            examples,
        }
    }

    pub fn labels(&self) -> Vec<f64> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

pub fn validate_priors(target: &str, priors: &[String]) -> Result<()> {
    let bad = |reason: &str| Error::InvalidPriorSet {
        target: target.to_string(),
        reason: reason.to_string(),
    };
    if priors.is_empty() {
        return Err(bad("prior set is empty"));
    }
    if priors.iter().any(|p| p == target) {
        return Err(bad("prior set contains the target course"));
    }
    let unique: HashSet<&String> = priors.iter().collect();
    if unique.len() != priors.len() {
        return Err(bad("prior set contains duplicates"));
    }
    Ok(())
}

/// Builds the per-target dataset. Every enrollment in `target` becomes one
/// example whose history is the student's prior-course attempts in earlier terms.
pub fn build_course_dataset(
    records: &[GradeRecord],
    target: &str,
    priors: &[String],
    features: Option<&FeatureSource>,
) -> Result<CourseDataset> {
    validate_priors(target, priors)?;
    let slots: HashMap<&str, usize> = priors.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    let layout = features.map(FeatureSource::layout);

    let mut history_by_student: BTreeMap<&str, Vec<PriorAttempt>> = BTreeMap::new();
    let mut enrollments: Vec<(&str, u32, f64)> = Vec::new();
    for r in records {
        if r.course_id == target {
            enrollments.push((&r.student_id, r.term, r.grade));
        } else if let Some(&slot) = slots.get(r.course_id.as_str()) {
            history_by_student.entry(&r.student_id).or_default().push(PriorAttempt {
                slot,
                term: r.term,
                grade: r.grade,
            });
        }
    }
    enrollments.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));

    let mut report = BuildReport::default();
    let mut examples = Vec::with_capacity(enrollments.len());
    for (student, term, grade) in enrollments {
        let history: Vec<PriorAttempt> = history_by_student
            .get(student)
            .map(|h| h.iter().copied().filter(|a| a.term < term).collect())
            .unwrap_or_default();
        if history.is_empty() {
            report.excluded += 1;
            continue;
        }
        let content = match (features, &layout) {
            (Some(f), Some(l)) => f.content_vector(l, student, term, target),
            _ => None,
        };
        examples.push(Example::new(student, history, priors.len(), content, grade, term));
    }
    report.included = examples.len();
    Ok(CourseDataset {
        target_course: target.to_string(),
        priors: priors.to_vec(),
        feature_layout: layout,
        examples,
        report,
    })
}

/// Train on label terms before `test_term - 1`, validate on `test_term - 1`,
/// test on `test_term`.
pub fn temporal_split(ds: &CourseDataset, test_term: u32) -> Result<(CourseDataset, CourseDataset, CourseDataset)> {
    if !ds.examples.iter().any(|e| e.label_term == test_term) {
        return Err(Error::InvalidConfig(format!(
            "test term {test_term} has no examples for `{}`",
            ds.target_course
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for e in &ds.examples {
        if e.label_term == test_term {
            test.push(e.clone());
        } else if test_term >= 1 && e.label_term == test_term - 1 {
            val.push(e.clone());
        } else if e.label_term + 1 < test_term {
            train.push(e.clone());
        }
    }
    if train.is_empty() {
        return Err(Error::InsufficientHistory(format!(
            "no training examples for `{}` before term {}",
            ds.target_course,
            test_term.saturating_sub(1)
        )));
    }
    Ok((ds.with_examples(train), ds.with_examples(val), ds.with_examples(test)))
}

/// Static MLP input for an example.
pub fn encode_static_example(example: &Example) -> &[f64] {
    &example.static_vector
}

/// Builds an example from an arbitrary transcript (e.g. one submitted to the
/// service), keeping only courses in `priors` and terms before `label_term`.
pub fn example_from_transcript(
    student_id: &str,
    transcript: &[(String, u32, f64)],
    priors: &[String],
    label_term: u32,
    content: Option<Vec<f64>>,
) -> Example {
    let history = transcript
        .iter()
        .filter(|(_, term, _)| *term < label_term)
        .filter_map(|(course, term, grade)| {
            priors.iter().position(|p| p == course).map(|slot| PriorAttempt {
                slot,
                term: *term,
                grade: *grade,
            })
        })
        .collect();
    Example::new(student_id, history, priors.len(), content, f64::NAN, label_term)
}
