//! Request handling shared by the HTTP service and the command-line tool.
//!
//! Every handler is a pure function of the registry and the request, so the
//! service and the CLI produce identical JSON for identical inputs.

use std::collections::{BTreeMap, BTreeSet};

use gradecast::dataset::{example_from_transcript, Example};
use gradecast::explain::{influence_student, InfluenceReport};
use gradecast::grades::{clip, numeric_to_nearest_letter, parse_grade, GradeValue};
use gradecast::models::{Family, ModelArtifact, Registry};
use gradecast::pipeline::predictive_distribution;
use gradecast::uncertainty::{interval, PredictionInterval, DEFAULT_SAMPLES};
use gradecast::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_TOP: usize = 5;
pub const DEFAULT_FAMILY: Family = Family::Mlp;
pub const AT_RISK_BELOW: f64 = 2.0;
const ANONYMOUS: &str = "anonymous";
/// Upper bound on MC samples per request.
pub const MAX_SAMPLES: usize = 10_000;

/// A grade given either as a number in `[0, 4]` or as a letter label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GradeInput {
    Number(f64),
    Letter(String),
}

impl GradeInput {
    fn value(&self) -> gradecast::Result<f64> {
        match self {
            GradeInput::Number(v) => GradeValue::new(*v).map(GradeValue::get),
            GradeInput::Letter(s) => parse_grade(s).map(GradeValue::get),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub course: String,
    pub term: u32,
    pub grade: GradeInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<String>,
    pub transcript: Vec<TranscriptRow>,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    /// Term the target course would be taken in; defaults to the term after
    /// the latest transcript row. Only earlier rows are used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub term: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub student: String,
    pub target: String,
    pub family: Family,
    pub term: u32,
    pub mean: f64,
    pub variance: f64,
    pub tau_inv: f64,
    pub samples: usize,
    pub seed: u64,
    pub interval: PredictionInterval,
    /// The interval restricted to the grade range, for display.
    pub interval_clipped: PredictionInterval,
    pub at_risk: bool,
    pub letter: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<String>,
    pub transcript: Vec<TranscriptRow>,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub term: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Override {
    pub course: String,
    pub new_grade: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<String>,
    pub transcript: Vec<TranscriptRow>,
    pub target: String,
    #[serde(default)]
    pub overrides: Vec<Override>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub term: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub base: PredictResponse,
    pub counterfactual: PredictResponse,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub target: String,
    pub priors: Vec<String>,
    pub families: Vec<Family>,
    pub default_family: Option<Family>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub targets: usize,
    pub artifacts: usize,
}

/// Failure of a request, with the HTTP status it maps to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    pub detail: String,
}

impl ApiError {
    pub fn new(status: u16, error: &str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            error: error.to_string(),
            detail: detail.into(),
        }
    }

    pub fn unprocessable(error: &str, detail: impl Into<String>) -> Self {
        Self::new(422, error, detail)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.error, self.detail)
    }
}

impl std::error::Error for ApiError {}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let detail = e.to_string();
        match e {
            Error::UnknownCourse(_) => ApiError::new(404, "unknown_course", detail),
            Error::InvalidGrade(_) | Error::OffGrid(_) => ApiError::unprocessable("invalid_grade", detail),
            Error::DuplicateRecord { .. } => ApiError::unprocessable("duplicate_record", detail),
            Error::OutOfRange { .. } => ApiError::unprocessable("out_of_range", detail),
            Error::UnsupportedFamily(_) => ApiError::unprocessable("unsupported_family", detail),
            Error::MissingFeatures(_) => ApiError::unprocessable("missing_features", detail),
            Error::EncodingMismatch(_) | Error::Shape(_) => ApiError::unprocessable("encoding_mismatch", detail),
            _ => ApiError::new(500, "internal", detail),
        }
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn health(registry: &Registry) -> Health {
    Health {
        status: "ok".into(),
        targets: registry.len(),
        artifacts: registry.values().map(BTreeMap::len).sum(),
    }
}

pub fn models(registry: &Registry) -> Vec<ModelSummary> {
    registry
        .iter()
        .map(|(target, fams)| ModelSummary {
            target: target.clone(),
            priors: fams.values().next().map(|a| a.priors.clone()).unwrap_or_default(),
            families: fams.keys().copied().collect(),
            default_family: default_family(fams),
        })
        .collect()
}

fn default_family(fams: &BTreeMap<Family, ModelArtifact>) -> Option<Family> {
    if fams.contains_key(&DEFAULT_FAMILY) {
        Some(DEFAULT_FAMILY)
    } else {
        fams.keys().next_back().copied()
    }
}

fn artifact<'a>(registry: &'a Registry, target: &str, family: Option<Family>) -> ApiResult<&'a ModelArtifact> {
    let fams = registry
        .get(target)
        .ok_or_else(|| ApiError::new(404, "unknown_course", format!("no models for course `{target}`")))?;
    let family = family
        .or_else(|| default_family(fams))
        .ok_or_else(|| ApiError::new(404, "unknown_model", format!("no models for course `{target}`")))?;
    fams.get(&family)
        .ok_or_else(|| ApiError::new(404, "unknown_model", format!("no {family} model for course `{target}`")))
}

/// Validated transcript rows as `(course, term, grade)`.
fn parse_transcript(rows: &[TranscriptRow]) -> ApiResult<Vec<(String, u32, f64)>> {
    let mut seen = BTreeSet::new();
    rows.iter()
        .map(|r| {
            if r.course.trim().is_empty() {
                return Err(ApiError::unprocessable("malformed_transcript", "empty course identifier"));
            }
            if !seen.insert((r.course.as_str(), r.term)) {
                return Err(ApiError::unprocessable(
                    "duplicate_record",
                    format!("course `{}` appears twice in term {}", r.course, r.term),
                ));
            }
            Ok((r.course.clone(), r.term, r.grade.value()?))
        })
        .collect()
}

fn label_term(rows: &[(String, u32, f64)], term: Option<u32>) -> u32 {
    term.unwrap_or_else(|| rows.iter().map(|r| r.1 + 1).max().unwrap_or(0))
}

fn build_example(artifact: &ModelArtifact, student: &str, rows: &[(String, u32, f64)], term: u32) -> ApiResult<Example> {
    if artifact.family.needs_content() {
        return Err(ApiError::unprocessable(
            "missing_features",
            format!("{} models need content features, which requests do not carry", artifact.family),
        ));
    }
    Ok(example_from_transcript(student, rows, &artifact.priors, term, None))
}

fn check_options(level: f64, samples: usize) -> ApiResult<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(ApiError::unprocessable("out_of_range", format!("level {level} must lie in (0, 1)")));
    }
    if !(2..=MAX_SAMPLES).contains(&samples) {
        return Err(ApiError::unprocessable(
            "out_of_range",
            format!("samples {samples} must lie in [2, {MAX_SAMPLES}]"),
        ));
    }
    Ok(())
}

/// Seed derived from the SHA-256 of the request's canonical JSON.
pub fn request_seed<T: Serialize>(request: &T) -> u64 {
    let bytes = serde_json::to_vec(request).expect("request types serialize");
    let digest = Sha256::digest(&bytes);
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}

fn score(
    artifact: &ModelArtifact,
    student: &str,
    rows: &[(String, u32, f64)],
    term: u32,
    level: f64,
    samples: usize,
    seed: u64,
) -> ApiResult<PredictResponse> {
    let example = build_example(artifact, student, rows, term)?;
    let dist = predictive_distribution(artifact, &example, samples, artifact.tau_inv, seed)?;
    let iv = interval(&dist, level)?;
    let letter = numeric_to_nearest_letter(clip(dist.mean))?;
    Ok(PredictResponse {
        student: student.to_string(),
        target: artifact.target_course.clone(),
        family: artifact.family,
        term,
        mean: dist.mean,
        variance: dist.variance,
        tau_inv: dist.tau_inv,
        samples: dist.sample_count(),
        seed,
        interval: iv,
        interval_clipped: iv.clipped(),
        at_risk: dist.mean < AT_RISK_BELOW,
        letter: letter.label().to_string(),
    })
}

pub fn predict(registry: &Registry, request: &PredictRequest) -> ApiResult<PredictResponse> {
    let artifact = artifact(registry, &request.target, request.family)?;
    let rows = parse_transcript(&request.transcript)?;
    let level = request.level.unwrap_or(DEFAULT_LEVEL);
    let samples = request.samples.unwrap_or(DEFAULT_SAMPLES);
    check_options(level, samples)?;
    let seed = request.seed.unwrap_or_else(|| {
        request_seed(&PredictRequest {
            seed: None,
            ..request.clone()
        })
    });
    let student = request.student.as_deref().unwrap_or(ANONYMOUS);
    let term = label_term(&rows, request.term);
    score(artifact, student, &rows, term, level, samples, seed)
}

pub fn explain(registry: &Registry, request: &ExplainRequest) -> ApiResult<InfluenceReport> {
    let artifact = artifact(registry, &request.target, request.family)?;
    let rows = parse_transcript(&request.transcript)?;
    let student = request.student.as_deref().unwrap_or(ANONYMOUS);
    let term = label_term(&rows, request.term);
    let example = build_example(artifact, student, &rows, term)?;
    let report = influence_student(artifact, &example)?;
    Ok(report.top(request.k.unwrap_or(DEFAULT_TOP)))
}

pub fn whatif(registry: &Registry, request: &WhatIfRequest) -> ApiResult<WhatIfResponse> {
    let artifact = artifact(registry, &request.target, request.family)?;
    let rows = parse_transcript(&request.transcript)?;
    let level = request.level.unwrap_or(DEFAULT_LEVEL);
    let samples = request.samples.unwrap_or(DEFAULT_SAMPLES);
    check_options(level, samples)?;
    let seed = request.seed.unwrap_or_else(|| {
        request_seed(&WhatIfRequest {
            seed: None,
            ..request.clone()
        })
    });
    let student = request.student.as_deref().unwrap_or(ANONYMOUS);
    let term = label_term(&rows, request.term);

    let mut changed = rows.clone();
    for o in &request.overrides {
        if !(o.new_grade.is_finite() && (0.0..=4.0).contains(&o.new_grade)) {
            return Err(ApiError::unprocessable(
                "out_of_range",
                format!("override grade {} for `{}` must lie in [0, 4]", o.new_grade, o.course),
            ));
        }
        let latest = changed
            .iter_mut()
            .filter(|(c, t, _)| *c == o.course && *t < term)
            .max_by_key(|(_, t, _)| *t)
            .ok_or_else(|| {
                ApiError::unprocessable(
                    "untaken_course",
                    format!("override of `{}`, which the transcript does not contain", o.course),
                )
            })?;
        latest.2 = o.new_grade;
    }

    let base = score(artifact, student, &rows, term, level, samples, seed)?;
    let counterfactual = score(artifact, student, &changed, term, level, samples, seed)?;
    let delta = counterfactual.mean - base.mean;
    Ok(WhatIfResponse {
        base,
        counterfactual,
        delta,
    })
}
