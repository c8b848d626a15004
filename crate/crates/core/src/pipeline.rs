//! End-to-end training and evaluation for every family on one target course.
//!
//! Course-specific families (CSR, MLP, LSTM) fit on the training split and
//! select hyperparameters on validation. The collaborative baselines (BO, MF,
//! CS_MF) select on validation from records before the validation term, then
//! refit on every record before the test term.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{build_course_dataset, temporal_split, CatalogEntry, CourseDataset, Example, FeatureSource, GradeRecord};
use crate::error::{Error, Result};
use crate::eval::{mae, metric_report, MetricReport, RiskRule};
use crate::grades::clip;
use crate::models::{
    derive_seed, fit_bias_only, fit_csr, fit_deep, fit_mf, DeepFamily, Family, HyperGrid, MfConfig, ModelArtifact, Params, TrainConfig,
    TrainingReport,
};
use crate::uncertainty::{predict_mc, tau_grid, tune_tau, PredictiveDistribution, DEFAULT_SAMPLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub grid: HyperGrid,
    pub train: TrainConfig,
    pub seed: u64,
    /// Test term; the last term with labels for the target when absent.
    pub test_term: Option<u32>,
    pub mc_samples: usize,
    pub tau_grid: Vec<f64>,
    pub risk_rule: RiskRule,
    pub families: Vec<Family>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid: HyperGrid::desk(),
            train: TrainConfig::default(),
            seed: 42,
            test_term: None,
            mc_samples: DEFAULT_SAMPLES,
            tau_grid: tau_grid(0.5, 0.005),
            risk_rule: RiskRule::default(),
            families: Family::ALL.to_vec(),
        }
    }
}

/// One target's dataset and its temporal split.
#[derive(Debug, Clone)]
pub struct TargetSplit {
    pub test_term: u32,
    pub full: CourseDataset,
    pub train: CourseDataset,
    pub validation: CourseDataset,
    pub test: CourseDataset,
}

pub fn split_target(
    records: &[GradeRecord],
    entry: &CatalogEntry,
    features: Option<&FeatureSource>,
    test_term: Option<u32>,
) -> Result<TargetSplit> {
    let full = build_course_dataset(records, &entry.target_course, &entry.priors, features)?;
    let test_term = match test_term {
        Some(t) => t,
        None => *full
            .label_terms()
            .iter()
            .next_back()
            .ok_or_else(|| Error::InsufficientHistory(format!("no labelled examples for `{}`", entry.target_course)))?,
    };
    let (train, validation, test) = temporal_split(&full, test_term)?;
    Ok(TargetSplit {
        test_term,
        full,
        train,
        validation,
        test,
    })
}

fn records_before(records: &[GradeRecord], term: u32, courses: Option<&BTreeSet<&str>>) -> Vec<GradeRecord> {
    records
        .iter()
        .filter(|r| r.term < term && courses.is_none_or(|c| c.contains(r.course_id.as_str())))
        .cloned()
        .collect()
}

fn base_report(grid: &HyperGrid, split: &TargetSplit, grid_points: usize) -> TrainingReport {
    TrainingReport {
        grid_preset: grid.preset.clone(),
        grid_points,
        train_examples: split.train.len(),
        validation_examples: split.validation.len(),
        ..TrainingReport::default()
    }
}

fn artifact_mae(artifact: &ModelArtifact, ds: &CourseDataset) -> Result<f64> {
    mae(&artifact.predict_dataset(ds)?, &ds.labels())
}

/// `tau_inv` for a point-prediction model, tuned on its residuals over `ds`.
fn tune_point_tau(artifact: &ModelArtifact, ds: &CourseDataset, cfg: &PipelineConfig) -> Result<f64> {
    let dists = mc_distributions(artifact, &ds.examples, 2, 0.0, 0)?;
    tune_tau(&dists, &ds.labels(), &cfg.tau_grid)
}

/// Fits one collaborative candidate on a record subset.
type RefitFn = Box<dyn Fn(&[GradeRecord]) -> Result<Params>>;

/// Collaborative baselines: pick the candidate with the lowest validation
/// MAE when trained on records before the validation term, then refit it on
/// records before the test term.
fn fit_collaborative(records: &[GradeRecord], split: &TargetSplit, family: Family, cfg: &PipelineConfig) -> Result<ModelArtifact> {
    let entry_courses: BTreeSet<&str> = split
        .full
        .priors
        .iter()
        .map(String::as_str)
        .chain(std::iter::once(split.full.target_course.as_str()))
        .collect();
    let subset = (family == Family::CourseMatrixFactorization).then_some(&entry_courses);
    let val_term = split.test_term.saturating_sub(1);
    let selection_records = records_before(records, val_term, subset);
    let final_records = records_before(records, split.test_term, subset);
    let selection = if split.validation.is_empty() {
        &split.train
    } else {
        &split.validation
    };

    let seed = derive_seed(cfg.seed, &format!("{}/{}", split.full.target_course, family.label()));
    let candidates: Vec<(BTreeMap<String, f64>, RefitFn)> = match family {
        Family::BiasOnly => cfg
            .grid
            .bias_lambda
            .iter()
            .map(|&lambda| {
                let hyper = BTreeMap::from([("lambda".to_string(), lambda)]);
                let fit: RefitFn = Box::new(move |r| Ok(Params::BiasOnly(fit_bias_only(r, lambda)?)));
                (hyper, fit)
            })
            .collect(),
        Family::MatrixFactorization | Family::CourseMatrixFactorization => {
            let mut out: Vec<(BTreeMap<String, f64>, RefitFn)> = Vec::new();
            for &rank in &cfg.grid.mf_rank {
                for &lambda in &cfg.grid.mf_lambda {
                    let config = MfConfig {
                        rank,
                        lambda,
                        seed,
                        ..MfConfig::default()
                    };
                    let hyper = BTreeMap::from([("rank".to_string(), rank as f64), ("lambda".to_string(), lambda)]);
                    out.push((hyper, Box::new(move |r| Ok(Params::Factorization(fit_mf(r, config)?)))));
                }
            }
            out
        }
        other => return Err(Error::UnsupportedFamily(other.label().to_string())),
    };

    let make = |params: Params| {
        let mut a = ModelArtifact::new(family, &split.full.target_course, &split.full.priors, params);
        a.seed = seed;
        a
    };
    let mut best: Option<(f64, usize, ModelArtifact)> = None;
    let grid_points = candidates.len();
    if selection_records.is_empty() {
        return Err(Error::InsufficientHistory(format!(
            "no records before term {val_term} for `{}`",
            split.full.target_course
        )));
    }
    for (i, (_, fit)) in candidates.iter().enumerate() {
        let candidate = make(fit(&selection_records)?);
        let score = artifact_mae(&candidate, selection)?;
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, i, candidate));
        }
    }
    let (score, index, selected) = best.ok_or_else(|| Error::InvalidConfig(format!("empty {} grid", family.label())))?;
    let (hyper, fit) = &candidates[index];
    let mut artifact = make(fit(&final_records)?);
    artifact.hyperparameters = hyper.clone();
    artifact.tau_inv = tune_point_tau(&selected, selection, cfg)?;
    artifact.report = base_report(&cfg.grid, split, grid_points);
    artifact.report.validation_mae = score;
    artifact.report.notes.push(format!(
        "selected on validation term {val_term} with records before it; refit on {} records before term {}",
        final_records.len(),
        split.test_term
    ));
    Ok(artifact)
}

fn fit_ridge_family(split: &TargetSplit, family: Family, cfg: &PipelineConfig) -> Result<ModelArtifact> {
    let mode = family
        .feature_mode()
        .ok_or_else(|| Error::UnsupportedFamily(family.label().to_string()))?;
    let selection = if split.validation.is_empty() {
        &split.train
    } else {
        &split.validation
    };
    let mut best: Option<(f64, ModelArtifact)> = None;
    for &lambda in &cfg.grid.ridge_lambda {
        let model = fit_csr(&split.train, mode, lambda)?;
        let mut a = ModelArtifact::new(family, &split.full.target_course, &split.full.priors, Params::Ridge(model));
        a.feature_layout = split.full.feature_layout.clone();
        a.hyperparameters = BTreeMap::from([("lambda".to_string(), lambda)]);
        let score = artifact_mae(&a, selection)?;
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, a));
        }
    }
    let (score, mut artifact) = best.ok_or_else(|| Error::InvalidConfig("empty ridge grid".into()))?;
    artifact.report = base_report(&cfg.grid, split, cfg.grid.ridge_lambda.len());
    artifact.report.validation_mae = score;
    artifact.tau_inv = tune_point_tau(&artifact, selection, cfg)?;
    if split.validation.is_empty() {
        artifact
            .report
            .notes
            .push("validation split empty; selected on training data".into());
    }
    Ok(artifact)
}

fn fit_deep_family(split: &TargetSplit, family: Family, cfg: &PipelineConfig) -> Result<ModelArtifact> {
    let deep = match family {
        Family::Mlp => DeepFamily::Mlp,
        Family::Lstm => DeepFamily::Lstm,
        other => return Err(Error::UnsupportedFamily(other.label().to_string())),
    };
    let seed = derive_seed(cfg.seed, &format!("{}/{}", split.full.target_course, family.label()));
    let fit = fit_deep(deep, &split.train, &split.validation, &cfg.grid, &cfg.train, seed)?;
    let mut artifact = ModelArtifact::new(family, &split.full.target_course, &split.full.priors, fit.params);
    artifact.hyperparameters = fit.hyperparameters;
    artifact.dropout_rate = fit.dropout;
    artifact.input_scaler = fit.input_scaler;
    artifact.seed = seed;
    artifact.report = base_report(&cfg.grid, split, fit.grid_points);
    artifact.report.iterations = fit.trace.iterations_run;
    artifact.report.chosen_iteration = fit.trace.best_iteration;
    artifact.report.validation_mae = fit.trace.best_validation_mae;
    artifact.report.snapshots = fit.trace.snapshots;
    if fit.selected_on_train {
        artifact
            .report
            .notes
            .push("validation split empty; snapshots scored on training data".into());
    }
    let tuning = if split.validation.is_empty() {
        &split.train
    } else {
        &split.validation
    };
    let dists = mc_distributions(&artifact, &tuning.examples, cfg.mc_samples, 0.0, derive_seed(seed, "tau"))?;
    artifact.tau_inv = tune_tau(&dists, &tuning.labels(), &cfg.tau_grid)?;
    Ok(artifact)
}

/// Trains one family. Course-specific families with fewer training examples
/// than the configured minimum return a bias-only model under their own
/// family label, with a note in the report.
pub fn train_family(records: &[GradeRecord], split: &TargetSplit, family: Family, cfg: &PipelineConfig) -> Result<ModelArtifact> {
    let course_specific = !matches!(
        family,
        Family::BiasOnly | Family::MatrixFactorization | Family::CourseMatrixFactorization
    );
    if course_specific && split.train.len() < cfg.train.min_train_examples {
        let mut artifact = fit_collaborative(records, split, Family::BiasOnly, cfg)?;
        artifact.family = family;
        artifact.report.notes.push(format!(
            "{} training examples is below the minimum of {}; fell back to the bias-only baseline",
            split.train.len(),
            cfg.train.min_train_examples
        ));
        return Ok(artifact);
    }
    match family {
        Family::BiasOnly | Family::MatrixFactorization | Family::CourseMatrixFactorization => {
            fit_collaborative(records, split, family, cfg)
        }
        Family::CsrPriorCourses | Family::CsrContent | Family::CsrHybrid => fit_ridge_family(split, family, cfg),
        Family::Mlp | Family::Lstm => fit_deep_family(split, family, cfg),
    }
}

/// Artifacts for one target; families that cannot be trained are listed with the reason.
#[derive(Debug, Clone)]
pub struct TargetModels {
    pub split: TargetSplit,
    pub artifacts: BTreeMap<Family, ModelArtifact>,
    pub skipped: Vec<(Family, String)>,
}

/// Trains every configured family for one catalog target. Missing content
/// features skip the content families; other errors abort.
pub fn train_target(
    records: &[GradeRecord],
    entry: &CatalogEntry,
    features: Option<&FeatureSource>,
    cfg: &PipelineConfig,
) -> Result<TargetModels> {
    cfg.grid.validate()?;
    cfg.train.validate()?;
    let split = split_target(records, entry, features, cfg.test_term)?;
    let mut artifacts = BTreeMap::new();
    let mut skipped = Vec::new();
    for &family in &cfg.families {
        if family.needs_content() && split.full.feature_layout.is_none() {
            skipped.push((
                family,
                Error::MissingFeatures(format!("{} needs content features", family.label())).to_string(),
            ));
            continue;
        }
        artifacts.insert(family, train_family(records, &split, family, cfg)?);
    }
    Ok(TargetModels { split, artifacts, skipped })
}

/// Per-example MC seed, stable under reordering of the dataset.
pub fn example_seed(base: u64, example: &Example) -> u64 {
    derive_seed(base, &format!("{}/{}", example.student_id, example.label_term))
}

/// Predictive distribution for any family; families without dropout yield
/// the point prediction with variance `tau_inv`.
pub fn predictive_distribution(
    artifact: &ModelArtifact,
    example: &Example,
    samples: usize,
    tau_inv: f64,
    seed: u64,
) -> Result<PredictiveDistribution> {
    if artifact.supports_dropout() && artifact.dropout_rate > 0.0 {
        predict_mc(artifact, example, samples, tau_inv, seed)
    } else {
        PredictiveDistribution::degenerate(artifact.predict_raw(example)?, samples, tau_inv)
    }
}

pub fn mc_distributions(
    artifact: &ModelArtifact,
    examples: &[Example],
    samples: usize,
    tau_inv: f64,
    seed: u64,
) -> Result<Vec<PredictiveDistribution>> {
    examples
        .iter()
        .map(|e| predictive_distribution(artifact, e, samples, tau_inv, example_seed(seed, e)))
        .collect()
}

/// Test-split metrics per family, in family order.
pub fn evaluate_target(models: &TargetModels, rule: RiskRule) -> Result<Vec<(Family, MetricReport)>> {
    let labels = models.split.test.labels();
    models
        .artifacts
        .iter()
        .map(|(family, artifact)| {
            Ok((
                *family,
                metric_report(&artifact.predict_dataset(&models.split.test)?, &labels, rule)?,
            ))
        })
        .collect()
}

/// Clipped test predictions and labels pooled across targets for one family.
pub fn pooled_predictions(targets: &[TargetModels], family: Family) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for t in targets {
        if let Some(a) = t.artifacts.get(&family) {
            preds.extend(a.predict_dataset(&t.split.test)?.into_iter().map(clip));
            labels.extend(t.split.test.labels());
        }
    }
    Ok((preds, labels))
}
