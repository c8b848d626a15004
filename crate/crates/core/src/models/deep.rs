//! Mini-batch Adam training with validation snapshots and grid search for
//! the course-specific MLP and LSTM.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::HyperGrid;
use super::{derive_seed, sequence_input, GradeScaler, Params};
use crate::dataset::CourseDataset;
use crate::error::{Error, Result};
use crate::grades::clip;
use crate::nn::{clip_global_norm, AdamConfig, AdamState, MaskSampler, Mlp, Network, StackedLstm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub snapshot_every: usize,
    pub batch_size: usize,
    /// Stop after this many snapshots without improvement.
    pub patience: Option<usize>,
    pub adam: AdamConfig,
    /// Global-norm gradient clip applied to LSTM training.
    pub lstm_clip_norm: f64,
    pub min_train_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 2000,
            snapshot_every: 50,
            batch_size: 32,
            patience: None,
            adam: AdamConfig::default(),
            lstm_clip_norm: 5.0,
            min_train_examples: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.snapshot_every == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "iterations, snapshot cadence and batch size must be positive".into(),
            ));
        }
        if self.patience == Some(0) {
            return Err(Error::InvalidConfig("patience must be at least 1 snapshot".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub validation_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub snapshots: Vec<Snapshot>,
    pub best_iteration: usize,
    pub best_validation_mae: f64,
    pub iterations_run: usize,
}

/// Mean absolute error of clipped predictions.
pub fn validation_mae<N: Network>(net: &N, inputs: &[&N::Input], labels: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in inputs.iter().zip(labels) {
        total += (clip(net.predict(x)?) - y).abs();
    }
    Ok(total / labels.len() as f64)
}

/// Trains `net` on squared error. Every `snapshot_every` iterations the
/// validation MAE is measured and the best parameters so far are kept
/// (strict improvement, so the earliest of equal snapshots wins).
#[allow(clippy::too_many_arguments)]
pub fn train_network<N: Network>(
    mut net: N,
    train: &[&N::Input],
    labels: &[f64],
    val: &[&N::Input],
    val_labels: &[f64],
    dropout: f64,
    clip_norm: Option<f64>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(N, TrainTrace)> {
    cfg.validate()?;
    if train.is_empty() || train.len() != labels.len() {
        return Err(Error::Shape(format!("{} training inputs for {} labels", train.len(), labels.len())));
    }
    if val.is_empty() || val.len() != val_labels.len() {
        return Err(Error::Shape(format!(
            "{} validation inputs for {} labels",
            val.len(),
            val_labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batches"));
    let mut sampler = (dropout > 0.0).then(|| MaskSampler::new(dropout, derive_seed(seed, "dropout")));
    let mut adam = AdamState::new(&net, cfg.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let batch = cfg.batch_size.min(train.len());

    let mut snapshots = Vec::new();
    let mut best: Option<(N, Snapshot)> = None;
    let mut since_best = 0;
    let mut iterations_run = 0;
    for it in 1..=cfg.max_iterations {
        let mut grads = net.zeros_like();
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let (y, cache) = net.forward(train[i], sampler.as_mut())?;
            net.backward(&cache, 2.0 * (y - labels[i]) / batch as f64, &mut grads)?;
        }
        if let Some(c) = clip_norm {
            clip_global_norm(&mut grads, c);
        }
        adam.step(&mut net, &grads)?;
        iterations_run = it;
        if it % cfg.snapshot_every == 0 {
            let snap = Snapshot {
                iteration: it,
                validation_mae: validation_mae(&net, val, val_labels)?,
            };
            snapshots.push(snap);
            if best.as_ref().is_none_or(|(_, b)| snap.validation_mae < b.validation_mae) {
                best = Some((net.clone(), snap));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    let (best_net, best_snap) = match best {
        Some(b) => b,
        None => {
            // fewer iterations than one snapshot interval
            let snap = Snapshot {
                iteration: iterations_run,
                validation_mae: validation_mae(&net, val, val_labels)?,
            };
            snapshots.push(snap);
            (net, snap)
        }
    };
    Ok((
        best_net,
        TrainTrace {
            snapshots,
            best_iteration: best_snap.iteration,
            best_validation_mae: best_snap.validation_mae,
            iterations_run,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeepFamily {
    Mlp,
    Lstm,
}

/// Winner of a deep grid search.
#[derive(Debug, Clone)]
pub struct DeepFit {
    pub params: Params,
    pub dropout: f64,
    pub hyperparameters: BTreeMap<String, f64>,
    pub trace: TrainTrace,
    pub param_count: usize,
    pub grid_points: usize,
    /// Input grade scaling fit on the training split.
    pub input_scaler: Option<GradeScaler>,
    /// Validation was empty and the training set was used for snapshots.
    pub selected_on_train: bool,
}

struct Candidate {
    params: Params,
    dropout: f64,
    hyper: BTreeMap<String, f64>,
    trace: TrainTrace,
    param_count: usize,
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    let ka = (a.trace.best_validation_mae, a.param_count, a.trace.best_iteration);
    let kb = (b.trace.best_validation_mae, b.param_count, b.trace.best_iteration);
    ka.0 < kb.0 || (ka.0 == kb.0 && (ka.1, ka.2) < (kb.1, kb.2))
}

fn label_mean(labels: &[f64]) -> f64 {
    labels.iter().sum::<f64>() / labels.len() as f64
}

/// Zero output weights and the mean label as output bias, so optimization
/// begins at the constant predictor.
fn start_at_mean(mut blocks: Vec<&mut [f64]>, mean: f64) {
    let n = blocks.len();
    blocks[n - 2].iter_mut().for_each(|w| *w = 0.0);
    blocks[n - 1][0] = mean;
}

/// Grid search over the family's configurations.
pub fn fit_deep(
    family: DeepFamily,
    train: &CourseDataset,
    val: &CourseDataset,
    grid: &HyperGrid,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<DeepFit> {
    grid.validate()?;
    if train.len() < cfg.min_train_examples.max(1) {
        return Err(Error::InsufficientHistory(format!(
            "`{}` has {} training examples, at least {} required",
            train.target_course,
            train.len(),
            cfg.min_train_examples
        )));
    }
    let selected_on_train = val.is_empty();
    let selection = if selected_on_train { train } else { val };
    let labels = train.labels();
    let val_labels = selection.labels();
    let mean = label_mean(&labels);
    let width = train.priors.len();

    let mut best: Option<Candidate> = None;
    let mut grid_points = 0;
    let scaler;
    match family {
        DeepFamily::Mlp => {
            let st = GradeScaler::fit(train.examples.iter().map(|e| e.static_vector.as_slice()), width)?;
            let train_rows: Vec<Vec<f64>> = train.examples.iter().map(|e| st.transform(&e.static_vector)).collect();
            let val_rows: Vec<Vec<f64>> = selection.examples.iter().map(|e| st.transform(&e.static_vector)).collect();
            let xs: Vec<&[f64]> = train_rows.iter().map(Vec::as_slice).collect();
            let vs: Vec<&[f64]> = val_rows.iter().map(Vec::as_slice).collect();
            scaler = st;
            for (i, p) in grid.mlp_points().into_iter().enumerate() {
                grid_points += 1;
                let point_seed = derive_seed(seed, &format!("mlp/{i}"));
                let mut rng = ChaCha8Rng::seed_from_u64(point_seed);
                let mut net = Mlp::random(width, &vec![p.width; p.layers], &mut rng);
                start_at_mean(net.blocks_mut(), mean);
                let (net, trace) = train_network(net, &xs, &labels, &vs, &val_labels, p.dropout, None, cfg, point_seed)?;
                let cand = Candidate {
                    param_count: net.param_count(),
                    params: Params::Mlp(net),
                    dropout: p.dropout,
                    hyper: BTreeMap::from([
                        ("layers".to_string(), p.layers as f64),
                        ("width".to_string(), p.width as f64),
                        ("dropout".to_string(), p.dropout),
                    ]),
                    trace,
                };
                if best.as_ref().is_none_or(|b| better(&cand, b)) {
                    best = Some(cand);
                }
            }
        }
        DeepFamily::Lstm => {
            let st = GradeScaler::fit(
                train.examples.iter().flat_map(|e| e.sequence.iter().map(|s| s.vector.as_slice())),
                width,
            )?;
            let train_seqs: Vec<Vec<Vec<f64>>> = train.examples.iter().map(|e| sequence_input(e, Some(&st))).collect();
            let val_seqs: Vec<Vec<Vec<f64>>> = selection.examples.iter().map(|e| sequence_input(e, Some(&st))).collect();
            scaler = st;
            let xs: Vec<&[Vec<f64>]> = train_seqs.iter().map(Vec::as_slice).collect();
            let vs: Vec<&[Vec<f64>]> = val_seqs.iter().map(Vec::as_slice).collect();
            for (i, p) in grid.lstm_points().into_iter().enumerate() {
                grid_points += 1;
                let point_seed = derive_seed(seed, &format!("lstm/{i}"));
                let mut rng = ChaCha8Rng::seed_from_u64(point_seed);
                let mut net = StackedLstm::random(width, p.hidden, p.layers, &mut rng);
                start_at_mean(net.blocks_mut(), mean);
                let (net, trace) = train_network(
                    net,
                    &xs,
                    &labels,
                    &vs,
                    &val_labels,
                    p.dropout,
                    Some(cfg.lstm_clip_norm),
                    cfg,
                    point_seed,
                )?;
                let cand = Candidate {
                    param_count: net.param_count(),
                    params: Params::Lstm(net),
                    dropout: p.dropout,
                    hyper: BTreeMap::from([
                        ("hidden".to_string(), p.hidden as f64),
                        ("layers".to_string(), p.layers as f64),
                        ("dropout".to_string(), p.dropout),
                    ]),
                    trace,
                };
                if best.as_ref().is_none_or(|b| better(&cand, b)) {
                    best = Some(cand);
                }
            }
        }
    }
    let best = best.ok_or_else(|| Error::InvalidConfig("empty deep grid".into()))?;
    Ok(DeepFit {
        params: best.params,
        dropout: best.dropout,
        hyperparameters: best.hyper,
        trace: best.trace,
        param_count: best.param_count,
        grid_points,
        input_scaler: Some(scaler),
        selected_on_train,
    })
}
