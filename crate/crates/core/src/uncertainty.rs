//! Monte-Carlo dropout predictive distributions, prediction intervals and
//! confidence-conditioned error analysis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::eval::{ticks, Confusion, RiskRule};
use crate::grades::clip;
use crate::models::ModelArtifact;
use crate::nn::MaskSampler;

pub const DEFAULT_SAMPLES: usize = 100;
pub const CALIBRATION_LEVELS: [f64; 4] = [0.5, 0.8, 0.9, 0.95];

/// Sample set of stochastic forward passes with its mean and variance
/// `tau_inv + mean(s^2) - mean(s)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub samples: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub tau_inv: f64,
}

impl PredictiveDistribution {
    /// Aggregates on the sorted samples so the result does not depend on
    /// sample order, and shifts by the smallest sample so identical samples
    /// give exactly zero spread.
    pub fn from_samples(samples: Vec<f64>, tau_inv: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::out_of_range("MC sample count", samples.len()));
        }
        if !(tau_inv >= 0.0 && tau_inv.is_finite()) {
            return Err(Error::out_of_range("tau_inv", tau_inv));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::out_of_range("MC sample", "non-finite"));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let shift = sorted[0];
        let n = sorted.len() as f64;
        let d_mean = sorted.iter().map(|s| s - shift).sum::<f64>() / n;
        let spread = sorted.iter().map(|s| (s - shift - d_mean).powi(2)).sum::<f64>() / n;
        Ok(PredictiveDistribution {
            samples,
            mean: shift + d_mean,
            variance: tau_inv + spread,
            tau_inv,
        })
    }

    /// Point distribution for families without dropout: the deterministic
    /// prediction repeated, so the variance is exactly `tau_inv`.
    pub fn degenerate(mean: f64, samples: usize, tau_inv: f64) -> Result<Self> {
        Self::from_samples(vec![mean; samples.max(2)], tau_inv)
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Variance contributed by the samples alone.
    pub fn sample_variance(&self) -> f64 {
        self.variance - self.tau_inv
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn with_tau_inv(&self, tau_inv: f64) -> Result<Self> {
        Self::from_samples(self.samples.clone(), tau_inv)
    }
}

/// Per-sample mask stream: stream `t` of a ChaCha8 generator keyed by `seed`.
pub fn sample_stream(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// `samples` stochastic passes with independent dropout masks at the
/// artifact's dropout rate.
pub fn predict_mc(artifact: &ModelArtifact, example: &Example, samples: usize, tau_inv: f64, seed: u64) -> Result<PredictiveDistribution> {
    if !artifact.supports_dropout() {
        return Err(Error::UnsupportedFamily(artifact.family.label().to_string()));
    }
    if samples < 2 {
        return Err(Error::out_of_range("MC sample count", samples));
    }
    let out = (0..samples)
        .map(|t| {
            let mut sampler = MaskSampler::from_rng(artifact.dropout_rate, sample_stream(seed, t));
            artifact.predict_with_dropout(example, &mut sampler)
        })
        .collect::<Result<Vec<f64>>>()?;
    PredictiveDistribution::from_samples(out, tau_inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
}

impl PredictionInterval {
    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Display copy restricted to the grade range.
    pub fn clipped(&self) -> Self {
        PredictionInterval {
            level: self.level,
            lower: clip(self.lower),
            upper: clip(self.upper),
        }
    }
}

/// Two-sided standard-normal critical value for central coverage `level`.
pub fn critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::out_of_range("interval level", level));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(0.5 + level / 2.0))
}

pub fn interval(dist: &PredictiveDistribution, level: f64) -> Result<PredictionInterval> {
    interval_from(dist.mean, dist.variance, level)
}

pub fn interval_from(mean: f64, variance: f64, level: f64) -> Result<PredictionInterval> {
    let half = critical_value(level)? * variance.sqrt();
    Ok(PredictionInterval {
        level,
        lower: mean - half,
        upper: mean + half,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub level: f64,
    pub empirical: f64,
}

fn coverage(means: &[f64], variances: &[f64], labels: &[f64], level: f64) -> Result<f64> {
    let z = critical_value(level)?;
    let hits = means
        .iter()
        .zip(variances)
        .zip(labels)
        .filter(|((m, v), y)| {
            let half = z * v.sqrt();
            **m - half <= **y && **y <= **m + half
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn check_pairs(dists: &[PredictiveDistribution], labels: &[f64]) -> Result<()> {
    if dists.is_empty() || dists.len() != labels.len() {
        return Err(Error::Shape(format!("{} distributions for {} labels", dists.len(), labels.len())));
    }
    Ok(())
}

/// Fraction of labels inside the unclipped interval at each level.
pub fn calibration_curve(dists: &[PredictiveDistribution], labels: &[f64], levels: &[f64]) -> Result<Vec<CalibrationPoint>> {
    check_pairs(dists, labels)?;
    let means: Vec<f64> = dists.iter().map(|d| d.mean).collect();
    let vars: Vec<f64> = dists.iter().map(|d| d.variance).collect();
    levels
        .iter()
        .map(|&level| {
            Ok(CalibrationPoint {
                level,
                empirical: coverage(&means, &vars, labels, level)?,
            })
        })
        .collect()
}

/// Indices ordered by ascending variance, ties by id.
pub fn confidence_ranking(dists: &[PredictiveDistribution], ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dists.len()).collect();
    order.sort_by(|&a, &b| dists[a].variance.total_cmp(&dists[b].variance).then_with(|| ids[a].cmp(&ids[b])));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    Mae,
    Tick,
}

fn point_error(metric: ErrorMetric, mean: f64, label: f64) -> f64 {
    match metric {
        ErrorMetric::Mae => (clip(mean) - label).abs(),
        ErrorMetric::Tick => ticks(mean, label) as f64,
    }
}

/// Metric over the `k` most confident predictions.
pub fn error_at_k(dists: &[PredictiveDistribution], labels: &[f64], ids: &[String], k: usize, metric: ErrorMetric) -> Result<f64> {
    check_pairs(dists, labels)?;
    if ids.len() != dists.len() {
        return Err(Error::Shape(format!("{} ids for {} distributions", ids.len(), dists.len())));
    }
    if k == 0 || k > dists.len() {
        return Err(Error::out_of_range("k", k));
    }
    let order = confidence_ranking(dists, ids);
    let total: f64 = order[..k].iter().map(|&i| point_error(metric, dists[i].mean, labels[i])).sum();
    Ok(total / k as f64)
}

/// `k` values at each tenth of the sample (rounded up), with their error.
pub fn error_at_deciles(
    dists: &[PredictiveDistribution],
    labels: &[f64],
    ids: &[String],
    metric: ErrorMetric,
) -> Result<Vec<(usize, f64)>> {
    decile_sizes(dists.len())
        .into_iter()
        .map(|k| Ok((k, error_at_k(dists, labels, ids, k, metric)?)))
        .collect()
}

fn decile_sizes(n: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (1..=10).map(|d| (d * n).div_ceil(10).max(1)).collect();
    ks.dedup();
    ks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    /// Fraction of most-confident predictions retained.
    pub cut: f64,
    pub fnr: f64,
    pub fpr: f64,
    pub coverage: f64,
}

/// FNR and FPR of the at-risk rule on the most confident 10%, 20%, ... of
/// predictions.
pub fn risk_confidence_curves(dists: &[PredictiveDistribution], labels: &[f64], ids: &[String], rule: RiskRule) -> Result<Vec<RiskPoint>> {
    check_pairs(dists, labels)?;
    let order = confidence_ranking(dists, ids);
    let n = dists.len();
    Ok((1..=10)
        .map(|d| {
            let k = (d * n).div_ceil(10).max(1);
            let mut c = Confusion::default();
            for &i in &order[..k] {
                match (rule.at_risk(dists[i].mean), rule.at_risk(labels[i])) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, false) => c.tn += 1,
                    (false, true) => c.fn_ += 1,
                }
            }
            RiskPoint {
                cut: d as f64 / 10.0,
                fnr: c.fnr(),
                fpr: c.fpr(),
                coverage: k as f64 / n as f64,
            }
        })
        .collect())
}

/// Mean absolute calibration error over [`CALIBRATION_LEVELS`].
pub fn calibration_error(dists: &[PredictiveDistribution], labels: &[f64]) -> Result<f64> {
    let curve = calibration_curve(dists, labels, &CALIBRATION_LEVELS)?;
    Ok(curve.iter().map(|p| (p.empirical - p.level).abs()).sum::<f64>() / curve.len() as f64)
}

/// Picks the `tau_inv` from `grid` with the smallest calibration error on
/// the given distributions (their own `tau_inv` is replaced). Ties go to the
/// smaller value.
pub fn tune_tau(dists: &[PredictiveDistribution], labels: &[f64], grid: &[f64]) -> Result<f64> {
    check_pairs(dists, labels)?;
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty tau_inv grid".into()));
    }
    if grid.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(Error::InvalidConfig("tau_inv candidates must be finite and non-negative".into()));
    }
    let mut candidates = grid.to_vec();
    candidates.sort_by(f64::total_cmp);
    let means: Vec<f64> = dists.iter().map(|d| d.mean).collect();
    let spreads: Vec<f64> = dists.iter().map(PredictiveDistribution::sample_variance).collect();
    let mut best = (f64::INFINITY, candidates[0]);
    for &tau in &candidates {
        let vars: Vec<f64> = spreads.iter().map(|s| s + tau).collect();
        let mut err = 0.0;
        for level in CALIBRATION_LEVELS {
            err += (coverage(&means, &vars, labels, level)? - level).abs();
        }
        err /= CALIBRATION_LEVELS.len() as f64;
        if err < best.0 {
            best = (err, tau);
        }
    }
    Ok(best.1)
}

/// Evenly spaced `tau_inv` candidates `0, step, 2 step, ..., max`.
pub fn tau_grid(max: f64, step: f64) -> Vec<f64> {
    let n = (max / step).round() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape("spearman needs two equal-length series of length >= 2".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}
