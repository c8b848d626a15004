//! Bias-only and matrix-factorization baselines over the full grade matrix.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::GradeRecord;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 500;
const SWEEP_TOLERANCE: f64 = 1e-12;

/// `g = b0 + b_s + b_c`; unseen entities contribute 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasModel {
    pub global: f64,
    pub lambda: f64,
    pub students: BTreeMap<String, f64>,
    pub courses: BTreeMap<String, f64>,
}

impl BiasModel {
    pub fn predict(&self, student: &str, course: &str) -> f64 {
        self.global + self.students.get(student).copied().unwrap_or(0.0) + self.courses.get(course).copied().unwrap_or(0.0)
    }
}

struct Indexed {
    students: Vec<String>,
    courses: Vec<String>,
    /// `(student index, course index, grade)` in canonical order.
    ratings: Vec<(usize, usize, f64)>,
    mean: f64,
}

fn index(records: &[GradeRecord]) -> Result<Indexed> {
    if records.is_empty() {
        return Err(Error::InsufficientHistory("no grade records to fit".into()));
    }
    let mut students: BTreeMap<&str, usize> = records.iter().map(|r| (r.student_id.as_str(), 0)).collect();
    let mut courses: BTreeMap<&str, usize> = records.iter().map(|r| (r.course_id.as_str(), 0)).collect();
    for (i, v) in students.values_mut().enumerate() {
        *v = i;
    }
    for (i, v) in courses.values_mut().enumerate() {
        *v = i;
    }
    let mut sorted: Vec<&GradeRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.student_id, &a.course_id, a.term).cmp(&(&b.student_id, &b.course_id, b.term)));
    let ratings: Vec<(usize, usize, f64)> = sorted
        .iter()
        .map(|r| (students[r.student_id.as_str()], courses[r.course_id.as_str()], r.grade))
        .collect();
    let mean = ratings.iter().map(|r| r.2).sum::<f64>() / ratings.len() as f64;
    Ok(Indexed {
        students: students.keys().map(|s| s.to_string()).collect(),
        courses: courses.keys().map(|s| s.to_string()).collect(),
        ratings,
        mean,
    })
}

/// Ridge-regularized biases by alternating closed-form updates, with the
/// global bias fixed at the mean grade.
pub fn fit_bias_only(records: &[GradeRecord], lambda: f64) -> Result<BiasModel> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::out_of_range("bias regularization", lambda));
    }
    let ix = index(records)?;
    let mut bs = vec![0.0; ix.students.len()];
    let mut bc = vec![0.0; ix.courses.len()];
    let mut sum = vec![0.0; bs.len().max(bc.len())];
    let mut count = vec![0usize; sum.len()];
    for _ in 0..MAX_SWEEPS {
        let mut change: f64 = 0.0;
        sum.iter_mut().for_each(|v| *v = 0.0);
        count.iter_mut().for_each(|v| *v = 0);
        for &(s, c, g) in &ix.ratings {
            sum[s] += g - ix.mean - bc[c];
            count[s] += 1;
        }
        for (s, b) in bs.iter_mut().enumerate() {
            let new = sum[s] / (lambda + count[s] as f64);
            change = change.max((new - *b).abs());
            *b = new;
        }
        sum.iter_mut().for_each(|v| *v = 0.0);
        count.iter_mut().for_each(|v| *v = 0);
        for &(s, c, g) in &ix.ratings {
            sum[c] += g - ix.mean - bs[s];
            count[c] += 1;
        }
        for (c, b) in bc.iter_mut().enumerate() {
            let new = sum[c] / (lambda + count[c] as f64);
            change = change.max((new - *b).abs());
            *b = new;
        }
        if change < SWEEP_TOLERANCE {
            break;
        }
    }
    Ok(BiasModel {
        global: ix.mean,
        lambda,
        students: ix.students.into_iter().zip(bs).collect(),
        courses: ix.courses.into_iter().zip(bc).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfConfig {
    pub rank: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            rank: 4,
            lambda: 0.05,
            learning_rate: 0.01,
            epochs: 60,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub bias: f64,
    pub latent: Vec<f64>,
}

/// `g = b0 + b_s + b_c + p_s . q_c`; unseen entities drop their terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfModel {
    pub global: f64,
    pub config: MfConfig,
    pub students: BTreeMap<String, Factor>,
    pub courses: BTreeMap<String, Factor>,
}

impl MfModel {
    pub fn predict(&self, student: &str, course: &str) -> f64 {
        let s = self.students.get(student);
        let c = self.courses.get(course);
        let mut g = self.global;
        if let Some(s) = s {
            g += s.bias;
        }
        if let Some(c) = c {
            g += c.bias;
        }
        if let (Some(s), Some(c)) = (s, c) {
            g += crate::nn::dot(&s.latent, &c.latent);
        }
        g
    }
}

/// Stochastic gradient descent on squared error with L2 penalties; the
/// global bias is fixed at the mean grade.
pub fn fit_mf(records: &[GradeRecord], config: MfConfig) -> Result<MfModel> {
    if config.rank == 0 {
        return Err(Error::InvalidConfig("matrix factorization rank must be at least 1".into()));
    }
    if !(config.learning_rate > 0.0 && config.lambda >= 0.0) {
        return Err(Error::InvalidConfig("matrix factorization needs lr > 0 and lambda >= 0".into()));
    }
    let ix = index(records)?;
    let k = config.rank;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, config.init_scale).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut p: Vec<f64> = (0..ix.students.len() * k).map(|_| init.sample(&mut rng)).collect();
    let mut q: Vec<f64> = (0..ix.courses.len() * k).map(|_| init.sample(&mut rng)).collect();
    let mut bs = vec![0.0; ix.students.len()];
    let mut bc = vec![0.0; ix.courses.len()];
    let mut order: Vec<usize> = (0..ix.ratings.len()).collect();
    let (lr, lambda) = (config.learning_rate, config.lambda);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &r in &order {
            let (s, c, g) = ix.ratings[r];
            let ps = &mut p[s * k..(s + 1) * k];
            let qc = &mut q[c * k..(c + 1) * k];
            let err = g - (ix.mean + bs[s] + bc[c] + crate::nn::dot(ps, qc));
            bs[s] += lr * (err - lambda * bs[s]);
            bc[c] += lr * (err - lambda * bc[c]);
            for j in 0..k {
                let (pv, qv) = (ps[j], qc[j]);
                ps[j] += lr * (err * qv - lambda * pv);
                qc[j] += lr * (err * pv - lambda * qv);
            }
        }
    }
    let pack = |names: Vec<String>, bias: Vec<f64>, lat: Vec<f64>| -> BTreeMap<String, Factor> {
        names
            .into_iter()
            .zip(bias)
            .zip(lat.chunks_exact(k))
            .map(|((n, b), l)| {
                (
                    n,
                    Factor {
                        bias: b,
                        latent: l.to_vec(),
                    },
                )
            })
            .collect()
    };
    Ok(MfModel {
        global: ix.mean,
        config,
        students: pack(ix.students, bs, p),
        courses: pack(ix.courses, bc, q),
    })
}
