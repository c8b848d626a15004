//! Dense network kernels: MLP and stacked LSTM forward/backward passes,
//! inverted dropout, Adam, and a finite-difference gradient checker.
//!
//! Everything is `f64` and single-example; batching is a loop in the trainer.

mod adam;
mod gradcheck;
mod lstm;
mod mlp;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use gradcheck::{gradient_check, random_lstm_check, random_mlp_check, BlockError, GradientReport, DEFAULT_FD_STEP};
pub use lstm::{LstmCache, LstmCell, LstmGate, LstmState, StackedLstm};
pub use mlp::{Activation, DenseLayer, Mlp, MlpCache};

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

/// Identity stamped on a parameter set; caches remember the tag they were
/// produced under.
pub(crate) fn next_tag() -> u64 {
    NEXT_TAG.fetch_add(1, Ordering::Relaxed)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier<R: Rng>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self * x`
    #[inline]
    pub fn matvec_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += self^T * d`
    #[inline]
    pub fn t_matvec_add(&self, d: &[f64], out: &mut [f64]) {
        debug_assert_eq!(d.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&di, row) in d.iter().zip(self.data.chunks_exact(self.cols)) {
            if di != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += di * w;
                }
            }
        }
    }

    /// `self += d x^T`
    #[inline]
    pub fn add_outer(&mut self, d: &[f64], x: &[f64]) {
        debug_assert_eq!(d.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (&di, row) in d.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            if di != 0.0 {
                for (w, xj) in row.iter_mut().zip(x) {
                    *w += di * xj;
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Final linear map from the last hidden activation to the scalar prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl OutputHead {
    pub fn xavier<R: Rng>(width: usize, rng: &mut R) -> Self {
        let m = Matrix::xavier(1, width, width, 1, rng);
        OutputHead {
            weights: m.data,
            bias: 0.0,
        }
    }

    #[inline]
    pub fn apply(&self, h: &[f64]) -> f64 {
        dot(&self.weights, h) + self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutPlacement {
    /// After every hidden activation of an MLP.
    HiddenActivations,
    /// On each stacked-LSTM layer output; recurrent connections are untouched.
    LayerOutputs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub rate: f64,
    pub placement: DropoutPlacement,
    pub seed: u64,
}

impl DropoutSpec {
    pub fn new(rate: f64, placement: DropoutPlacement, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::out_of_range("dropout rate", rate));
        }
        Ok(DropoutSpec { rate, placement, seed })
    }
}

/// Draws inverted-dropout masks: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
#[derive(Debug, Clone)]
pub struct MaskSampler {
    rate: f64,
    keep_scale: f64,
    rng: ChaCha8Rng,
}

impl MaskSampler {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self::from_rng(rate, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_spec(spec: &DropoutSpec) -> Self {
        Self::new(spec.rate, spec.seed)
    }

    pub fn from_rng(rate: f64, rng: ChaCha8Rng) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
        MaskSampler {
            rate,
            keep_scale: 1.0 / (1.0 - rate),
            rng,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn sample(&mut self, n: usize) -> Vec<f64> {
        if self.rate == 0.0 {
            return vec![1.0; n];
        }
        (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    0.0
                } else {
                    self.keep_scale
                }
            })
            .collect()
    }
}

/// Shared surface of the trainable networks.
pub trait Network: Clone {
    type Input: ?Sized;
    type Cache;

    /// Forward pass keeping everything backprop needs. With `dropout`,
    /// masks are drawn from the sampler.
    fn forward(&self, input: &Self::Input, dropout: Option<&mut MaskSampler>) -> Result<(f64, Self::Cache)>;

    /// Deterministic pass without a cache.
    fn predict(&self, input: &Self::Input) -> Result<f64>;

    /// Accumulates `d_out * d(output)/d(params)` into `grads`.
    fn backward(&self, cache: &Self::Cache, d_out: f64, grads: &mut Self) -> Result<()>;

    fn cache_output(cache: &Self::Cache) -> f64;

    /// Same shapes, all parameters zero.
    fn zeros_like(&self) -> Self;

    /// Named parameter blocks in a fixed order.
    fn blocks(&self) -> Vec<(String, &[f64])>;

    /// Mutable blocks in the same order as [`Network::blocks`]. Invalidates
    /// outstanding caches.
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }
}

/// Gradients of the squared error `(y_hat - label)^2`.
pub fn compute_gradients<N: Network>(net: &N, cache: &N::Cache, label: f64) -> Result<N> {
    let mut grads = net.zeros_like();
    let d_out = 2.0 * (N::cache_output(cache) - label);
    net.backward(cache, d_out, &mut grads)?;
    Ok(grads)
}

/// Scales every gradient block in place.
pub fn scale_blocks<N: Network>(grads: &mut N, factor: f64) {
    for b in grads.blocks_mut() {
        b.iter_mut().for_each(|g| *g *= factor);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
