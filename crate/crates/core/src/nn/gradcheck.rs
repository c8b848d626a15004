use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{compute_gradients, Mlp, Network, StackedLstm};
use crate::error::Result;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub blocks: Vec<BlockError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares backprop gradients of `(y_hat - label)^2` with central
/// differences of step `step`, parameter by parameter.
pub fn gradient_check<N: Network>(net: &N, input: &N::Input, label: f64, step: f64, tolerance: f64) -> Result<GradientReport> {
    let (_, cache) = net.forward(input, None)?;
    let analytic = compute_gradients(net, &cache, label)?;
    let mut probe = net.clone();
    let loss = |n: &N| -> Result<f64> {
        let y = n.predict(input)?;
        Ok((y - label) * (y - label))
    };
    let mut blocks = Vec::new();
    for (bi, (name, grad)) in analytic.blocks().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (k, &a) in grad.iter().enumerate() {
            let original = probe.blocks_mut()[bi][k];
            probe.blocks_mut()[bi][k] = original + step;
            let up = loss(&probe)?;
            probe.blocks_mut()[bi][k] = original - step;
            let down = loss(&probe)?;
            probe.blocks_mut()[bi][k] = original;
            let numeric = (up - down) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max(rel);
        }
        blocks.push(BlockError {
            name,
            max_rel_error: worst,
        });
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradientReport {
        blocks,
        max_rel_error,
        tolerance,
    })
}

fn jitter<N: Network, R: Rng>(net: &mut N, rng: &mut R) {
    for b in net.blocks_mut() {
        b.iter_mut().for_each(|v| *v += rng.random_range(-0.25..0.25));
    }
}

/// Gradient check on a randomly initialized MLP with a random input.
pub fn random_mlp_check(input: usize, hidden: &[usize], seed: u64) -> Result<GradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::random(input, hidden, &mut rng);
    jitter(&mut net, &mut rng);
    let x: Vec<f64> = (0..input).map(|_| rng.random_range(0.0..4.0)).collect();
    let label = rng.random_range(0.0..4.0);
    gradient_check(&net, &x[..], label, DEFAULT_FD_STEP, 1e-4)
}

/// Gradient check on a randomly initialized stacked LSTM and sequence.
pub fn random_lstm_check(input: usize, hidden: usize, layers: usize, len: usize, seed: u64) -> Result<GradientReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = StackedLstm::random(input, hidden, layers, &mut rng);
    jitter(&mut net, &mut rng);
    let seq: Vec<Vec<f64>> = (0..len).map(|_| (0..input).map(|_| rng.random_range(0.0..4.0)).collect()).collect();
    let label = rng.random_range(0.0..4.0);
    gradient_check(&net, &seq[..], label, DEFAULT_FD_STEP, 1e-4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer, Matrix, OutputHead};

    #[test]
    fn identity_network_is_exact() {
        // dyadic inputs and a power-of-two step make every difference exact
        let net = Mlp::new(
            vec![DenseLayer::new(Matrix::identity(3), vec![0.0; 3], Activation::Identity).unwrap()],
            OutputHead {
                weights: vec![1.0, 0.5, 0.25],
                bias: 0.0,
            },
        )
        .unwrap();
        let x = [1.0, 2.0, 0.5];
        let report = gradient_check(&net, &x[..], 1.5, 2f64.powi(-10), 1e-4).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn random_networks_pass() {
        for seed in 0..3 {
            let m = random_mlp_check(6, &[8, 5], seed).unwrap();
            assert!(m.passed(), "mlp seed {seed}: {m:?}");
            let l = random_lstm_check(4, 5, 2, 4, seed).unwrap();
            assert!(l.passed(), "lstm seed {seed}: {l:?}");
        }
    }

    #[test]
    fn detects_a_broken_gradient() {
        // a wrong analytic gradient shows up as a large relative error
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::random(3, &[4], &mut rng);
        let x = [1.0, 2.0, 3.0];
        let (_, cache) = net.forward(&x, None).unwrap();
        let mut g = compute_gradients(&net, &cache, 0.0).unwrap();
        g.head.bias *= 2.0;
        let y = net.predict(&x).unwrap();
        let numeric = ((y + 1e-5) * (y + 1e-5) - (y - 1e-5) * (y - 1e-5)) / 2e-5;
        assert!((g.head.bias - numeric).abs() / numeric.abs() > 0.5);
    }
}
