use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameter candidates for every family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub preset: String,
    pub mlp_layers: Vec<usize>,
    pub mlp_width: Vec<usize>,
    pub lstm_hidden: Vec<usize>,
    pub lstm_layers: Vec<usize>,
    pub dropout: Vec<f64>,
    pub bias_lambda: Vec<f64>,
    pub mf_rank: Vec<usize>,
    pub mf_lambda: Vec<f64>,
    pub ridge_lambda: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpPoint {
    pub layers: usize,
    pub width: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmPoint {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl HyperGrid {
    pub const PRESETS: [&'static str; 3] = ["desk", "paper", "bench"];

    /// Desk-scale default.
    pub fn desk() -> Self {
        HyperGrid {
            preset: "desk".into(),
            mlp_layers: vec![2, 3],
            mlp_width: vec![8, 16, 32],
            lstm_hidden: vec![16, 32],
            lstm_layers: vec![1, 2],
            dropout: vec![0.1, 0.2],
            bias_lambda: vec![0.1, 1.0, 5.0],
            mf_rank: vec![2, 4],
            mf_lambda: vec![0.02, 0.1],
            ridge_lambda: vec![0.01, 0.1, 1.0, 10.0],
        }
    }

    /// Subsampled full ranges: 2 to 10 layers of 2 to 50 units, LSTM hidden
    /// 10 to 100 with 1 to 5 stacked layers.
    pub fn paper() -> Self {
        HyperGrid {
            preset: "paper".into(),
            mlp_layers: vec![2, 4, 6, 8, 10],
            mlp_width: vec![2, 10, 20, 30, 40, 50],
            lstm_hidden: vec![10, 25, 50, 75, 100],
            lstm_layers: vec![1, 2, 3, 4, 5],
            dropout: vec![0.1, 0.2, 0.3],
            bias_lambda: vec![0.1, 1.0, 5.0, 10.0],
            mf_rank: vec![2, 4, 8, 16],
            mf_lambda: vec![0.01, 0.05, 0.1],
            ridge_lambda: vec![0.01, 0.1, 1.0, 10.0],
        }
    }

    /// Single deep configuration per family, for fast benchmark sweeps.
    pub fn bench() -> Self {
        HyperGrid {
            preset: "bench".into(),
            mlp_layers: vec![2],
            mlp_width: vec![32],
            lstm_hidden: vec![16],
            lstm_layers: vec![2],
            dropout: vec![0.1],
            bias_lambda: vec![1.0],
            mf_rank: vec![2],
            mf_lambda: vec![0.05],
            ridge_lambda: vec![0.01, 0.1, 1.0, 10.0],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "bench" => Ok(Self::bench()),
            other => Err(Error::InvalidConfig(format!(
                "unknown grid preset `{other}` (expected one of {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("mlp_layers", self.mlp_layers.len()),
            ("mlp_width", self.mlp_width.len()),
            ("lstm_hidden", self.lstm_hidden.len()),
            ("lstm_layers", self.lstm_layers.len()),
            ("dropout", self.dropout.len()),
            ("bias_lambda", self.bias_lambda.len()),
            ("mf_rank", self.mf_rank.len()),
            ("mf_lambda", self.mf_lambda.len()),
            ("ridge_lambda", self.ridge_lambda.len()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, n)| *n == 0) {
            return Err(Error::InvalidConfig(format!("grid list `{name}` is empty")));
        }
        let sizes = self
            .mlp_layers
            .iter()
            .chain(&self.mlp_width)
            .chain(&self.lstm_hidden)
            .chain(&self.lstm_layers);
        if sizes.chain(&self.mf_rank).any(|&v| v == 0) {
            return Err(Error::InvalidConfig("layer counts, widths and ranks must be at least 1".into()));
        }
        if self.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::InvalidConfig("dropout rates must lie in [0, 1)".into()));
        }
        let penalties = self.bias_lambda.iter().chain(&self.mf_lambda);
        if penalties.clone().any(|l| l.is_nan() || *l < 0.0) || self.ridge_lambda.iter().any(|l| l.is_nan() || *l <= 0.0) {
            return Err(Error::InvalidConfig(
                "regularization strengths must be non-negative (ridge: positive)".into(),
            ));
        }
        Ok(())
    }

    pub fn mlp_points(&self) -> Vec<MlpPoint> {
        let mut out = Vec::new();
        for &layers in &self.mlp_layers {
            for &width in &self.mlp_width {
                for &dropout in &self.dropout {
                    out.push(MlpPoint { layers, width, dropout });
                }
            }
        }
        out
    }

    pub fn lstm_points(&self) -> Vec<LstmPoint> {
        let mut out = Vec::new();
        for &hidden in &self.lstm_hidden {
            for &layers in &self.lstm_layers {
                for &dropout in &self.dropout {
                    out.push(LstmPoint { hidden, layers, dropout });
                }
            }
        }
        out
    }
}
