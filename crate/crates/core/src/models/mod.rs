//! The eight model families behind one artifact type with a uniform
//! prediction interface.

mod deep;
mod factor;
mod grid;
mod registry;
mod ridge;
mod scaling;

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{CourseDataset, Example, FeatureLayout};
use crate::error::{Error, Result};
use crate::grades::clip;
use crate::nn::{MaskSampler, Mlp, Network, StackedLstm};

pub use deep::{fit_deep, train_network, validation_mae, DeepFamily, DeepFit, Snapshot, TrainConfig, TrainTrace};
pub use factor::{fit_bias_only, fit_mf, BiasModel, Factor, MfConfig, MfModel};
pub use grid::{HyperGrid, LstmPoint, MlpPoint};
pub use registry::{artifact_path, load_artifact, load_registry, save_artifact, Registry};
pub use ridge::{design_row, fit_csr, ridge_solve, FeatureMode, RidgeModel, Standardizer};
pub use scaling::GradeScaler;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "BO")]
    BiasOnly,
    #[serde(rename = "MF")]
    MatrixFactorization,
    #[serde(rename = "CS_MF")]
    CourseMatrixFactorization,
    #[serde(rename = "CSR_PC")]
    CsrPriorCourses,
    #[serde(rename = "CSR_CF")]
    CsrContent,
    #[serde(rename = "CSR_HY")]
    CsrHybrid,
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "LSTM")]
    Lstm,
}

impl Family {
    /// Reporting order.
    pub const ALL: [Family; 8] = [
        Family::BiasOnly,
        Family::MatrixFactorization,
        Family::CourseMatrixFactorization,
        Family::CsrPriorCourses,
        Family::CsrContent,
        Family::CsrHybrid,
        Family::Mlp,
        Family::Lstm,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::BiasOnly => "BO",
            Family::MatrixFactorization => "MF",
            Family::CourseMatrixFactorization => "CS_MF",
            Family::CsrPriorCourses => "CSR_PC",
            Family::CsrContent => "CSR_CF",
            Family::CsrHybrid => "CSR_HY",
            Family::Mlp => "MLP",
            Family::Lstm => "LSTM",
        }
    }

    pub fn feature_mode(self) -> Option<FeatureMode> {
        match self {
            Family::CsrPriorCourses => Some(FeatureMode::PriorGrades),
            Family::CsrContent => Some(FeatureMode::Content),
            Family::CsrHybrid => Some(FeatureMode::Hybrid),
            _ => None,
        }
    }

    pub fn needs_content(self) -> bool {
        self.feature_mode().is_some_and(FeatureMode::uses_content)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model family `{s}`")))
    }
}

/// Family-specific learned parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Params {
    BiasOnly(BiasModel),
    Factorization(MfModel),
    Ridge(RidgeModel),
    Mlp(Mlp),
    Lstm(StackedLstm),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub grid_preset: String,
    pub grid_points: usize,
    pub train_examples: usize,
    pub validation_examples: usize,
    pub iterations: usize,
    pub chosen_iteration: usize,
    pub validation_mae: f64,
    pub snapshots: Vec<Snapshot>,
    pub notes: Vec<String>,
}

/// A trained model for one target course.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub family: Family,
    pub target_course: String,
    pub priors: Vec<String>,
    pub feature_layout: Option<FeatureLayout>,
    pub hyperparameters: BTreeMap<String, f64>,
    pub dropout_rate: f64,
    pub tau_inv: f64,
    pub seed: u64,
    /// Grade scaling applied to deep-model inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_scaler: Option<GradeScaler>,
    pub report: TrainingReport,
    pub params: Params,
}

/// LSTM input: one multi-hot vector per enrolled term, optionally scaled.
pub fn sequence_input(example: &Example, scaler: Option<&GradeScaler>) -> Vec<Vec<f64>> {
    example
        .sequence
        .iter()
        .map(|s| match scaler {
            Some(sc) => sc.transform(&s.vector),
            None => s.vector.clone(),
        })
        .collect()
}

impl ModelArtifact {
    pub fn new(family: Family, target_course: &str, priors: &[String], params: Params) -> Self {
        ModelArtifact {
            family,
            target_course: target_course.to_string(),
            priors: priors.to_vec(),
            feature_layout: None,
            hyperparameters: BTreeMap::new(),
            dropout_rate: 0.0,
            tau_inv: 0.0,
            seed: 0,
            input_scaler: None,
            report: TrainingReport::default(),
            params,
        }
    }

    pub fn check_example(&self, example: &Example) -> Result<()> {
        if example.n_priors() != self.priors.len() {
            return Err(Error::EncodingMismatch(format!(
                "example encodes {} prior courses, `{}` model expects {}",
                example.n_priors(),
                self.target_course,
                self.priors.len()
            )));
        }
        Ok(())
    }

    fn check_dataset(&self, ds: &CourseDataset) -> Result<()> {
        if ds.priors != self.priors || ds.target_course != self.target_course {
            return Err(Error::EncodingMismatch(format!(
                "dataset for `{}` does not match the `{}` model's prior-course map",
                ds.target_course, self.target_course
            )));
        }
        Ok(())
    }

    /// Static input as the network sees it.
    pub fn static_input<'a>(&self, example: &'a Example) -> Cow<'a, [f64]> {
        match &self.input_scaler {
            Some(s) => Cow::Owned(s.transform(&example.static_vector)),
            None => Cow::Borrowed(&example.static_vector),
        }
    }

    /// Deterministic prediction before clipping.
    pub fn predict_raw(&self, example: &Example) -> Result<f64> {
        self.check_example(example)?;
        match &self.params {
            Params::BiasOnly(m) => Ok(m.predict(&example.student_id, &self.target_course)),
            Params::Factorization(m) => Ok(m.predict(&example.student_id, &self.target_course)),
            Params::Ridge(m) => m.predict(example),
            Params::Mlp(n) => n.predict(&self.static_input(example)),
            Params::Lstm(n) => n.predict(&sequence_input(example, self.input_scaler.as_ref())),
        }
    }

    /// Deterministic prediction clipped to the grade range.
    pub fn predict_point(&self, example: &Example) -> Result<f64> {
        self.predict_raw(example).map(clip)
    }

    pub fn predict_dataset(&self, ds: &CourseDataset) -> Result<Vec<f64>> {
        self.check_dataset(ds)?;
        ds.examples.iter().map(|e| self.predict_point(e)).collect()
    }

    pub fn supports_dropout(&self) -> bool {
        matches!(self.params, Params::Mlp(_) | Params::Lstm(_))
    }

    /// One stochastic forward pass with dropout masks from `sampler`, unclipped.
    pub fn predict_with_dropout(&self, example: &Example, sampler: &mut MaskSampler) -> Result<f64> {
        self.check_example(example)?;
        match &self.params {
            Params::Mlp(n) => Ok(n.forward(&self.static_input(example), Some(sampler))?.0),
            Params::Lstm(n) => Ok(n.forward(&sequence_input(example, self.input_scaler.as_ref()), Some(sampler))?.0),
            _ => Err(Error::UnsupportedFamily(self.family.label().to_string())),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Deterministic child seed for a named sub-task.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = splitmix(base ^ 0x6a09_e667_f3bc_c908);
    for b in label.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PriorAttempt;

    fn example(grades: &[f64]) -> Example {
        let history = grades
            .iter()
            .enumerate()
            .filter(|(_, g)| **g > 0.0)
            .map(|(slot, &grade)| PriorAttempt {
                slot,
                term: slot as u32,
                grade,
            })
            .collect();
        Example::new("s1", history, grades.len(), None, 3.0, 9)
    }

    fn ridge(weights: Vec<f64>, intercept: f64) -> ModelArtifact {
        let n = weights.len();
        ModelArtifact::new(
            Family::CsrPriorCourses,
            "T",
            &(0..n).map(|i| format!("P{i}")).collect::<Vec<_>>(),
            Params::Ridge(RidgeModel {
                mode: FeatureMode::PriorGrades,
                lambda: 1.0,
                weights,
                intercept,
                standardizer: None,
            }),
        )
    }

    #[test]
    fn family_labels_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.label().parse::<Family>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.label()));
        }
        assert!("XYZ".parse::<Family>().is_err());
    }

    #[test]
    fn point_predictions_are_clipped() {
        let e = example(&[1.0, 2.0]);
        let hi = ridge(vec![1.0, 1.0], 1.7);
        assert_eq!(hi.predict_raw(&e).unwrap(), 4.7);
        assert_eq!(hi.predict_point(&e).unwrap(), 4.0);
        let lo = ridge(vec![-1.0, 0.0], 0.7);
        assert!((lo.predict_raw(&e).unwrap() + 0.3).abs() < 1e-15);
        assert_eq!(lo.predict_point(&e).unwrap(), 0.0);
    }

    #[test]
    fn encoding_mismatch_is_reported() {
        let m = ridge(vec![1.0, 1.0], 0.0);
        assert!(matches!(m.predict_point(&example(&[1.0])), Err(Error::EncodingMismatch(_))));
    }

    #[test]
    fn non_dropout_families_refuse_sampling() {
        let m = ridge(vec![1.0], 0.0);
        let mut s = MaskSampler::new(0.1, 0);
        assert!(!m.supports_dropout());
        assert!(matches!(
            m.predict_with_dropout(&example(&[2.0]), &mut s),
            Err(Error::UnsupportedFamily(_))
        ));
    }

    #[test]
    fn artifact_json_round_trip_is_bit_exact() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut a = ModelArtifact::new(
            Family::Mlp,
            "T",
            &["A".into(), "B".into()],
            Params::Mlp(Mlp::random(2, &[5, 3], &mut rng)),
        );
        a.dropout_rate = 0.1;
        a.tau_inv = 0.17;
        let json = a.to_json().unwrap();
        let back = ModelArtifact::from_json(&json).unwrap();
        assert_eq!(a, back);
        assert_eq!(json, back.to_json().unwrap());
        let e = example(&[3.3, 0.0]);
        assert_eq!(a.predict_raw(&e).unwrap().to_bits(), back.predict_raw(&e).unwrap().to_bits());
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(5, "mlp/0"), derive_seed(5, "mlp/0"));
    }
}
