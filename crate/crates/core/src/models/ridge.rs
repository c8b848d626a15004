//! Course-specific ridge regressions on prior grades, content features, or both.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{CourseDataset, Example};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    PriorGrades,
    Content,
    Hybrid,
}

impl FeatureMode {
    pub fn uses_content(self) -> bool {
        !matches!(self, FeatureMode::PriorGrades)
    }
}

/// Zero-mean, unit-variance scaling of selected columns, fit on train.
/// Constant columns keep unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<usize>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&[f64]], columns: &[usize]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut means = Vec::with_capacity(columns.len());
        let mut scales = Vec::with_capacity(columns.len());
        for &c in columns {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            means.push(mean);
            scales.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer {
            columns: columns.to_vec(),
            means,
            scales,
        }
    }

    pub fn apply(&self, row: &mut [f64]) {
        for ((&c, m), s) in self.columns.iter().zip(&self.means).zip(&self.scales) {
            row[c] = (row[c] - m) / s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub mode: FeatureMode,
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub standardizer: Option<Standardizer>,
}

impl RidgeModel {
    pub fn predict(&self, example: &Example) -> Result<f64> {
        let x = design_row(self.mode, example, self.standardizer.as_ref())?;
        if x.len() != self.weights.len() {
            return Err(Error::EncodingMismatch(format!(
                "example has {} features, model expects {}",
                x.len(),
                self.weights.len()
            )));
        }
        Ok(crate::nn::dot(&self.weights, &x) + self.intercept)
    }
}

fn content_of(example: &Example) -> Result<&[f64]> {
    example
        .content
        .as_deref()
        .ok_or_else(|| Error::MissingFeatures(format!("student `{}` has no content features", example.student_id)))
}

/// Input row for `mode`: prior grades, (standardized) content, or both concatenated.
pub fn design_row(mode: FeatureMode, example: &Example, standardizer: Option<&Standardizer>) -> Result<Vec<f64>> {
    let content = || -> Result<Vec<f64>> {
        let mut c = content_of(example)?.to_vec();
        if let Some(s) = standardizer {
            s.apply(&mut c);
        }
        Ok(c)
    };
    Ok(match mode {
        FeatureMode::PriorGrades => example.static_vector.clone(),
        FeatureMode::Content => content()?,
        FeatureMode::Hybrid => {
            let mut row = example.static_vector.clone();
            row.extend(content()?);
            row
        }
    })
}

/// Ridge regression with an unpenalized intercept: centers the data, then
/// solves `(Xc'Xc + lambda I) w = Xc'yc` by Cholesky.
pub fn ridge_solve(rows: &[Vec<f64>], labels: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", rows.len(), labels.len())));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::out_of_range("ridge penalty", lambda));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged design matrix".into()));
    }
    let n = rows.len() as f64;
    let x_mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let y_mean = labels.iter().sum::<f64>() / n;
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j] - x_mean[j]);
    let y = DVector::from_iterator(labels.len(), labels.iter().map(|v| v - y_mean));
    let gram = x.transpose() * &x + DMatrix::identity(d, d) * lambda;
    let rhs = x.transpose() * y;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Shape("ridge system is not positive definite".into()))?
        .solve(&rhs);
    let weights: Vec<f64> = w.iter().copied().collect();
    let intercept = y_mean - crate::nn::dot(&weights, &x_mean);
    Ok((weights, intercept))
}

pub fn fit_csr(train: &CourseDataset, mode: FeatureMode, lambda: f64) -> Result<RidgeModel> {
    if train.is_empty() {
        return Err(Error::InsufficientHistory(format!(
            "no training examples for `{}`",
            train.target_course
        )));
    }
    let standardizer = if mode.uses_content() {
        let layout = train
            .feature_layout
            .as_ref()
            .ok_or_else(|| Error::MissingFeatures(format!("`{}` was built without content features", train.target_course)))?;
        let rows: Vec<&[f64]> = train.examples.iter().map(content_of).collect::<Result<_>>()?;
        Some(Standardizer::fit(&rows, &layout.real_columns()))
    } else {
        None
    };
    let rows: Vec<Vec<f64>> = train
        .examples
        .iter()
        .map(|e| design_row(mode, e, standardizer.as_ref()))
        .collect::<Result<_>>()?;
    let (weights, intercept) = ridge_solve(&rows, &train.labels(), lambda)?;
    Ok(RidgeModel {
        mode,
        lambda,
        weights,
        intercept,
        standardizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PriorAttempt;

    fn ex(grades: &[f64], label: f64) -> Example {
        let history = grades
            .iter()
            .enumerate()
            .filter(|(_, g)| **g > 0.0)
            .map(|(slot, &grade)| PriorAttempt { slot, term: 0, grade })
            .collect();
        Example::new("s", history, grades.len(), None, label, 1)
    }

    fn dataset(examples: Vec<Example>, n: usize) -> CourseDataset {
        CourseDataset {
            target_course: "T".into(),
            priors: (0..n).map(|i| format!("P{i}")).collect(),
            feature_layout: None,
            examples,
            report: Default::default(),
        }
    }

    #[test]
    fn recovers_exact_linear_weights() {
        let mut examples = Vec::new();
        for a in [1.0, 1.67, 2.33, 3.0, 3.67, 4.0] {
            for b in [1.0, 2.0, 2.67, 3.33, 4.0] {
                examples.push(ex(&[a, b], 0.5 * a + 0.5 * b));
            }
        }
        let m = fit_csr(&dataset(examples, 2), FeatureMode::PriorGrades, 1e-8).unwrap();
        assert!((m.weights[0] - 0.5).abs() < 1e-6);
        assert!((m.weights[1] - 0.5).abs() < 1e-6);
        assert!(m.intercept.abs() < 1e-6);
    }

    #[test]
    fn huge_penalty_predicts_the_mean() {
        let examples = vec![ex(&[3.0, 2.0], 3.0), ex(&[2.0, 4.0], 2.0), ex(&[4.0, 1.0], 4.0)];
        let m = fit_csr(&dataset(examples.clone(), 2), FeatureMode::PriorGrades, 1e12).unwrap();
        assert!(m.weights.iter().all(|w| w.abs() < 1e-9));
        assert!((m.intercept - 3.0).abs() < 1e-9);
        assert!((m.predict(&examples[0]).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn prediction_is_dot_plus_intercept() {
        let m = RidgeModel {
            mode: FeatureMode::PriorGrades,
            lambda: 1.0,
            weights: vec![0.25, -0.5, 1.0],
            intercept: 0.75,
            standardizer: None,
        };
        let e = ex(&[2.0, 3.0, 1.0], 0.0);
        assert_eq!(m.predict(&e).unwrap(), 0.25 * 2.0 - 0.5 * 3.0 + 1.0 + 0.75);
        assert!(matches!(m.predict(&ex(&[1.0], 0.0)), Err(Error::EncodingMismatch(_))));
    }

    #[test]
    fn content_modes_need_features() {
        let d = dataset(vec![ex(&[3.0], 3.0)], 1);
        assert!(matches!(fit_csr(&d, FeatureMode::Content, 1.0), Err(Error::MissingFeatures(_))));
        assert!(matches!(fit_csr(&d, FeatureMode::Hybrid, 1.0), Err(Error::MissingFeatures(_))));
    }

    #[test]
    fn standardizer_centers_and_scales() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let s = Standardizer::fit(&refs, &[0, 1]);
        let mut r = rows[0].clone();
        s.apply(&mut r);
        assert_eq!(r, vec![-1.0, 0.0]);
    }
}
