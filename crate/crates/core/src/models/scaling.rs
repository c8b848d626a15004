use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-column standardization of taken-course grades for the deep models.
/// Zero entries mean "not taken" and stay zero; nonzero entries are centered
/// and scaled by the mean and standard deviation of the nonzero training
/// values in their column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeScaler {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl GradeScaler {
    /// Fits on every row; columns without a nonzero value keep the identity map.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, width: usize) -> Result<Self> {
        let mut sum = vec![0.0; width];
        let mut count = vec![0usize; width];
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for row in &rows {
            if row.len() != width {
                return Err(Error::Shape(format!("row of width {} for a scaler of width {width}", row.len())));
            }
            for (c, &x) in row.iter().enumerate() {
                if x != 0.0 {
                    sum[c] += x;
                    count[c] += 1;
                }
            }
        }
        let means: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect();
        let mut sq = vec![0.0; width];
        for row in &rows {
            for (c, &x) in row.iter().enumerate() {
                if x != 0.0 {
                    sq[c] += (x - means[c]).powi(2);
                }
            }
        }
        let scales = sq
            .iter()
            .zip(&count)
            .map(|(s, &n)| {
                let var = if n == 0 { 0.0 } else { s / n as f64 };
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(GradeScaler { means, scales })
    }

    pub fn width(&self) -> usize {
        self.means.len()
    }

    pub fn apply(&self, row: &mut [f64]) {
        for ((x, m), s) in row.iter_mut().zip(&self.means).zip(&self.scales) {
            if *x != 0.0 {
                *x = (*x - m) / s;
            }
        }
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        let mut v = row.to_vec();
        self.apply(&mut v);
        v
    }
}
