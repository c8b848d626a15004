//! Next-term grade prediction: data handling, baseline and deep regressors,
//! Monte-Carlo dropout uncertainty, prior-course influence and evaluation.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod explain;
pub mod grades;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod uncertainty;

pub use error::{Error, Result};
