//! Letter-grade scale, numeric conversion and tick arithmetic.
//!
//! The scale has eleven letters over ten distinct numeric values: `A+` and `A`
//! both map to 4.0. Tick distances are counted on the distinct grid, so
//! `A+` and `A` are zero ticks apart.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when snapping a numeric value onto the grid.
pub const GRID_TOLERANCE: f64 = 1e-9;

pub const MIN_GRADE: f64 = 0.0;
pub const MAX_GRADE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Letter {
    #[serde(rename = "A+")]
    APlus,
    A,
    #[serde(rename = "A-")]
    AMinus,
    #[serde(rename = "B+")]
    BPlus,
    B,
    #[serde(rename = "B-")]
    BMinus,
    #[serde(rename = "C+")]
    CPlus,
    C,
    #[serde(rename = "C-")]
    CMinus,
    D,
    F,
}

impl Letter {
    pub const ALL: [Letter; 11] = [
        Letter::APlus,
        Letter::A,
        Letter::AMinus,
        Letter::BPlus,
        Letter::B,
        Letter::BMinus,
        Letter::CPlus,
        Letter::C,
        Letter::CMinus,
        Letter::D,
        Letter::F,
    ];

    pub fn label(self) -> &'static str {
        GradeScale::STANDARD.letters[self as usize]
    }

    pub fn value(self) -> f64 {
        GradeScale::STANDARD.values[self as usize]
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Letter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let token = s.trim();
        GradeScale::STANDARD
            .letters
            .iter()
            .position(|l| *l == token)
            .map(|i| Letter::ALL[i])
            .ok_or_else(|| Error::InvalidGrade(token.to_string()))
    }
}

/// The fixed eleven-letter scale.
#[derive(Debug, Clone, Copy)]
pub struct GradeScale {
    pub letters: [&'static str; 11],
    pub values: [f64; 11],
    /// Distinct numeric values, strictly decreasing.
    pub distinct_grid: [f64; 10],
}

impl GradeScale {
    pub const STANDARD: GradeScale = GradeScale {
        letters: ["A+", "A", "A-", "B+", "B", "B-", "C+", "C", "C-", "D", "F"],
        values: [4.0, 4.0, 3.67, 3.33, 3.0, 2.67, 2.33, 2.0, 1.67, 1.0, 0.0],
        distinct_grid: [4.0, 3.67, 3.33, 3.0, 2.67, 2.33, 2.0, 1.67, 1.0, 0.0],
    };

    /// Letters that own a distinct grid value, `A` standing in for 4.0.
    const CANONICAL: [Letter; 10] = [
        Letter::A,
        Letter::AMinus,
        Letter::BPlus,
        Letter::B,
        Letter::BMinus,
        Letter::CPlus,
        Letter::C,
        Letter::CMinus,
        Letter::D,
        Letter::F,
    ];
}

/// A numeric grade in `[0, 4]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GradeValue(f64);

impl GradeValue {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && (MIN_GRADE..=MAX_GRADE).contains(&value) {
            Ok(GradeValue(value))
        } else {
            Err(Error::InvalidGrade(value.to_string()))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl From<Letter> for GradeValue {
    fn from(l: Letter) -> Self {
        GradeValue(l.value())
    }
}

pub fn letter_to_numeric(letter: &str) -> Result<GradeValue> {
    letter.parse::<Letter>().map(GradeValue::from)
}

/// Parses either a numeric grade or a letter label.
pub fn parse_grade(token: &str) -> Result<GradeValue> {
    let token = token.trim();
    match token.parse::<f64>() {
        Ok(v) => GradeValue::new(v).map_err(|_| Error::InvalidGrade(token.to_string())),
        Err(_) => letter_to_numeric(token),
    }
}

/// Nearest letter on the distinct grid. Exact midpoints go to the higher
/// grade; 4.0 canonicalizes to `A`.
pub fn numeric_to_nearest_letter(g: f64) -> Result<Letter> {
    if !(g.is_finite() && (MIN_GRADE..=MAX_GRADE).contains(&g)) {
        return Err(Error::out_of_range("grade", g));
    }
    let grid = &GradeScale::STANDARD.distinct_grid;
    let mut best = 0;
    let mut best_dist = (grid[0] - g).abs();
    for (i, v) in grid.iter().enumerate().skip(1) {
        let d = (v - g).abs();
        // grid is descending, so an earlier index is the higher grade and wins ties
        if d < best_dist - GRID_TOLERANCE {
            best = i;
            best_dist = d;
        }
    }
    Ok(GradeScale::CANONICAL[best])
}

/// Snaps a value (clipped to `[0, 4]` first) onto the distinct grid.
pub fn snap(g: f64) -> f64 {
    let clipped = clip(g);
    numeric_to_nearest_letter(clipped).map(Letter::value).unwrap_or(clipped)
}

pub fn clip(g: f64) -> f64 {
    g.clamp(MIN_GRADE, MAX_GRADE)
}

fn grid_index(g: f64) -> Result<usize> {
    GradeScale::STANDARD
        .distinct_grid
        .iter()
        .position(|v| (v - g).abs() <= GRID_TOLERANCE)
        .ok_or(Error::OffGrid(g))
}

/// Number of distinct-grid steps between two on-grid values.
pub fn tick_distance(a: f64, b: f64) -> Result<usize> {
    Ok(grid_index(a)?.abs_diff(grid_index(b)?))
}

pub fn is_on_grid(g: f64) -> bool {
    grid_index(g).is_ok()
}
