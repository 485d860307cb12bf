//! Dense vector newtypes for model inputs and mean shifts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A model input in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(pub Vec<f64>);

/// Mean of the instrumental Gaussian `N(theta, I_d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShiftVector(pub Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::domain("point has a non-finite coordinate"));
        }
        Ok(Point(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl ShiftVector {
    pub fn zeros(d: usize) -> Self {
        ShiftVector(vec![0.0; d])
    }

    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.iter().any(|c| !c.is_finite()) {
            return Err(Error::domain("shift has a non-finite entry"));
        }
        Ok(ShiftVector(theta))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&t| t == 0.0)
    }
}

impl From<Vec<f64>> for Point {
    fn from(v: Vec<f64>) -> Self {
        Point(v)
    }
}

impl From<Vec<f64>> for ShiftVector {
    fn from(v: Vec<f64>) -> Self {
        ShiftVector(v)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}
