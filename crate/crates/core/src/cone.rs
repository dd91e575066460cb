//! The nonnegative orthant `ℝⁿ₊` as a proper cone.
//!
//! For the orthant, a matrix leaves the cone invariant iff it is entrywise
//! nonnegative, it is cone-positive iff it is entrywise positive, and the cone
//! linear absolute norm with weight `f > 0` is the weighted ℓ¹ norm
//! `Σ f_i |x_i|`. Its induced matrix norm has the column formula
//! `max_j (Σ_i f_i |a_ij|) / f_j`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;

/// Weight vector `f` in the interior of the dual cone (all components positive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ConeWeight(DVector<f64>);

impl ConeWeight {
    pub fn new(f: DVector<f64>) -> Result<Self> {
        if f.is_empty() {
            return Err(Error::invalid("cone weight is empty"));
        }
        if let Some(i) = f.iter().position(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::invalid(format!(
                "cone weight component {i} = {} is not strictly positive",
                f[i]
            )));
        }
        Ok(ConeWeight(f))
    }

    pub fn from_slice(f: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(f))
    }

    pub fn ones(n: usize) -> Self {
        ConeWeight(DVector::from_element(n, 1.0))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ConeWeight {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ConeWeight::new(DVector::from_vec(v))
    }
}

impl From<ConeWeight> for Vec<f64> {
    fn from(w: ConeWeight) -> Vec<f64> {
        w.0.as_slice().to_vec()
    }
}

pub fn is_k_nonnegative(a: &SquareMatrix) -> bool {
    is_k_nonnegative_with_slack(a, 0.0)
}

/// Entrywise `a_ij >= -slack`.
pub fn is_k_nonnegative_with_slack(a: &SquareMatrix, slack: f64) -> bool {
    a.is_entrywise_nonnegative(slack)
}

pub fn is_k_positive(a: &SquareMatrix) -> bool {
    a.iter().all(|&v| v > 0.0)
}

pub fn cone_norm(x: &DVector<f64>, w: &ConeWeight) -> f64 {
    assert_eq!(x.len(), w.len(), "cone_norm: dimension mismatch");
    x.iter().zip(w.0.iter()).map(|(xi, fi)| fi * xi.abs()).sum()
}

pub fn cone_operator_norm(a: &SquareMatrix, w: &ConeWeight) -> f64 {
    assert_eq!(a.dim(), w.len(), "cone_operator_norm: dimension mismatch");
    let f = &w.0;
    (0..a.dim())
        .map(|j| {
            let col: f64 = (0..a.dim()).map(|i| f[i] * a[(i, j)].abs()).sum();
            col / f[j]
        })
        .fold(0.0, f64::max)
}
