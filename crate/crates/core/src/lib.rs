//! Numerical toolkit for the p-radius of matrix distributions, the joint
//! spectral radius of their supports, and stochastic Lyapunov functions of
//! switched linear systems.

pub mod cli;
pub mod cone;
pub mod dist;
pub mod error;
pub mod jsr;
pub mod linalg;
pub mod lyapunov;
pub mod output;
pub mod pradius;
pub mod rng;
pub mod simulate;
pub mod tensor;

pub use error::{Error, Result};
pub use linalg::{SquareMatrix, SymmetricMatrix};
