//! The p-radius `ρ_{p,μ} = lim_k E[‖A_k⋯A_1‖^p]^{1/(pk)}`.
//!
//! When `p` is even, or when the support leaves `ℝⁿ₊` invariant, the limit
//! equals `ρ(E[A^{⊗p}])^{1/p}` and is computed exactly. Under cone invariance
//! the symmetric lift `E[A^{[p]}]` has the same spectral radius and is used
//! whenever the Kronecker power is too large. The definitional limit is also
//! available as a Monte-Carlo estimator at finite horizon.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cone::{cone_operator_norm, ConeWeight};
use crate::dist::MatrixDistribution;
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, spectral_radius_with, EigenSettings, SquareMatrix};
use crate::rng;
use crate::tensor::{kron_side, lift_dim, DEFAULT_DIM_CAP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PRadiusMethod {
    ExactEven,
    ExactCone,
    ExactLifted,
    MonteCarloDefinitional,
}

impl fmt::Display for PRadiusMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PRadiusMethod::ExactEven => "ExactEven",
            PRadiusMethod::ExactCone => "ExactCone",
            PRadiusMethod::ExactLifted => "ExactLifted",
            PRadiusMethod::MonteCarloDefinitional => "MonteCarloDefinitional",
        };
        f.write_str(s)
    }
}

/// Hypothesis under which the closed form was applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assumption {
    /// A1: p is even.
    EvenDegree,
    /// A2: the support leaves a proper cone (here `ℝⁿ₊`) invariant.
    ConeInvariant,
    None,
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Assumption::EvenDegree => "A1",
            Assumption::ConeInvariant => "A2",
            Assumption::None => "none",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Side of the matrix whose spectral radius was taken.
    pub matrix_side: Option<usize>,
    pub horizon: Option<usize>,
    pub samples: Option<usize>,
    /// Delta-method standard error of a Monte-Carlo value.
    pub standard_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRadiusResult {
    pub p: usize,
    pub value: f64,
    pub method: PRadiusMethod,
    pub assumption_used: Assumption,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExactOptions {
    /// Largest side allowed for a dense `E[A^{⊗p}]`.
    pub dim_cap: usize,
    pub eigen: EigenSettings,
    /// Use the symmetric lift whenever cone invariance allows it.
    pub prefer_lifted: bool,
    /// Entries `>= -cone_slack` count as nonnegative.
    pub cone_slack: f64,
}

impl Default for ExactOptions {
    fn default() -> Self {
        ExactOptions {
            dim_cap: DEFAULT_DIM_CAP,
            eigen: EigenSettings::default(),
            prefer_lifted: false,
            cone_slack: 0.0,
        }
    }
}

pub fn p_radius_exact(d: &MatrixDistribution, p: usize) -> Result<PRadiusResult> {
    p_radius_exact_with(d, p, &ExactOptions::default())
}

pub fn p_radius_exact_with(
    d: &MatrixDistribution,
    p: usize,
    opts: &ExactOptions,
) -> Result<PRadiusResult> {
    if p == 0 {
        return Err(Error::invalid("p must be >= 1"));
    }
    let even = p % 2 == 0;
    let cone = d.support_is_cone_invariant_with_slack(opts.cone_slack);
    if !even && !cone {
        return Err(Error::AssumptionViolated(format!(
            "p = {p} is odd (A1 fails) and the support does not leave the nonnegative orthant \
             invariant (A2 fails); use the Monte-Carlo estimator explicitly"
        )));
    }
    let side = kron_side(d.dim(), p);
    let too_big = side.is_none_or(|s| s > opts.dim_cap);
    let use_lift = cone
        && (opts.prefer_lifted
            || too_big
            || side.is_some_and(|s| s > opts.eigen.dense_limit && lift_dim(d.dim(), p) < s));

    let (matrix, method, assumption) = if use_lift {
        (
            d.expected_lift_matrix(p)?,
            PRadiusMethod::ExactLifted,
            Assumption::ConeInvariant,
        )
    } else {
        let m = d.expected_kron_power_with_cap(p, opts.dim_cap)?;
        if even {
            (m, PRadiusMethod::ExactEven, Assumption::EvenDegree)
        } else {
            (m, PRadiusMethod::ExactCone, Assumption::ConeInvariant)
        }
    };
    let rho = spectral_radius_with(matrix.as_matrix(), &opts.eigen)?;
    Ok(PRadiusResult {
        p,
        value: rho.powf(1.0 / p as f64),
        method,
        assumption_used: assumption,
        diagnostics: Diagnostics {
            matrix_side: Some(matrix.dim()),
            ..Default::default()
        },
    })
}

/// Norm applied to the random products in the definitional estimator.
#[derive(Clone, Debug, PartialEq)]
pub enum ProductNorm {
    Spectral,
    Cone(ConeWeight),
}

impl ProductNorm {
    pub fn apply(&self, m: &SquareMatrix) -> f64 {
        match self {
            ProductNorm::Spectral => spectral_norm(m.as_matrix()),
            ProductNorm::Cone(w) => cone_operator_norm(m, w),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloOptions {
    pub norm: ProductNorm,
    /// Products are renormalized every this many steps; the scale is kept in
    /// log space.
    pub rescale_every: usize,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        MonteCarloOptions {
            norm: ProductNorm::Spectral,
            rescale_every: 8,
        }
    }
}

pub fn p_radius_montecarlo(
    d: &MatrixDistribution,
    p: usize,
    k: usize,
    n_samples: usize,
    seed: u64,
) -> Result<PRadiusResult> {
    p_radius_montecarlo_with(d, p, k, n_samples, seed, &MonteCarloOptions::default())
}

/// `(mean_s ‖A_k⋯A_1‖^p)^{1/(pk)}` over `n_samples` independent products.
/// Sample `s` draws from stream `(seed, s)`.
pub fn p_radius_montecarlo_with(
    d: &MatrixDistribution,
    p: usize,
    k: usize,
    n_samples: usize,
    seed: u64,
    opts: &MonteCarloOptions,
) -> Result<PRadiusResult> {
    if p == 0 || k == 0 || n_samples == 0 {
        return Err(Error::invalid("p, k and n_samples must all be >= 1"));
    }
    if let ProductNorm::Cone(w) = &opts.norm {
        if w.len() != d.dim() {
            return Err(Error::invalid("cone weight dimension does not match distribution"));
        }
    }
    let pf = p as f64;
    let log_terms: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut r = rng::stream(seed, s as u64);
            pf * log_product_norm(d, k, &mut r, opts)
        })
        .collect();
    let (log_mean, rel_se) = log_mean_exp(&log_terms);
    let value = if log_mean == f64::NEG_INFINITY {
        0.0
    } else {
        (log_mean / (pf * k as f64)).exp()
    };
    Ok(PRadiusResult {
        p,
        value,
        method: PRadiusMethod::MonteCarloDefinitional,
        assumption_used: Assumption::None,
        diagnostics: Diagnostics {
            matrix_side: Some(d.dim()),
            horizon: Some(k),
            samples: Some(n_samples),
            standard_error: Some(value * rel_se / (pf * k as f64)),
        },
    })
}

/// `log ‖A_k⋯A_1‖` for one random product, with periodic rescaling.
pub(crate) fn log_product_norm(
    d: &MatrixDistribution,
    k: usize,
    r: &mut rng::Stream,
    opts: &MonteCarloOptions,
) -> f64 {
    let every = opts.rescale_every.max(1);
    let mut prod = d.sample(r).into_inner();
    let mut log_scale = 0.0;
    for step in 2..=k {
        prod = d.sample(r).as_matrix() * prod;
        if step % every == 0 {
            let c = prod.amax();
            if c == 0.0 {
                return f64::NEG_INFINITY;
            }
            prod /= c;
            log_scale += c.ln();
        }
    }
    let norm = opts.norm.apply(&SquareMatrix::from_trusted(prod));
    if norm == 0.0 {
        f64::NEG_INFINITY
    } else {
        norm.ln() + log_scale
    }
}

/// `log(mean(exp(x)))` and the relative standard error of that mean.
pub(crate) fn log_mean_exp(xs: &[f64]) -> (f64, f64) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return (f64::NEG_INFINITY, 0.0);
    }
    let n = xs.len() as f64;
    let w: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let mean = w.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (max + mean.ln(), (var / n).sqrt() / mean)
}

/// One entry of a p-radius sweep.
#[derive(Clone, Debug, PartialEq)]
pub enum SequenceRow {
    Computed(PRadiusResult),
    Skipped { p: usize, reason: String },
}

impl SequenceRow {
    pub fn p(&self) -> usize {
        match self {
            SequenceRow::Computed(r) => r.p,
            SequenceRow::Skipped { p, .. } => *p,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            SequenceRow::Computed(r) => Some(r.value),
            SequenceRow::Skipped { .. } => None,
        }
    }
}

/// Exact p-radius for each requested `p`, ascending; inadmissible `p` are
/// reported as skipped rows.
pub fn p_radius_sequence(d: &MatrixDistribution, p_list: &[usize]) -> Vec<SequenceRow> {
    let mut ps = p_list.to_vec();
    ps.sort_unstable();
    ps.dedup();
    ps.into_par_iter()
        .map(|p| match p_radius_exact(d, p) {
            Ok(r) => SequenceRow::Computed(r),
            Err(e) => SequenceRow::Skipped {
                p,
                reason: e.to_string(),
            },
        })
        .collect()
}
