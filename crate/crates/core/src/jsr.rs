//! Joint spectral radius of the support of a distribution.
//!
//! Two routes: exhaustive enumeration of products of a finite atom set, which
//! brackets `ρ̂` between `max ρ(P)^{1/k}` and `min_k max ‖P‖^{1/k}`, and the
//! limit formula `ρ̂(supp μ) = lim_p ρ(E[A^{⊗p}])^{1/p}`, whose terms are lower
//! bounds that increase with `p` under cone invariance.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::dist::MatrixDistribution;
use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, spectral_radius, SquareMatrix};
use crate::pradius::{p_radius_exact, PRadiusMethod};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BruteForceOptions {
    /// Maximum number of products to evaluate.
    pub budget: u128,
    /// Prefixes with `‖P‖ < lower^k · prune_cutoff` are dropped when the full
    /// enumeration exceeds the budget.
    pub prune_cutoff: f64,
}

impl Default for BruteForceOptions {
    fn default() -> Self {
        BruteForceOptions {
            budget: 1 << 22,
            prune_cutoff: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BruteForceBounds {
    pub lower: f64,
    pub upper: f64,
    pub k_max: usize,
    pub products_evaluated: u64,
    pub pruned: bool,
    /// False when pruning dropped products, so `upper` may be too small.
    pub upper_certified: bool,
    /// Atom indices (applied first to last) of the product attaining `lower`.
    pub lower_witness: Vec<usize>,
}

pub fn jsr_brute_force(matrices: &[SquareMatrix], k_max: usize) -> Result<BruteForceBounds> {
    jsr_brute_force_with(matrices, k_max, &BruteForceOptions::default())
}

pub fn jsr_brute_force_with(
    matrices: &[SquareMatrix],
    k_max: usize,
    opts: &BruteForceOptions,
) -> Result<BruteForceBounds> {
    let Some(first) = matrices.first() else {
        return Err(Error::invalid("brute force needs at least one matrix"));
    };
    if k_max == 0 {
        return Err(Error::invalid("k_max must be >= 1"));
    }
    if matrices.iter().any(|m| m.dim() != first.dim()) {
        return Err(Error::invalid("matrices have different sides"));
    }
    let n = matrices.len() as u128;
    let total: u128 = (1..=k_max as u32)
        .map(|k| n.checked_pow(k).unwrap_or(u128::MAX))
        .fold(0u128, |a, b| a.saturating_add(b));
    let prune = total > opts.budget;

    let mut seed_lower = 0.0f64;
    let mut seed_witness = vec![0];
    for (i, m) in matrices.iter().enumerate() {
        let r = spectral_radius(m.as_matrix())?;
        if r > seed_lower {
            seed_lower = r;
            seed_witness = vec![i];
        }
    }

    let ctx = Search {
        matrices,
        k_max,
        prune,
        cutoff: opts.prune_cutoff,
        budget_per_branch: opts.budget / n.max(1) + 1,
        seed_lower,
    };
    let branches: Vec<Branch> = (0..matrices.len())
        .into_par_iter()
        .map(|i| ctx.run_branch(i))
        .collect::<Result<_>>()?;

    let mut level_max = vec![0.0f64; k_max];
    let mut lower = seed_lower;
    let mut witness = seed_witness;
    let mut evaluated = 0u64;
    let mut any_pruned = false;
    for b in branches {
        for (acc, v) in level_max.iter_mut().zip(&b.level_max_norm) {
            *acc = acc.max(*v);
        }
        if b.lower > lower {
            lower = b.lower;
            witness = b.witness;
        }
        evaluated += b.evaluated;
        any_pruned |= b.pruned;
    }
    if prune && evaluated as u128 > opts.budget {
        return Err(Error::BudgetExceeded {
            needed: total,
            budget: opts.budget,
        });
    }
    let upper = level_max
        .iter()
        .enumerate()
        .map(|(k, &m)| m.powf(1.0 / (k + 1) as f64))
        .fold(f64::INFINITY, f64::min);
    Ok(BruteForceBounds {
        lower,
        upper: upper.max(lower),
        k_max,
        products_evaluated: evaluated,
        pruned: any_pruned,
        upper_certified: !any_pruned,
        lower_witness: witness,
    })
}

struct Search<'a> {
    matrices: &'a [SquareMatrix],
    k_max: usize,
    prune: bool,
    cutoff: f64,
    budget_per_branch: u128,
    seed_lower: f64,
}

struct Branch {
    level_max_norm: Vec<f64>,
    lower: f64,
    witness: Vec<usize>,
    evaluated: u64,
    pruned: bool,
}

impl Search<'_> {
    fn run_branch(&self, first: usize) -> Result<Branch> {
        let mut b = Branch {
            level_max_norm: vec![0.0; self.k_max],
            lower: self.seed_lower,
            witness: vec![first],
            evaluated: 0,
            pruned: false,
        };
        let mut path = vec![first];
        self.visit(self.matrices[first].as_matrix().clone(), &mut path, &mut b)?;
        Ok(b)
    }

    fn visit(&self, prod: nalgebra::DMatrix<f64>, path: &mut Vec<usize>, b: &mut Branch) -> Result<()> {
        let k = path.len();
        b.evaluated += 1;
        if self.prune && b.evaluated as u128 > self.budget_per_branch {
            return Err(Error::BudgetExceeded {
                needed: b.evaluated as u128,
                budget: self.budget_per_branch,
            });
        }
        let norm = spectral_norm(&prod);
        b.level_max_norm[k - 1] = b.level_max_norm[k - 1].max(norm);
        let rho = spectral_radius(&prod)?.powf(1.0 / k as f64);
        if rho > b.lower {
            b.lower = rho;
            b.witness = path.clone();
        }
        if k == self.k_max {
            return Ok(());
        }
        if self.prune && norm < b.lower.powi(k as i32) * self.cutoff {
            b.pruned = true;
            return Ok(());
        }
        for (i, m) in self.matrices.iter().enumerate() {
            path.push(i);
            self.visit(m.as_matrix() * &prod, path, b)?;
            path.pop();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub p: usize,
    pub estimate: f64,
    pub method: PRadiusMethod,
    pub seconds: f64,
}

/// `ρ(E[A^{⊗p}])^{1/p}` for increasing `p`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub brute_force_bounds: Option<(f64, f64)>,
    /// Even-degree rows for a non-atomic law without cone invariance: no
    /// convergence guarantee is known.
    pub heuristic: bool,
    /// Aitken Δ² extrapolation of the last three estimates; diagnostic only.
    pub extrapolated: Option<f64>,
}

impl ConvergenceTable {
    pub fn final_estimate(&self) -> Option<f64> {
        self.rows.last().map(|r| r.estimate)
    }

    pub fn is_nondecreasing(&self, slack: f64) -> bool {
        self.rows.windows(2).all(|w| w[1].estimate >= w[0].estimate - slack)
    }

    /// `p,estimate,method,seconds` rows followed by a `#` summary line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("p,estimate,method,seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.p,
                crate::output::fmt_sig(r.estimate),
                r.method,
                crate::output::fmt_sig(r.seconds)
            );
        }
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), crate::output::fmt_sig);
        let (lo, hi) = match self.brute_force_bounds {
            Some((l, u)) => (Some(l), Some(u)),
            None => (None, None),
        };
        let _ = writeln!(
            out,
            "# estimate={} brute_lower={} brute_upper={} extrapolated={} heuristic={}",
            fmt_opt(self.final_estimate()),
            fmt_opt(lo),
            fmt_opt(hi),
            fmt_opt(self.extrapolated),
            self.heuristic
        );
        out
    }
}

pub fn jsr_limit_formula(
    d: &MatrixDistribution,
    p_max: usize,
    use_even_only: bool,
) -> Result<ConvergenceTable> {
    if p_max == 0 || (use_even_only && p_max < 2) {
        return Err(Error::invalid("p_max too small for the requested rows"));
    }
    let cone = d.support_is_cone_invariant();
    if !use_even_only && !cone {
        return Err(Error::AssumptionViolated(
            "odd p rows need a support leaving the nonnegative orthant invariant (A2); \
             rerun with even p only"
                .into(),
        ));
    }
    let ps: Vec<usize> = if use_even_only {
        (2..=p_max).step_by(2).collect()
    } else {
        (1..=p_max).collect()
    };
    let rows: Vec<ConvergenceRow> = ps
        .into_par_iter()
        .map(|p| {
            let t = Instant::now();
            let r = p_radius_exact(d, p)?;
            Ok(ConvergenceRow {
                p,
                estimate: r.value,
                method: r.method,
                seconds: t.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<_>>()?;
    let extrapolated = aitken(&rows);
    Ok(ConvergenceTable {
        rows,
        brute_force_bounds: None,
        heuristic: use_even_only && !cone && !d.is_finite(),
        extrapolated,
    })
}

fn aitken(rows: &[ConvergenceRow]) -> Option<f64> {
    let [a, b, c] = rows.get(rows.len().checked_sub(3)?..)? else {
        return None;
    };
    let denom = c.estimate - 2.0 * b.estimate + a.estimate;
    if denom.abs() < 1e-300 {
        return Some(c.estimate);
    }
    let v = c.estimate - (c.estimate - b.estimate).powi(2) / denom;
    v.is_finite().then_some(v)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReport {
    pub bounds: BruteForceBounds,
    pub table: ConvergenceTable,
    /// `upper − estimate(p_max)`.
    pub residual: f64,
}

/// Brute-force bracket next to the limit-formula sequence for a finite law.
pub fn jsr_gap_report(d: &MatrixDistribution, p_max: usize, k_max: usize) -> Result<GapReport> {
    let atoms = d
        .atoms()
        .ok_or_else(|| Error::invalid("gap report needs a finite distribution (brute force enumerates atoms)"))?;
    let matrices: Vec<SquareMatrix> = atoms.iter().map(|a| a.matrix.clone()).collect();
    let bounds = jsr_brute_force(&matrices, k_max)?;
    let mut table = jsr_limit_formula(d, p_max, !d.support_is_cone_invariant())?;
    table.brute_force_bounds = Some((bounds.lower, bounds.upper));
    let estimate = table.final_estimate().unwrap_or(0.0);
    if bounds.upper_certified && estimate > bounds.upper + 1e-9 {
        return Err(Error::Inconsistent(format!(
            "limit-formula estimate {estimate} exceeds brute-force upper bound {}",
            bounds.upper
        )));
    }
    Ok(GapReport {
        residual: bounds.upper - estimate,
        bounds,
        table,
    })
}
