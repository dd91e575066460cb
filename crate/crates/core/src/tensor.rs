//! Kronecker products and powers, and p-lifts onto the symmetric subspace.
//!
//! The p-lift of `x ∈ ℝⁿ` lists the monomials `√(α!)·x^α` over all exponents
//! `α` with `|α| = p`, where `α! = p!/(α₁!⋯αₙ!)`. Exponents are ordered
//! lexicographically descending, so `(p,0,…,0)` comes first and `(0,…,0,p)`
//! last. With this scaling `‖x^{[p]}‖₂ = ‖x‖₂^p`, and the lifted matrix
//! `A^{[p]}` is the restriction of `A^{⊗p}` to the symmetric subspace written
//! in an orthonormal basis.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;

/// Largest side accepted for a dense Kronecker power.
pub const DEFAULT_DIM_CAP: usize = 4096;

pub fn kron(a: &SquareMatrix, b: &SquareMatrix) -> SquareMatrix {
    SquareMatrix::from_trusted(a.as_matrix().kronecker(b.as_matrix()))
}

/// `n^p`, or `None` on overflow.
pub fn kron_side(n: usize, p: usize) -> Option<usize> {
    n.checked_pow(u32::try_from(p).ok()?)
}

pub fn kron_power(a: &SquareMatrix, p: usize) -> Result<SquareMatrix> {
    kron_power_with_cap(a, p, DEFAULT_DIM_CAP)
}

/// `A^{⊗p}` with `A^{⊗p} = A^{⊗(p−1)} ⊗ A`.
pub fn kron_power_with_cap(a: &SquareMatrix, p: usize, cap: usize) -> Result<SquareMatrix> {
    if p == 0 {
        return Err(Error::invalid("Kronecker power needs p >= 1"));
    }
    check_cap(a.dim(), p, cap)?;
    let mut out = a.as_matrix().clone();
    for _ in 1..p {
        out = out.kronecker(a.as_matrix());
    }
    Ok(SquareMatrix::from_trusted(out))
}

pub(crate) fn check_cap(n: usize, p: usize, cap: usize) -> Result<usize> {
    match kron_side(n, p) {
        Some(side) if side <= cap => Ok(side),
        Some(side) => Err(Error::DimensionCap { side, cap }),
        None => Err(Error::DimensionCap {
            side: usize::MAX,
            cap,
        }),
    }
}

/// `x^{⊗p}` for vectors.
pub fn kron_power_vector(x: &DVector<f64>, p: usize) -> DVector<f64> {
    let mut out = x.clone();
    for _ in 1..p {
        out = out.kronecker(x);
    }
    out
}

/// One coordinate of the p-lift.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftIndex {
    pub exponent: Vec<u32>,
    pub position: usize,
    /// `√(α!)` with `α! = p!/(α₁!⋯αₙ!)`.
    pub weight: f64,
}

/// `n_p = C(n+p−1, p)`.
pub fn lift_dim(n: usize, p: usize) -> usize {
    let mut acc: u128 = 1;
    for i in 0..p as u128 {
        acc = acc * (n as u128 + i) / (i + 1);
    }
    acc as usize
}

/// All exponents of total degree `p` in `n` variables, lexicographically
/// descending.
pub fn exponents(n: usize, p: usize) -> Vec<Vec<u32>> {
    fn rec(n: usize, p: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if n == 1 {
            prefix.push(p);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for a in (0..=p).rev() {
            prefix.push(a);
            rec(n - 1, p - a, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::with_capacity(lift_dim(n, p));
    rec(n, p as u32, &mut Vec::with_capacity(n), &mut out);
    out
}

/// Multinomial coefficient `|α|!/(α₁!⋯αₙ!)` in floating point.
pub fn multinomial(alpha: &[u32]) -> f64 {
    let mut acc = 1.0;
    let mut total = 0u32;
    for &a in alpha {
        for k in 1..=a {
            total += 1;
            acc *= total as f64 / k as f64;
        }
    }
    acc
}

pub fn lift_indices(n: usize, p: usize) -> Vec<LiftIndex> {
    exponents(n, p)
        .into_iter()
        .enumerate()
        .map(|(position, exponent)| {
            let weight = multinomial(&exponent).sqrt();
            LiftIndex {
                exponent,
                position,
                weight,
            }
        })
        .collect()
}

pub fn lift_vector(x: &DVector<f64>, p: usize) -> DVector<f64> {
    let idx = lift_indices(x.len(), p);
    DVector::from_iterator(
        idx.len(),
        idx.iter().map(|li| {
            li.weight
                * li
                    .exponent
                    .iter()
                    .zip(x.iter())
                    .map(|(&a, &xi)| xi.powi(a as i32))
                    .product::<f64>()
        }),
    )
}

/// `A^{[p]}`, the unique matrix with `(Ax)^{[p]} = A^{[p]} x^{[p]}`.
///
/// Built by expanding each lifted coordinate `√(α!)·Π_i (row_i·x)^{α_i}` as a
/// polynomial in `x`; never forms the `n^p` Kronecker power.
pub fn lift_matrix(a: &SquareMatrix, p: usize) -> SquareMatrix {
    SquareMatrix::from_trusted(lifted_expectation(&PointMoments(a.as_matrix()), p))
}

/// Moments `E[a_rc^m]` of the entries of a random matrix whose rows are
/// independent and whose entries within a row are independent.
pub(crate) trait EntryMoments {
    fn dim(&self) -> usize;
    fn moment(&self, row: usize, col: usize, power: u32) -> f64;
}

/// Degenerate law concentrated on one matrix.
pub(crate) struct PointMoments<'a>(pub &'a DMatrix<f64>);

impl EntryMoments for PointMoments<'_> {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn moment(&self, row: usize, col: usize, power: u32) -> f64 {
        self.0[(row, col)].powi(power as i32)
    }
}

struct MonomialBasis {
    exps: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
}

impl MonomialBasis {
    fn new(n: usize, degree: usize) -> Self {
        let exps = exponents(n, degree);
        let index = exps.iter().cloned().enumerate().map(|(i, e)| (e, i)).collect();
        MonomialBasis { exps, index }
    }
}

/// `E[A^{[p]}]` for a law given by independent entry moments.
pub(crate) fn lifted_expectation(law: &impl EntryMoments, p: usize) -> DMatrix<f64> {
    let n = law.dim();
    let bases: Vec<MonomialBasis> = (0..=p).map(|d| MonomialBasis::new(n, d)).collect();

    // row_polys[i][m]: expected coefficients of (Σ_j a_ij x_j)^m.
    let row_polys: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| {
            (0..=p)
                .map(|m| {
                    bases[m]
                        .exps
                        .iter()
                        .map(|g| {
                            multinomial(g)
                                * g.iter()
                                    .enumerate()
                                    .map(|(j, &gj)| law.moment(i, j, gj))
                                    .product::<f64>()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let top = &bases[p];
    let np = top.exps.len();
    let weights: Vec<f64> = top.exps.iter().map(|e| multinomial(e).sqrt()).collect();
    let mut out = DMatrix::zeros(np, np);
    for (r, alpha) in top.exps.iter().enumerate() {
        let mut poly = vec![1.0];
        let mut deg = 0usize;
        for (i, &ai) in alpha.iter().enumerate() {
            if ai == 0 {
                continue;
            }
            let ai = ai as usize;
            poly = poly_mul(&poly, &bases[deg], &row_polys[i][ai], &bases[ai], &bases[deg + ai]);
            deg += ai;
        }
        for c in 0..np {
            out[(r, c)] = weights[r] / weights[c] * poly[c];
        }
    }
    out
}

fn poly_mul(
    a: &[f64],
    basis_a: &MonomialBasis,
    b: &[f64],
    basis_b: &MonomialBasis,
    basis_out: &MonomialBasis,
) -> Vec<f64> {
    let mut out = vec![0.0; basis_out.exps.len()];
    let mut key = vec![0u32; basis_a.exps.first().map_or(0, |e| e.len())];
    for (ea, &ca) in basis_a.exps.iter().zip(a) {
        if ca == 0.0 {
            continue;
        }
        for (eb, &cb) in basis_b.exps.iter().zip(b) {
            if cb == 0.0 {
                continue;
            }
            for (k, slot) in key.iter_mut().enumerate() {
                *slot = ea[k] + eb[k];
            }
            out[basis_out.index[&key]] += ca * cb;
        }
    }
    out
}

/// The isometry `S` (`n_p × n^p`) whose row for exponent `α` is the
/// normalized sum of the tensor basis vectors `e_{i₁}⊗⋯⊗e_{i_p}` of type `α`.
/// `S x^{⊗p} = x^{[p]}`, `S Sᵀ = I`, and `A^{[p]} = S A^{⊗p} Sᵀ`.
pub fn symmetrizer(n: usize, p: usize) -> Result<DMatrix<f64>> {
    symmetrizer_with_cap(n, p, DEFAULT_DIM_CAP)
}

pub fn symmetrizer_with_cap(n: usize, p: usize, cap: usize) -> Result<DMatrix<f64>> {
    if p == 0 {
        return Err(Error::invalid("symmetrizer needs p >= 1"));
    }
    let side = check_cap(n, p, cap)?;
    let basis = MonomialBasis::new(n, p);
    let mut s = DMatrix::zeros(basis.exps.len(), side);
    let mut counts = vec![0u32; n];
    for col in 0..side {
        counts.iter_mut().for_each(|c| *c = 0);
        let mut rest = col;
        for _ in 0..p {
            counts[rest % n] += 1;
            rest /= n;
        }
        let row = basis.index[&counts];
        s[(row, col)] = 1.0;
    }
    for mut row in s.row_iter_mut() {
        let norm = row.norm();
        row /= norm;
    }
    Ok(s)
}
