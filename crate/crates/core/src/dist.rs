//! Probability distributions over square matrices with bounded support.
//!
//! Three kinds are supported: finitely many atoms, boxes of independent
//! uniform entries, and mixtures of one box with an atomic part. All of them
//! have closed-form moments, so `E[A^{⊗p}]` and `E[A^{[p]}]` are computed
//! exactly rather than estimated.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::tensor::{self, EntryMoments, DEFAULT_DIM_CAP};

const PROB_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub matrix: SquareMatrix,
    pub prob: f64,
}

/// Atomic law `Σ p_i δ_{M_i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDist {
    atoms: Vec<Atom>,
    cumulative: Vec<f64>,
}

impl FiniteDist {
    /// Probabilities must be positive and sum to one within 1e-12; they are
    /// then renormalized exactly.
    pub fn new(atoms: Vec<(SquareMatrix, f64)>) -> Result<Self> {
        let Some((first, _)) = atoms.first() else {
            return Err(Error::invalid("finite distribution needs at least one atom"));
        };
        let n = first.dim();
        for (i, (m, p)) in atoms.iter().enumerate() {
            if m.dim() != n {
                return Err(Error::invalid(format!(
                    "atoms[{i}].matrix has side {}, expected {n}",
                    m.dim()
                )));
            }
            if !(p.is_finite() && *p > 0.0) {
                return Err(Error::invalid(format!("atoms[{i}].prob = {p} must be positive")));
            }
        }
        let total: f64 = atoms.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::invalid(format!(
                "atoms[*].prob sums to {total}, expected 1"
            )));
        }
        let atoms: Vec<Atom> = atoms
            .into_iter()
            .map(|(matrix, p)| Atom {
                matrix,
                prob: p / total,
            })
            .collect();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = atoms
            .iter()
            .map(|a| {
                acc += a.prob;
                acc
            })
            .collect();
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(FiniteDist { atoms, cumulative })
    }

    /// Equal probabilities on the given matrices.
    pub fn uniform(matrices: Vec<SquareMatrix>) -> Result<Self> {
        let w = 1.0 / matrices.len().max(1) as f64;
        let n = matrices.len();
        let mut atoms: Vec<(SquareMatrix, f64)> = matrices.into_iter().map(|m| (m, w)).collect();
        // absorb rounding so the sum check is exact
        if let Some(last) = atoms.last_mut() {
            last.1 = 1.0 - w * (n - 1) as f64;
        }
        Self::new(atoms)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].matrix.dim()
    }

    fn sample(&self, rng: &mut impl Rng) -> SquareMatrix {
        let u: f64 = rng.random();
        let i = self.cumulative.partition_point(|&c| c <= u);
        self.atoms[i.min(self.atoms.len() - 1)].matrix.clone()
    }

    fn expected_kron_power(&self, p: usize) -> Result<DMatrix<f64>> {
        let mut acc: Option<DMatrix<f64>> = None;
        for a in &self.atoms {
            let k = tensor::kron_power_with_cap(&a.matrix, p, usize::MAX)?.into_inner() * a.prob;
            acc = Some(match acc {
                Some(s) => s + k,
                None => k,
            });
        }
        Ok(acc.unwrap())
    }

    fn expected_lift_matrix(&self, p: usize) -> DMatrix<f64> {
        self.atoms
            .iter()
            .map(|a| tensor::lift_matrix(&a.matrix, p).into_inner() * a.prob)
            .reduce(|s, k| s + k)
            .unwrap()
    }
}

/// Independent uniform entries `a_rc ~ U[lo_rc, hi_rc]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalDist {
    lo: DMatrix<f64>,
    hi: DMatrix<f64>,
}

impl IntervalDist {
    pub fn new(lo: DMatrix<f64>, hi: DMatrix<f64>) -> Result<Self> {
        let lo = SquareMatrix::new(lo).map_err(|e| Error::invalid(format!("lo: {e}")))?;
        let hi = SquareMatrix::new(hi).map_err(|e| Error::invalid(format!("hi: {e}")))?;
        if lo.dim() != hi.dim() {
            return Err(Error::invalid("lo and hi have different sides"));
        }
        for i in 0..lo.dim() {
            for j in 0..lo.dim() {
                if lo[(i, j)] > hi[(i, j)] {
                    return Err(Error::invalid(format!(
                        "lo[{i}][{j}] = {} exceeds hi[{i}][{j}] = {}",
                        lo[(i, j)],
                        hi[(i, j)]
                    )));
                }
            }
        }
        Ok(IntervalDist {
            lo: lo.into_inner(),
            hi: hi.into_inner(),
        })
    }

    pub fn lo(&self) -> &DMatrix<f64> {
        &self.lo
    }

    pub fn hi(&self) -> &DMatrix<f64> {
        &self.hi
    }

    pub fn dim(&self) -> usize {
        self.lo.nrows()
    }

    fn sample(&self, rng: &mut impl Rng) -> SquareMatrix {
        let n = self.dim();
        // row-major draw order, fixed
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let u: f64 = rng.random();
                m[(i, j)] = self.lo[(i, j)] + (self.hi[(i, j)] - self.lo[(i, j)]) * u;
            }
        }
        SquareMatrix::from_trusted(m)
    }

    /// Each entry of `A^{⊗p}` is a monomial `Π_t a_{i_t j_t}`; grouping equal
    /// factors gives `Π_{rc} E[a_rc^{m_rc}]` by independence of distinct entries.
    fn expected_kron_power(&self, p: usize) -> DMatrix<f64> {
        let n = self.dim();
        let side = n.pow(p as u32);
        let moments = self.moment_table(p);
        let digits: Vec<Vec<usize>> = (0..side)
            .map(|mut idx| {
                let mut d = vec![0; p];
                for slot in d.iter_mut().rev() {
                    *slot = idx % n;
                    idx /= n;
                }
                d
            })
            .collect();
        let columns: Vec<Vec<f64>> = (0..side)
            .into_par_iter()
            .map(|col| {
                let mut counts = vec![0u32; n * n];
                (0..side)
                    .map(|row| {
                        counts.iter_mut().for_each(|c| *c = 0);
                        for t in 0..p {
                            counts[digits[row][t] * n + digits[col][t]] += 1;
                        }
                        counts
                            .iter()
                            .enumerate()
                            .filter(|(_, &m)| m > 0)
                            .map(|(rc, &m)| moments[rc][m as usize])
                            .product()
                    })
                    .collect()
            })
            .collect();
        DMatrix::from_fn(side, side, |r, c| columns[c][r])
    }

    /// `moments[r*n + c][m] = E[a_rc^m]`.
    fn moment_table(&self, p: usize) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..n * n)
            .map(|rc| {
                (0..=p)
                    .map(|m| uniform_moment(self.lo[(rc / n, rc % n)], self.hi[(rc / n, rc % n)], m as u32))
                    .collect()
            })
            .collect()
    }
}

impl EntryMoments for IntervalDist {
    fn dim(&self) -> usize {
        self.lo.nrows()
    }

    fn moment(&self, row: usize, col: usize, power: u32) -> f64 {
        uniform_moment(self.lo[(row, col)], self.hi[(row, col)], power)
    }
}

/// `E[a^m]` for `a ~ U[lo, hi]`, i.e. `(hi^{m+1} − lo^{m+1}) / ((m+1)(hi − lo))`,
/// evaluated as `Σ_k hi^k lo^{m−k} / (m+1)` so that `lo = hi` gives `hi^m`.
pub fn uniform_moment(lo: f64, hi: f64, m: u32) -> f64 {
    let mut sum = 0.0;
    for k in 0..=m {
        sum += hi.powi(k as i32) * lo.powi((m - k) as i32);
    }
    sum / (m as f64 + 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DistKind {
    Finite(FiniteDist),
    Interval(IntervalDist),
    /// `w_continuous · continuous + (1 − w_continuous) · atoms`.
    Mixture {
        continuous: IntervalDist,
        w_continuous: f64,
        atoms: FiniteDist,
    },
}

/// A samplable matrix distribution with exact moments.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixDistribution {
    dim: usize,
    kind: DistKind,
}

/// What `supp μ` consists of.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportDescriptor {
    pub atoms: Option<Vec<SquareMatrix>>,
    /// Entrywise box `[lo, hi]`.
    pub interval: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl MatrixDistribution {
    pub fn finite(atoms: Vec<(SquareMatrix, f64)>) -> Result<Self> {
        let f = FiniteDist::new(atoms)?;
        Ok(MatrixDistribution {
            dim: f.dim(),
            kind: DistKind::Finite(f),
        })
    }

    pub fn uniform_atoms(matrices: Vec<SquareMatrix>) -> Result<Self> {
        let f = FiniteDist::uniform(matrices)?;
        Ok(MatrixDistribution {
            dim: f.dim(),
            kind: DistKind::Finite(f),
        })
    }

    pub fn point_mass(m: SquareMatrix) -> Self {
        Self::finite(vec![(m, 1.0)]).expect("point mass is always valid")
    }

    pub fn interval(lo: DMatrix<f64>, hi: DMatrix<f64>) -> Result<Self> {
        let d = IntervalDist::new(lo, hi)?;
        Ok(MatrixDistribution {
            dim: d.dim(),
            kind: DistKind::Interval(d),
        })
    }

    /// 1×1 uniform law on `[lo, hi]`.
    pub fn scalar_uniform(lo: f64, hi: f64) -> Result<Self> {
        Self::interval(DMatrix::from_element(1, 1, lo), DMatrix::from_element(1, 1, hi))
    }

    pub fn mixture(continuous: IntervalDist, w_continuous: f64, atoms: FiniteDist) -> Result<Self> {
        if !(w_continuous > 0.0 && w_continuous < 1.0) {
            return Err(Error::invalid(format!(
                "w_continuous = {w_continuous} must lie strictly between 0 and 1"
            )));
        }
        if continuous.dim() != atoms.dim() {
            return Err(Error::invalid("mixture parts have different sides"));
        }
        Ok(MatrixDistribution {
            dim: atoms.dim(),
            kind: DistKind::Mixture {
                continuous,
                w_continuous,
                atoms,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &DistKind {
        &self.kind
    }

    pub fn is_finite(&self) -> bool {
        matches!(self.kind, DistKind::Finite(_))
    }

    pub fn atoms(&self) -> Option<&[Atom]> {
        match &self.kind {
            DistKind::Finite(f) => Some(f.atoms()),
            _ => None,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> SquareMatrix {
        match &self.kind {
            DistKind::Finite(f) => f.sample(rng),
            DistKind::Interval(d) => d.sample(rng),
            DistKind::Mixture {
                continuous,
                w_continuous,
                atoms,
            } => {
                let u: f64 = rng.random();
                if u < *w_continuous {
                    continuous.sample(rng)
                } else {
                    atoms.sample(rng)
                }
            }
        }
    }

    pub fn mean(&self) -> SquareMatrix {
        self.expected_kron_power(1).expect("p = 1 is always within the cap")
    }

    pub fn expected_kron_power(&self, p: usize) -> Result<SquareMatrix> {
        self.expected_kron_power_with_cap(p, DEFAULT_DIM_CAP)
    }

    /// Exact `E[A^{⊗p}]`.
    pub fn expected_kron_power_with_cap(&self, p: usize, cap: usize) -> Result<SquareMatrix> {
        if p == 0 {
            return Err(Error::invalid("p must be >= 1"));
        }
        tensor::check_cap(self.dim, p, cap)?;
        let m = match &self.kind {
            DistKind::Finite(f) => f.expected_kron_power(p)?,
            DistKind::Interval(d) => d.expected_kron_power(p),
            DistKind::Mixture {
                continuous,
                w_continuous,
                atoms,
            } => {
                continuous.expected_kron_power(p) * *w_continuous
                    + atoms.expected_kron_power(p)? * (1.0 - w_continuous)
            }
        };
        Ok(SquareMatrix::from_trusted(m))
    }

    /// Exact `E[A^{[p]}]` (side `C(n+p−1, p)`); no dimension cap applies.
    pub fn expected_lift_matrix(&self, p: usize) -> Result<SquareMatrix> {
        if p == 0 {
            return Err(Error::invalid("p must be >= 1"));
        }
        let m = match &self.kind {
            DistKind::Finite(f) => f.expected_lift_matrix(p),
            DistKind::Interval(d) => tensor::lifted_expectation(d, p),
            DistKind::Mixture {
                continuous,
                w_continuous,
                atoms,
            } => {
                tensor::lifted_expectation(continuous, p) * *w_continuous
                    + atoms.expected_lift_matrix(p) * (1.0 - w_continuous)
            }
        };
        Ok(SquareMatrix::from_trusted(m))
    }

    pub fn support(&self) -> SupportDescriptor {
        let atoms_of = |f: &FiniteDist| f.atoms().iter().map(|a| a.matrix.clone()).collect();
        let box_of = |d: &IntervalDist| (d.lo.clone(), d.hi.clone());
        match &self.kind {
            DistKind::Finite(f) => SupportDescriptor {
                atoms: Some(atoms_of(f)),
                interval: None,
            },
            DistKind::Interval(d) => SupportDescriptor {
                atoms: None,
                interval: Some(box_of(d)),
            },
            DistKind::Mixture {
                continuous, atoms, ..
            } => SupportDescriptor {
                atoms: Some(atoms_of(atoms)),
                interval: Some(box_of(continuous)),
            },
        }
    }

    /// Sufficient test for `ℝⁿ₊`-invariance of the whole support: atoms
    /// entrywise nonnegative and interval lower bounds nonnegative.
    pub fn support_is_cone_invariant(&self) -> bool {
        self.support_is_cone_invariant_with_slack(0.0)
    }

    pub fn support_is_cone_invariant_with_slack(&self, slack: f64) -> bool {
        let s = self.support();
        s.atoms
            .iter()
            .flatten()
            .all(|m| m.is_entrywise_nonnegative(slack))
            && s.interval.iter().all(|(lo, _)| lo.iter().all(|&v| v >= -slack))
    }

    /// Same law with every matrix multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::invalid("scale factor must be positive"));
        }
        let scale_f = |f: &FiniteDist| {
            FiniteDist::new(f.atoms.iter().map(|a| (a.matrix.scale(c), a.prob)).collect())
        };
        let scale_i = |d: &IntervalDist| IntervalDist::new(&d.lo * c, &d.hi * c);
        let kind = match &self.kind {
            DistKind::Finite(f) => DistKind::Finite(scale_f(f)?),
            DistKind::Interval(d) => DistKind::Interval(scale_i(d)?),
            DistKind::Mixture {
                continuous,
                w_continuous,
                atoms,
            } => DistKind::Mixture {
                continuous: scale_i(continuous)?,
                w_continuous: *w_continuous,
                atoms: scale_f(atoms)?,
            },
        };
        Ok(MatrixDistribution {
            dim: self.dim,
            kind,
        })
    }

    /// Image of a finite law under `A ↦ A^{⊗m}`.
    pub fn pushforward_kron(&self, m: usize) -> Result<Self> {
        let atoms = self
            .atoms()
            .ok_or_else(|| Error::invalid("pushforward is only available for finite distributions"))?;
        Self::finite(
            atoms
                .iter()
                .map(|a| Ok((tensor::kron_power(&a.matrix, m)?, a.prob)))
                .collect::<Result<_>>()?,
        )
    }

    /// Image of a finite law under `A ↦ A^{[m]}`.
    pub fn pushforward_lift(&self, m: usize) -> Result<Self> {
        let atoms = self
            .atoms()
            .ok_or_else(|| Error::invalid("pushforward is only available for finite distributions"))?;
        Self::finite(
            atoms
                .iter()
                .map(|a| (tensor::lift_matrix(&a.matrix, m), a.prob))
                .collect(),
        )
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: DistributionFile = serde_json::from_str(s)?;
        file.into_distribution()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::invalid(format!("cannot read distribution file {}: {e}", path.display()))
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&DistributionFile::from(self)).expect("serializable")
    }
}

/// On-disk distribution format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistributionFile {
    pub dim: usize,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<AtomFile>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_continuous: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtomFile {
    pub matrix: Vec<Vec<f64>>,
    pub prob: f64,
}

fn rows_to_matrix(rows: &[Vec<f64>], dim: usize, field: &str) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid(format!("field `{field}` must be a {dim}x{dim} array")));
    }
    let m = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("field `{field}` has non-finite entries")));
    }
    Ok(m)
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl DistributionFile {
    fn require<'a, T>(field: &'a Option<T>, name: &str, kind: &str) -> Result<&'a T> {
        field
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("field `{name}` is required for kind \"{kind}\"")))
    }

    fn forbid<T>(field: &Option<T>, name: &str, kind: &str) -> Result<()> {
        match field {
            Some(_) => Err(Error::invalid(format!(
                "field `{name}` is not allowed for kind \"{kind}\""
            ))),
            None => Ok(()),
        }
    }

    fn finite_part(&self, kind: &str) -> Result<FiniteDist> {
        let atoms = Self::require(&self.atoms, "atoms", kind)?;
        let parsed = atoms
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let m = rows_to_matrix(&a.matrix, self.dim, &format!("atoms[{i}].matrix"))?;
                Ok((SquareMatrix::from_trusted(m), a.prob))
            })
            .collect::<Result<Vec<_>>>()?;
        FiniteDist::new(parsed)
    }

    fn interval_part(&self, kind: &str) -> Result<IntervalDist> {
        let lo = rows_to_matrix(Self::require(&self.lo, "lo", kind)?, self.dim, "lo")?;
        let hi = rows_to_matrix(Self::require(&self.hi, "hi", kind)?, self.dim, "hi")?;
        IntervalDist::new(lo, hi)
    }

    pub fn into_distribution(self) -> Result<MatrixDistribution> {
        if self.dim == 0 {
            return Err(Error::invalid("field `dim` must be positive"));
        }
        let kind = self.kind.as_str();
        match kind {
            "finite" => {
                Self::forbid(&self.lo, "lo", kind)?;
                Self::forbid(&self.hi, "hi", kind)?;
                Self::forbid(&self.w_continuous, "w_continuous", kind)?;
                let f = self.finite_part(kind)?;
                Ok(MatrixDistribution {
                    dim: self.dim,
                    kind: DistKind::Finite(f),
                })
            }
            "interval" => {
                Self::forbid(&self.atoms, "atoms", kind)?;
                Self::forbid(&self.w_continuous, "w_continuous", kind)?;
                let d = self.interval_part(kind)?;
                Ok(MatrixDistribution {
                    dim: self.dim,
                    kind: DistKind::Interval(d),
                })
            }
            "mixture" => {
                let w = *Self::require(&self.w_continuous, "w_continuous", kind)?;
                let c = self.interval_part(kind)?;
                let f = self.finite_part(kind)?;
                MatrixDistribution::mixture(c, w, f)
                    .map_err(|e| Error::invalid(format!("field `w_continuous`: {e}")))
            }
            other => Err(Error::invalid(format!(
                "field `kind` = \"{other}\" must be one of \"finite\", \"interval\", \"mixture\""
            ))),
        }
    }
}

impl From<&MatrixDistribution> for DistributionFile {
    fn from(d: &MatrixDistribution) -> Self {
        let atoms_of = |f: &FiniteDist| {
            f.atoms()
                .iter()
                .map(|a| AtomFile {
                    matrix: a.matrix.to_rows(),
                    prob: a.prob,
                })
                .collect()
        };
        let mut file = DistributionFile {
            dim: d.dim,
            kind: String::new(),
            atoms: None,
            lo: None,
            hi: None,
            w_continuous: None,
        };
        match &d.kind {
            DistKind::Finite(f) => {
                file.kind = "finite".into();
                file.atoms = Some(atoms_of(f));
            }
            DistKind::Interval(i) => {
                file.kind = "interval".into();
                file.lo = Some(matrix_to_rows(&i.lo));
                file.hi = Some(matrix_to_rows(&i.hi));
            }
            DistKind::Mixture {
                continuous,
                w_continuous,
                atoms,
            } => {
                file.kind = "mixture".into();
                file.atoms = Some(atoms_of(atoms));
                file.lo = Some(matrix_to_rows(&continuous.lo));
                file.hi = Some(matrix_to_rows(&continuous.hi));
                file.w_continuous = Some(*w_continuous);
            }
        }
        file
    }
}

/// The interval distribution `[[0,1.5],[0,1.8];[0,0.15],[0,1.2]]` used as the
/// running two-dimensional example in the docs and tests.
pub fn example_interval_2x2() -> MatrixDistribution {
    MatrixDistribution::interval(
        DMatrix::zeros(2, 2),
        DMatrix::from_row_slice(2, 2, &[1.5, 1.8, 0.15, 1.2]),
    )
    .expect("valid box")
}
