//! Stochastic Lyapunov functions of degree p for `x(k+1) = A_k x(k)`.
//!
//! A certificate is a function `V` with `C₁‖x‖^p ≤ V(x) ≤ C₂‖x‖^p` and
//! `E[V(Ax)] ≤ γ^p V(x)`. Two forms are synthesized:
//!
//! * quadratic, for even `p = 2q`: `V(x) = yᵀ H y` with `y = x^{⊗q}` or the
//!   symmetric lift `x^{[q]}`, where `H = Σ_k γ^{−pk} T^k(I)` and
//!   `T(X) = E[BᵀXB]`;
//! * cone norm, under cone invariance: `V(x) = Σ g_i |y_i|` with `y` the
//!   degree-p tensor or lift of `x` and `g` a (perturbed) left Perron vector
//!   of `E[B]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cone::{cone_operator_norm, ConeWeight};
use crate::dist::MatrixDistribution;
use crate::error::{Error, Result};
use crate::linalg::{
    left_perron_vector, spectral_norm, symmetric_extreme_eigenvalues, unvec, vec_of,
    SquareMatrix, SymmetricMatrix,
};
use crate::pradius::p_radius_exact;
use crate::rng;
use crate::tensor::{
    check_cap, kron_power, kron_power_vector, lift_dim, lift_matrix, lift_vector, symmetrizer,
    DEFAULT_DIM_CAP,
};

/// Verification tolerance on `λ_max(T(H) − γ^p H)`.
pub const TOL_PSD: f64 = 1e-8;
/// Verification tolerance on `max_j (gᵀE[B])_j / g_j − γ^p`.
pub const TOL_CONE: f64 = 1e-10;

/// A real function on states, homogeneous of some degree.
pub trait StateFunction: Sync {
    fn degree(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> f64;
}

#[derive(Clone, Debug, PartialEq)]
pub enum CertificateForm {
    Quadratic { h: SymmetricMatrix },
    ConeNorm { g: ConeWeight },
}

/// Parameters recorded at synthesis time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovCertificate {
    degree: usize,
    gamma: f64,
    form: CertificateForm,
    /// True when `V` lives on the symmetric lift rather than the full tensor
    /// space.
    lifted: bool,
    state_dim: usize,
    pub provenance: Provenance,
}

impl LyapunovCertificate {
    pub fn new(
        degree: usize,
        gamma: f64,
        form: CertificateForm,
        lifted: bool,
        provenance: Provenance,
    ) -> Result<Self> {
        if degree == 0 {
            return Err(Error::invalid("field `degree` must be >= 1"));
        }
        check_gamma(gamma)?;
        let (order, side) = match &form {
            CertificateForm::Quadratic { h } => {
                if degree % 2 != 0 {
                    return Err(Error::invalid("quadratic certificate needs an even `degree`"));
                }
                if !h.is_positive_definite() {
                    return Err(Error::invalid(format!(
                        "field `H` is not positive definite (min eigenvalue {})",
                        h.min_eigenvalue()
                    )));
                }
                (degree / 2, h.dim())
            }
            CertificateForm::ConeNorm { g } => (degree, g.len()),
        };
        let state_dim = infer_state_dim(side, order, lifted).ok_or_else(|| {
            Error::invalid(format!(
                "side {side} is not a valid {} space of order {order}",
                if lifted { "symmetric lift" } else { "Kronecker" }
            ))
        })?;
        Ok(LyapunovCertificate {
            degree,
            gamma,
            form,
            lifted,
            state_dim,
            provenance,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn form(&self) -> &CertificateForm {
        &self.form
    }

    pub fn is_lifted(&self) -> bool {
        self.lifted
    }

    /// Tensor order of the space `V` is defined on: `q` for quadratic forms,
    /// `p` for cone norms.
    fn order(&self) -> usize {
        match self.form {
            CertificateForm::Quadratic { .. } => self.degree / 2,
            CertificateForm::ConeNorm { .. } => self.degree,
        }
    }

    fn embed(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.lifted {
            lift_vector(x, self.order())
        } else {
            kron_power_vector(x, self.order())
        }
    }

    pub fn to_json_string(&self) -> String {
        let (form, h, g) = match &self.form {
            CertificateForm::Quadratic { h } => {
                let rows = (0..h.dim())
                    .map(|i| h.as_matrix().row(i).iter().copied().collect())
                    .collect();
                ("quadratic", Some(rows), None)
            }
            CertificateForm::ConeNorm { g } => ("cone_norm", None, Some(g.clone().into())),
        };
        let file = CertificateFile {
            degree: self.degree,
            gamma: self.gamma,
            form: form.into(),
            h,
            g,
            lifted: self.lifted,
            provenance: self.provenance.clone(),
        };
        serde_json::to_string_pretty(&file).expect("serializable")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: CertificateFile = serde_json::from_str(s)?;
        let form = match f.form.as_str() {
            "quadratic" => {
                let rows = f
                    .h
                    .ok_or_else(|| Error::invalid("field `H` is required for form \"quadratic\""))?;
                let n = rows.len();
                if n == 0 || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::invalid("field `H` must be a nonempty square matrix"));
                }
                let m = DMatrix::from_row_iterator(n, n, rows.into_iter().flatten());
                if m != m.transpose() {
                    return Err(Error::invalid("field `H` is not symmetric"));
                }
                CertificateForm::Quadratic {
                    h: SymmetricMatrix::new(m)?,
                }
            }
            "cone_norm" => {
                let g = f
                    .g
                    .ok_or_else(|| Error::invalid("field `g` is required for form \"cone_norm\""))?;
                CertificateForm::ConeNorm {
                    g: ConeWeight::from_slice(&g)
                        .map_err(|e| Error::invalid(format!("field `g`: {e}")))?,
                }
            }
            other => {
                return Err(Error::invalid(format!(
                    "field `form` must be \"quadratic\" or \"cone_norm\", got {other:?}"
                )))
            }
        };
        Self::new(f.degree, f.gamma, form, f.lifted, f.provenance)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::invalid(format!("cannot read certificate file {}: {e}", path.display()))
        })?;
        Self::from_json_str(&text)
    }
}

impl StateFunction for LyapunovCertificate {
    fn degree(&self) -> usize {
        self.degree
    }

    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        let y = self.embed(x);
        match &self.form {
            CertificateForm::Quadratic { h } => h.quadratic_form(&y),
            CertificateForm::ConeNorm { g } => crate::cone::cone_norm(&y, g),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CertificateFile {
    degree: usize,
    gamma: f64,
    form: String,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    h: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g: Option<Vec<f64>>,
    #[serde(default)]
    lifted: bool,
    #[serde(default)]
    provenance: Provenance,
}

fn infer_state_dim(side: usize, order: usize, lifted: bool) -> Option<usize> {
    if order == 1 {
        return Some(side);
    }
    (1..=side).find(|&n| {
        if lifted {
            lift_dim(n, order) == side
        } else {
            crate::tensor::kron_side(n, order) == Some(side)
        }
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("field `gamma` must lie in (0, 1), got {gamma}")))
    }
}

/// Space carrying the quadratic form or cone weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LiftSpace {
    /// Symmetric lift under cone invariance, full tensor space otherwise.
    #[default]
    Auto,
    Kronecker,
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub space: LiftSpace,
    /// Stop once the increment's spectral norm drops below this.
    pub tol_series: f64,
    pub max_terms: usize,
    /// Consecutive non-decreasing increments that signal divergence.
    pub stall_terms: usize,
    pub dim_cap: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            space: LiftSpace::Auto,
            tol_series: 1e-12,
            max_terms: 100_000,
            stall_terms: 10,
            dim_cap: DEFAULT_DIM_CAP,
        }
    }
}

/// `X ↦ E[BᵀXB]` on symmetric matrices of side `side`.
struct QuadraticOperator {
    side: usize,
    kind: QuadKind,
}

enum QuadKind {
    Atoms(Vec<(f64, DMatrix<f64>)>),
    /// `E[B⊗B]ᵀ`, acting on column-major `vec(X)`.
    Vectorized(DMatrix<f64>),
}

impl QuadraticOperator {
    fn new(d: &MatrixDistribution, q: usize, lifted: bool, cap: usize) -> Result<Self> {
        match d.atoms() {
            Some(atoms) => {
                let side = if lifted { lift_dim(d.dim(), q) } else { check_cap(d.dim(), q, cap)? };
                let mats = atoms
                    .iter()
                    .map(|a| {
                        let b = if lifted {
                            lift_matrix(&a.matrix, q)
                        } else {
                            kron_power(&a.matrix, q)?
                        };
                        Ok((a.prob, b.into_inner()))
                    })
                    .collect::<Result<_>>()?;
                Ok(QuadraticOperator {
                    side,
                    kind: QuadKind::Atoms(mats),
                })
            }
            None => Self::vectorized(d, q, lifted, cap),
        }
    }

    fn vectorized(d: &MatrixDistribution, q: usize, lifted: bool, cap: usize) -> Result<Self> {
        let n = d.dim();
        // E[A^{⊗q} ⊗ A^{⊗q}] = E[A^{⊗2q}]
        let full = d.expected_kron_power_with_cap(2 * q, cap)?.into_inner();
        let (side, l) = if lifted {
            let s = symmetrizer(n, q)?;
            let ss = s.kronecker(&s);
            (s.nrows(), &ss * full * ss.transpose())
        } else {
            (check_cap(n, q, cap)?, full)
        };
        Ok(QuadraticOperator {
            side,
            kind: QuadKind::Vectorized(l.transpose()),
        })
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let y = match &self.kind {
            QuadKind::Atoms(mats) => {
                let mut acc = DMatrix::zeros(self.side, self.side);
                for (p, b) in mats {
                    acc += (b.transpose() * x * b) * *p;
                }
                acc
            }
            QuadKind::Vectorized(lt) => unvec(&(lt * vec_of(x)), self.side),
        };
        symmetrize(y)
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn resolve_space(space: LiftSpace, d: &MatrixDistribution, order: usize) -> bool {
    order > 1
        && match space {
            LiftSpace::Auto => d.support_is_cone_invariant(),
            LiftSpace::Kronecker => false,
            LiftSpace::Symmetric => true,
        }
}

fn check_gamma_above_radius(d: &MatrixDistribution, p: usize, gamma: f64) -> Result<f64> {
    let rho = p_radius_exact(d, p)?.value;
    if gamma <= rho {
        return Err(Error::GammaTooSmall(format!(
            "gamma = {gamma} does not exceed the {p}-radius {rho}"
        )));
    }
    Ok(rho)
}

pub fn synth_quadratic(d: &MatrixDistribution, p: usize, gamma: f64) -> Result<LyapunovCertificate> {
    synth_quadratic_with(d, p, gamma, &SynthOptions::default())
}

/// Neumann-series solution of `E[BᵀHB] ⪯ γ^p H` with `H ⪰ I`.
pub fn synth_quadratic_with(
    d: &MatrixDistribution,
    p: usize,
    gamma: f64,
    opts: &SynthOptions,
) -> Result<LyapunovCertificate> {
    if p == 0 || p % 2 != 0 {
        return Err(Error::AssumptionViolated(format!(
            "quadratic certificates need an even degree (A1); got p = {p}"
        )));
    }
    check_gamma(gamma)?;
    let rho = check_gamma_above_radius(d, p, gamma)?;
    let q = p / 2;
    let lifted = resolve_space(opts.space, d, q);
    let op = QuadraticOperator::new(d, q, lifted, opts.dim_cap)?;
    let gp = gamma.powi(p as i32);

    let eye = DMatrix::<f64>::identity(op.side, op.side);
    let mut x = eye.clone();
    let mut h = eye;
    let mut prev = 1.0;
    let mut stalled = 0;
    let mut terms = None;
    for k in 1..=opts.max_terms {
        x = op.apply(&x) / gp;
        // X_k ⪰ 0, so the trace bounds its spectral norm
        let inc = x.trace();
        if !inc.is_finite() {
            break;
        }
        h += &x;
        if inc < opts.tol_series {
            terms = Some(k);
            break;
        }
        if inc >= prev {
            stalled += 1;
            if stalled >= opts.stall_terms {
                break;
            }
        } else {
            stalled = 0;
        }
        prev = inc;
    }
    let Some(terms) = terms else {
        return Err(Error::GammaTooSmall(format!(
            "Lyapunov series at gamma = {gamma} did not converge (p-radius {rho})"
        )));
    };
    let h = SymmetricMatrix::new(h)?;
    let residual = quadratic_residual(&op, &h, gp);
    LyapunovCertificate::new(
        p,
        gamma,
        CertificateForm::Quadratic { h },
        lifted,
        Provenance {
            method: Some("neumann_series".into()),
            p_radius: Some(rho),
            terms: Some(terms),
            delta: None,
            residual: Some(residual),
        },
    )
}

/// Degree-2 certificate from the linear system `γ²H − E[AᵀHA] = γ²I`.
pub fn synth_mean_square(d: &MatrixDistribution, gamma: f64) -> Result<LyapunovCertificate> {
    check_gamma(gamma)?;
    let rho = check_gamma_above_radius(d, 2, gamma)?;
    let op = QuadraticOperator::vectorized(d, 1, false, DEFAULT_DIM_CAP)?;
    let QuadKind::Vectorized(lt) = &op.kind else {
        unreachable!()
    };
    let g2 = gamma * gamma;
    let m = lt.nrows();
    let system = DMatrix::<f64>::identity(m, m) * g2 - lt;
    let rhs = vec_of(&(DMatrix::<f64>::identity(op.side, op.side) * g2));
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::GammaTooSmall("Lyapunov equation is singular".into()))?;
    let h = SymmetricMatrix::new(unvec(&sol, op.side))?;
    let residual = quadratic_residual(&op, &h, g2);
    LyapunovCertificate::new(
        2,
        gamma,
        CertificateForm::Quadratic { h },
        false,
        Provenance {
            method: Some("lyapunov_equation".into()),
            p_radius: Some(rho),
            terms: None,
            delta: None,
            residual: Some(residual),
        },
    )
}

fn quadratic_residual(op: &QuadraticOperator, h: &SymmetricMatrix, gp: f64) -> f64 {
    let r = op.apply(h.as_matrix()) - h.as_matrix() * gp;
    symmetric_extreme_eigenvalues(&symmetrize(r)).1
}

pub fn synth_cone_norm(d: &MatrixDistribution, p: usize, gamma: f64) -> Result<LyapunovCertificate> {
    synth_cone_norm_with(d, p, gamma, &SynthOptions::default())
}

/// Perturbation schedule for `M + δP` when `E[B]` is not entrywise positive.
pub const DELTA_SCHEDULE: [f64; 8] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10];

/// Weighted ℓ¹ certificate from the left Perron vector of `E[B]`, with
/// `B = A` for `p = 1` and the degree-p tensor (lifted under `Auto`)
/// otherwise.
pub fn synth_cone_norm_with(
    d: &MatrixDistribution,
    p: usize,
    gamma: f64,
    opts: &SynthOptions,
) -> Result<LyapunovCertificate> {
    if p == 0 {
        return Err(Error::invalid("p must be >= 1"));
    }
    check_gamma(gamma)?;
    if !d.support_is_cone_invariant() {
        return Err(Error::AssumptionViolated(
            "cone-norm certificates need a support leaving the nonnegative orthant invariant (A2)"
                .into(),
        ));
    }
    let rho = check_gamma_above_radius(d, p, gamma)?;
    let lifted = p > 1 && opts.space != LiftSpace::Kronecker;
    let m = cone_mean(d, p, lifted, opts.dim_cap)?;
    let gp = gamma.powi(p as i32);

    let mut delta = None;
    let mut weight = None;
    if m.iter().all(|&v| v > 0.0) {
        if let Ok((_, g)) = left_perron_vector(m.as_matrix()) {
            let w = ConeWeight::new(g)?;
            if cone_operator_norm(&m, &w) < gp {
                weight = Some(w);
            }
        }
    }
    if weight.is_none() {
        for dl in DELTA_SCHEDULE {
            let perturbed = m.as_matrix().add_scalar(dl);
            let Ok((_, g)) = left_perron_vector(&perturbed) else {
                continue;
            };
            let Ok(w) = ConeWeight::new(g) else { continue };
            if cone_operator_norm(&m, &w) < gp {
                weight = Some(w);
                delta = Some(dl);
                break;
            }
        }
    }
    let Some(g) = weight else {
        return Err(Error::GammaTooSmall(format!(
            "no perturbation in the schedule gives a weight with rate below gamma = {gamma}"
        )));
    };
    let residual = cone_operator_norm(&m, &g) - gp;
    LyapunovCertificate::new(
        p,
        gamma,
        CertificateForm::ConeNorm { g },
        lifted,
        Provenance {
            method: Some("perron_weight".into()),
            p_radius: Some(rho),
            terms: None,
            delta,
            residual: Some(residual),
        },
    )
}

fn cone_mean(d: &MatrixDistribution, p: usize, lifted: bool, cap: usize) -> Result<SquareMatrix> {
    if p == 1 {
        Ok(d.mean())
    } else if lifted {
        d.expected_lift_matrix(p)
    } else {
        d.expected_kron_power_with_cap(p, cap)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VerifyMode {
    Exact,
    MonteCarlo { n_x: usize, n_a: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum VerificationStatus {
    Pass,
    Fail,
    /// Sampled ratios exceed `γ^p` but lie within three standard errors.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub status: VerificationStatus,
    /// Exact mode: `λ_max(T(H) − γ^p H)` or `max_j (gᵀE[B])_j/g_j − γ^p`.
    pub residual: Option<f64>,
    /// Monte-Carlo mode: largest sampled `mean V(Ax) / V(x)` and its
    /// standard error.
    pub max_ratio: Option<f64>,
    pub max_ratio_se: Option<f64>,
    pub target: f64,
    /// Norm-equivalence constants; exact for quadratic forms, sampled on unit
    /// vectors otherwise.
    pub c1: f64,
    pub c2: f64,
}

pub fn verify_certificate(
    d: &MatrixDistribution,
    cert: &LyapunovCertificate,
    mode: VerifyMode,
) -> Result<VerificationReport> {
    if cert.state_dim != d.dim() {
        return Err(Error::invalid(format!(
            "certificate is for dimension {}, distribution has dimension {}",
            cert.state_dim,
            d.dim()
        )));
    }
    let target = cert.gamma.powi(cert.degree as i32);
    match mode {
        VerifyMode::Exact => verify_exact(d, cert, target),
        VerifyMode::MonteCarlo { n_x, n_a, seed } => verify_mc(d, cert, target, n_x, n_a, seed),
    }
}

fn verify_exact(
    d: &MatrixDistribution,
    cert: &LyapunovCertificate,
    target: f64,
) -> Result<VerificationReport> {
    match &cert.form {
        CertificateForm::Quadratic { h } => {
            let op = QuadraticOperator::new(d, cert.order(), cert.lifted, DEFAULT_DIM_CAP)?;
            let residual = quadratic_residual(&op, h, target);
            let ok = residual <= TOL_PSD && h.is_positive_definite();
            Ok(VerificationReport {
                status: if ok {
                    VerificationStatus::Pass
                } else {
                    VerificationStatus::Fail
                },
                residual: Some(residual),
                max_ratio: None,
                max_ratio_se: None,
                target,
                c1: h.min_eigenvalue(),
                c2: h.max_eigenvalue(),
            })
        }
        CertificateForm::ConeNorm { g } => {
            if !d.support_is_cone_invariant() {
                return Err(Error::AssumptionViolated(
                    "exact cone-norm check needs a support leaving the nonnegative orthant \
                     invariant (A2)"
                        .into(),
                ));
            }
            let m = cone_mean(d, cert.degree, cert.lifted, DEFAULT_DIM_CAP)?;
            let residual = cone_operator_norm(&m, g) - target;
            let (c1, c2) = sampled_constants(cert, 1000, 0);
            Ok(VerificationReport {
                status: if residual <= TOL_CONE {
                    VerificationStatus::Pass
                } else {
                    VerificationStatus::Fail
                },
                residual: Some(residual),
                max_ratio: None,
                max_ratio_se: None,
                target,
                c1,
                c2,
            })
        }
    }
}

fn random_unit(r: &mut rng::Stream, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

fn sampled_constants(f: &dyn StateFunction, n: usize, seed: u64) -> (f64, f64) {
    let mut r = rng::stream(rng::derive_seed(seed, 0xC0_C1), 0);
    (0..n)
        .map(|_| f.eval(&random_unit(&mut r, f.state_dim())))
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn verify_mc(
    d: &MatrixDistribution,
    cert: &LyapunovCertificate,
    target: f64,
    n_x: usize,
    n_a: usize,
    seed: u64,
) -> Result<VerificationReport> {
    if n_x == 0 || n_a < 2 {
        return Err(Error::invalid("Monte-Carlo verification needs n_x >= 1 and n_a >= 2"));
    }
    let base = rng::derive_seed(seed, 0x7E51);
    let per_state: Vec<(f64, f64, f64)> = (0..n_x)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(base, i as u64);
            let x = random_unit(&mut r, d.dim());
            let vx = cert.eval(&x);
            let ratios: Vec<f64> = (0..n_a)
                .map(|_| cert.eval(&(d.sample(&mut r).as_matrix() * &x)) / vx)
                .collect();
            let mean = ratios.iter().sum::<f64>() / n_a as f64;
            let var = ratios.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_a as f64 - 1.0);
            (vx, mean, (var / n_a as f64).sqrt())
        })
        .collect();
    let (mut c1, mut c2) = (f64::INFINITY, 0.0f64);
    let (mut max_ratio, mut max_se) = (f64::NEG_INFINITY, 0.0);
    let mut clearly_above = false;
    for &(vx, mean, se) in &per_state {
        c1 = c1.min(vx);
        c2 = c2.max(vx);
        if mean > max_ratio {
            max_ratio = mean;
            max_se = se;
        }
        clearly_above |= mean - 3.0 * se > target;
    }
    let status = if max_ratio <= target {
        VerificationStatus::Pass
    } else if clearly_above {
        VerificationStatus::Fail
    } else {
        VerificationStatus::Inconclusive
    };
    Ok(VerificationReport {
        status,
        residual: None,
        max_ratio: Some(max_ratio),
        max_ratio_se: Some(max_se),
        target,
        c1,
        c2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DefinitionalOptions {
    pub k0_cap: usize,
    /// Enumerate products exactly while a level has at most this many.
    pub exact_product_limit: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for DefinitionalOptions {
    fn default() -> Self {
        DefinitionalOptions {
            k0_cap: 40,
            exact_product_limit: 1 << 14,
            mc_samples: 4000,
            seed: 0,
        }
    }
}

/// `V(x) = Σ_{k<k₀} E[‖A_k⋯A_1x‖^p] / γ^{pk}` with `k₀` the first horizon at
/// which `h_k = E[‖A_k⋯A_1‖^p]^{1/(pk)} ≤ γ`.
#[derive(Clone, Debug)]
pub struct DefinitionalLyapunov {
    p: usize,
    gamma: f64,
    k0: usize,
    dim: usize,
    /// `h_1, …, h_{k₀}`.
    h: Vec<f64>,
    /// Weighted products of length `k` for `k = 0..k₀`.
    levels: Vec<Vec<(f64, DMatrix<f64>)>>,
    exact: bool,
}

impl DefinitionalLyapunov {
    pub fn k0(&self) -> usize {
        self.k0
    }

    pub fn growth_sequence(&self) -> &[f64] {
        &self.h
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    /// `(1, Σ_{k<k₀} (h_k/γ)^{pk})` bracketing `V(x)/‖x‖^p`.
    pub fn bracket(&self) -> (f64, f64) {
        let pf = self.p as f64;
        let upper = 1.0
            + (1..self.k0)
                .map(|k| (self.h[k - 1] / self.gamma).powf(pf * k as f64))
                .sum::<f64>();
        (1.0, upper)
    }
}

impl StateFunction for DefinitionalLyapunov {
    fn degree(&self) -> usize {
        self.p
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        let pf = self.p as f64;
        let gp = self.gamma.powf(pf);
        self.levels
            .iter()
            .enumerate()
            .map(|(k, level)| {
                let s: f64 = level.iter().map(|(w, m)| w * (m * x).norm().powf(pf)).sum();
                s / gp.powi(k as i32)
            })
            .sum()
    }
}

pub fn definitional_lyapunov(
    d: &MatrixDistribution,
    p: usize,
    gamma: f64,
) -> Result<DefinitionalLyapunov> {
    definitional_lyapunov_with(d, p, gamma, &DefinitionalOptions::default())
}

pub fn definitional_lyapunov_with(
    d: &MatrixDistribution,
    p: usize,
    gamma: f64,
    opts: &DefinitionalOptions,
) -> Result<DefinitionalLyapunov> {
    if p == 0 {
        return Err(Error::invalid("p must be >= 1"));
    }
    check_gamma(gamma)?;
    let n = d.dim();
    let pf = p as f64;
    let mut levels = vec![vec![(1.0, DMatrix::<f64>::identity(n, n))]];
    let mut h = Vec::new();
    let mut exact = true;
    let mut mc: Option<Vec<(rng::Stream, DMatrix<f64>)>> = None;

    for k in 1..=opts.k0_cap {
        let prev = levels.last().expect("level 0 exists");
        let atoms = d.atoms().filter(|a| exact && prev.len() * a.len() <= opts.exact_product_limit);
        let level: Vec<(f64, DMatrix<f64>)> = match atoms {
            Some(atoms) => prev
                .iter()
                .flat_map(|(w, m)| atoms.iter().map(move |a| (w * a.prob, a.matrix.as_matrix() * m)))
                .collect(),
            None => {
                exact = false;
                let paths = mc.get_or_insert_with(|| {
                    (0..opts.mc_samples)
                        .map(|j| {
                            let mut r = rng::stream(rng::derive_seed(opts.seed, 0xDEF), j as u64);
                            let mut m = DMatrix::<f64>::identity(n, n);
                            for _ in 1..k {
                                m = d.sample(&mut r).as_matrix() * m;
                            }
                            (r, m)
                        })
                        .collect()
                });
                let w = 1.0 / opts.mc_samples as f64;
                paths
                    .iter_mut()
                    .map(|(r, m)| {
                        *m = d.sample(r).as_matrix() * &*m;
                        (w, m.clone())
                    })
                    .collect()
            }
        };
        let moment: f64 = level.iter().map(|(w, m)| w * spectral_norm(m).powf(pf)).sum();
        let hk = moment.powf(1.0 / (pf * k as f64));
        h.push(hk);
        if hk <= gamma {
            return Ok(DefinitionalLyapunov {
                p,
                gamma,
                k0: k,
                dim: n,
                h,
                levels,
                exact,
            });
        }
        levels.push(level);
    }
    Err(Error::GammaTooSmall(format!(
        "no horizon up to {} has growth h_k <= gamma = {gamma} (last h_k = {})",
        opts.k0_cap,
        h.last().copied().unwrap_or(f64::NAN)
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::example_interval_2x2;
    use approx::assert_relative_eq;

    /// The example box is only first-mean stable; shrink it for degree ≥ 2.
    fn stable_box() -> MatrixDistribution {
        example_interval_2x2().scaled(0.9).unwrap()
    }

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn point_mass_diag_quadratic() {
        let d = MatrixDistribution::point_mass(SquareMatrix::diag(&[0.5, 0.5]).unwrap());
        let c = synth_quadratic(&d, 2, 0.7).unwrap();
        let CertificateForm::Quadratic { h } = c.form() else { panic!() };
        let oracle = 1.0 / (1.0 - 0.25 / 0.49);
        assert_relative_eq!(h.as_matrix()[(0, 0)], oracle, epsilon = 1e-10);
        assert_relative_eq!(h.as_matrix()[(0, 1)], 0.0);
        let r = verify_certificate(&d, &c, VerifyMode::Exact).unwrap();
        assert_eq!(r.status, VerificationStatus::Pass);
        assert!(r.residual.unwrap() <= 0.0);
    }

    #[test]
    fn scalar_uniform_quadratic() {
        let d = MatrixDistribution::scalar_uniform(0.0, 1.0).unwrap();
        let c = synth_quadratic(&d, 2, 0.7).unwrap();
        let CertificateForm::Quadratic { h } = c.form() else { panic!() };
        let hv = 1.0 / (1.0 - (1.0 / 3.0) / 0.49);
        assert_relative_eq!(h.as_matrix()[(0, 0)], hv, epsilon = 1e-10);
        let r = verify_certificate(&d, &c, VerifyMode::Exact).unwrap();
        assert_relative_eq!(r.residual.unwrap(), -0.49, epsilon = 1e-10);
    }

    #[test]
    fn example_box_is_not_mean_square_stable() {
        let d = example_interval_2x2();
        assert!(p_radius_exact(&d, 2).unwrap().value > 1.0);
        assert!(matches!(synth_quadratic(&d, 2, 0.97), Err(Error::GammaTooSmall(_))));
    }

    #[test]
    fn example_box_quadratic() {
        let d = stable_box();
        let c = synth_quadratic(&d, 2, 0.97).unwrap();
        assert!(matches!(c.form(), CertificateForm::Quadratic { h } if h.min_eigenvalue() >= 1.0 - 1e-8));
        let r = verify_certificate(&d, &c, VerifyMode::Exact).unwrap();
        assert_eq!(r.status, VerificationStatus::Pass);
        assert!(r.residual.unwrap() <= TOL_PSD);
    }

    #[test]
    fn example_box_degree_four_both_spaces() {
        let d = stable_box();
        let rho4 = p_radius_exact(&d, 4).unwrap().value;
        let gamma = (1.0 + rho4) / 2.0;
        for space in [LiftSpace::Kronecker, LiftSpace::Symmetric] {
            let opts = SynthOptions {
                space,
                ..Default::default()
            };
            let c = synth_quadratic_with(&d, 4, gamma, &opts).unwrap();
            assert_eq!(c.is_lifted(), space == LiftSpace::Symmetric);
            let r = verify_certificate(&d, &c, VerifyMode::Exact).unwrap();
            assert_eq!(r.status, VerificationStatus::Pass, "{space:?}");
        }
    }

    #[test]
    fn vectorized_operator_matches_atom_sums() {
        let d = MatrixDistribution::uniform_atoms(vec![
            SquareMatrix::from_rows(&[vec![0.2, -0.5], vec![0.3, 0.1]]).unwrap(),
            SquareMatrix::from_rows(&[vec![0.6, 0.0], vec![-0.2, 0.4]]).unwrap(),
        ])
        .unwrap();
        let x = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, -0.3, 0.1, 1.0, 0.2, -0.3, 0.2, 1.5]);
        let xk = DMatrix::from_row_slice(4, 4, &[
            2.0, 0.1, -0.3, 0.0, 0.1, 1.0, 0.2, 0.4, -0.3, 0.2, 1.5, 0.1, 0.0, 0.4, 0.1, 3.0,
        ]);
        for (lifted, x) in [(true, &x), (false, &xk)] {
            let a = QuadraticOperator::new(&d, 2, lifted, 4096).unwrap();
            let b = QuadraticOperator::vectorized(&d, 2, lifted, 4096).unwrap();
            assert!((a.apply(x) - b.apply(x)).amax() < 1e-14);
        }
    }

    #[test]
    fn gamma_below_radius_is_rejected() {
        let d = example_interval_2x2();
        assert!(matches!(synth_quadratic(&d, 2, 0.1), Err(Error::GammaTooSmall(_))));
        assert!(matches!(synth_cone_norm(&d, 1, 0.1), Err(Error::GammaTooSmall(_))));
        assert!(matches!(synth_quadratic(&d, 3, 0.97), Err(Error::AssumptionViolated(_))));
        assert!(synth_quadratic(&d, 2, 1.0).is_err());
    }

    #[test]
    fn series_stall_detection() {
        // skip the up-front radius check by calling the series on a gamma just below it
        let d = MatrixDistribution::point_mass(SquareMatrix::diag(&[0.9]).unwrap());
        assert!(matches!(synth_quadratic(&d, 2, 0.9), Err(Error::GammaTooSmall(_))));
    }

    #[test]
    fn mean_square_paths_agree() {
        let d = MatrixDistribution::uniform_atoms(vec![
            SquareMatrix::from_rows(&[vec![0.2, 0.5], vec![0.3, 0.1]]).unwrap(),
            SquareMatrix::from_rows(&[vec![0.6, 0.0], vec![0.2, 0.4]]).unwrap(),
        ])
        .unwrap();
        let a = synth_quadratic(&d, 2, 0.8).unwrap();
        let b = synth_mean_square(&d, 0.8).unwrap();
        let (CertificateForm::Quadratic { h: ha }, CertificateForm::Quadratic { h: hb }) =
            (a.form(), b.form())
        else {
            panic!()
        };
        assert!((ha.as_matrix() - hb.as_matrix()).amax() < 1e-9);
        assert_relative_eq!(b.provenance.residual.unwrap(), -0.64, epsilon = 1e-10);
        assert_eq!(verify_certificate(&d, &a, VerifyMode::Exact).unwrap().status, VerificationStatus::Pass);
        assert_eq!(verify_certificate(&d, &b, VerifyMode::Exact).unwrap().status, VerificationStatus::Pass);
    }

    #[test]
    fn example_box_perron_weight() {
        let d = example_interval_2x2();
        let c = synth_cone_norm(&d, 1, 0.97).unwrap();
        let CertificateForm::ConeNorm { g } = c.form() else { panic!() };
        let rho = p_radius_exact(&d, 1).unwrap().value;
        // left eigenvector of [[0.75,0.9],[0.075,0.6]]: g₁ = 0.075/(ρ − 0.75)
        assert_relative_eq!(g.as_vector()[0], 0.075 / (rho - 0.75), epsilon = 1e-9);
        assert!((g.as_vector()[0] - 0.3838).abs() <= 1e-3);
        assert_eq!(g.as_vector()[1], 1.0);
        assert!(c.provenance.delta.is_none());
        let r = verify_certificate(&d, &c, VerifyMode::Exact).unwrap();
        assert_eq!(r.status, VerificationStatus::Pass);
    }

    #[test]
    fn hand_weight_inequality() {
        let d = example_interval_2x2();
        let c = LyapunovCertificate::new(
            1,
            0.97,
            CertificateForm::ConeNorm {
                g: ConeWeight::from_slice(&[0.3838, 1.0]).unwrap(),
            },
            false,
            Provenance::default(),
        )
        .unwrap();
        let gt_m = d.mean().transpose().as_matrix() * dvec(&[0.3838, 1.0]);
        assert_relative_eq!(gt_m[0], 0.3838 * 0.75 + 0.075, epsilon = 1e-12);
        assert_relative_eq!(gt_m[1], 0.3838 * 0.9 + 0.6, epsilon = 1e-12);
        assert!(gt_m[0] <= 0.97 * 0.3838 && gt_m[1] <= 0.97);
        assert_eq!(verify_certificate(&d, &c, VerifyMode::Exact).unwrap().status, VerificationStatus::Pass);
    }

    #[test]
    fn diagonal_point_mass_uses_perturbation() {
        let d = MatrixDistribution::point_mass(SquareMatrix::diag(&[0.5, 0.3]).unwrap());
        let c = synth_cone_norm(&d, 1, 0.6).unwrap();
        let CertificateForm::ConeNorm { g } = c.form() else { panic!() };
        assert_eq!(c.provenance.delta, Some(1e-3));
        assert!(cone_operator_norm(&d.mean(), g) < 0.6);
    }

    #[test]
    fn scalar_cone_norm() {
        let d = MatrixDistribution::scalar_uniform(0.0, 1.0).unwrap();
        let c = synth_cone_norm(&d, 1, 0.6).unwrap();
        let CertificateForm::ConeNorm { g } = c.form() else { panic!() };
        assert_eq!(g.as_vector()[0], 1.0);
        assert_relative_eq!(cone_operator_norm(&d.mean(), g), 0.5);
    }

    #[test]
    fn lifted_cone_norm_is_a_certificate() {
        let d = stable_box();
        let rho3 = p_radius_exact(&d, 3).unwrap().value;
        let c = synth_cone_norm(&d, 3, (1.0 + rho3) / 2.0).unwrap();
        assert!(c.is_lifted());
        assert_eq!(verify_certificate(&d, &c, VerifyMode::Exact).unwrap().status, VerificationStatus::Pass);
        let mc = verify_certificate(&d, &c, VerifyMode::MonteCarlo { n_x: 50, n_a: 2000, seed: 3 }).unwrap();
        assert!(mc.max_ratio.unwrap() <= mc.target + 3.0 * mc.max_ratio_se.unwrap());
        // homogeneity of degree 3
        let x = dvec(&[0.3, -1.2]);
        assert_relative_eq!(c.eval(&(&x * 2.0)), 8.0 * c.eval(&x), max_relative = 1e-12);
    }

    #[test]
    fn cone_norm_needs_invariance() {
        let d = MatrixDistribution::point_mass(
            SquareMatrix::from_rows(&[vec![0.5, -0.1], vec![0.0, 0.3]]).unwrap(),
        );
        assert!(matches!(synth_cone_norm(&d, 2, 0.9), Err(Error::AssumptionViolated(_))));
    }

    #[test]
    fn corrupted_h_fails() {
        let d = stable_box();
        let c = synth_quadratic(&d, 2, 0.97).unwrap();
        let CertificateForm::Quadratic { h } = c.form() else { panic!() };
        let eig = nalgebra::SymmetricEigen::new(h.as_matrix().clone());
        let mut vals = eig.eigenvalues.clone();
        vals[0] = -vals[0];
        let bad = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        let err = LyapunovCertificate::new(
            2,
            0.97,
            CertificateForm::Quadratic { h: SymmetricMatrix::new(bad).unwrap() },
            false,
            Provenance::default(),
        );
        assert!(err.is_err());
        // a PD matrix that violates the inequality
        let tight = LyapunovCertificate::new(
            2,
            0.95,
            CertificateForm::Quadratic { h: SymmetricMatrix::new(DMatrix::identity(2, 2)).unwrap() },
            false,
            Provenance::default(),
        )
        .unwrap();
        let r = verify_certificate(&d, &tight, VerifyMode::Exact).unwrap();
        assert_eq!(r.status, VerificationStatus::Fail);
    }

    #[test]
    fn montecarlo_verification_of_quadratic() {
        let d = stable_box();
        let c = synth_quadratic(&d, 2, 0.97).unwrap();
        let r = verify_certificate(&d, &c, VerifyMode::MonteCarlo { n_x: 40, n_a: 2000, seed: 1 }).unwrap();
        assert_ne!(r.status, VerificationStatus::Fail);
        assert!(r.c1 >= 1.0 - 1e-8);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let d = stable_box();
        for c in [
            synth_quadratic(&d, 2, 0.97).unwrap(),
            synth_quadratic(&d, 4, 0.995).unwrap(),
            synth_cone_norm(&d, 1, 0.97).unwrap(),
            synth_cone_norm(&d, 2, 0.97).unwrap(),
        ] {
            let s = c.to_json_string();
            let back = LyapunovCertificate::from_json_str(&s).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_json_string(), s);
        }
    }

    #[test]
    fn json_errors_cite_fields() {
        let e = LyapunovCertificate::from_json_str(r#"{"degree":2,"gamma":0.9,"form":"quadratic","lifted":false}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("`H`"), "{e}");
        let e = LyapunovCertificate::from_json_str(r#"{"degree":1,"gamma":1.5,"form":"cone_norm","g":[1,1]}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("`gamma`"), "{e}");
        let e = LyapunovCertificate::from_json_str(r#"{"degree":1,"gamma":0.5,"form":"cone_norm","g":[1,0]}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("`g`"), "{e}");
    }

    #[test]
    fn definitional_examples() {
        let d = MatrixDistribution::point_mass(SquareMatrix::diag(&[0.5, 0.5]).unwrap());
        let v = definitional_lyapunov(&d, 1, 0.7).unwrap();
        assert_eq!(v.k0(), 1);
        let x = dvec(&[3.0, 4.0]);
        assert_relative_eq!(v.eval(&x), 5.0);

        let d = MatrixDistribution::scalar_uniform(0.0, 1.0).unwrap();
        let v = definitional_lyapunov(&d, 2, 0.7).unwrap();
        assert_eq!(v.k0(), 1);
        assert!((v.growth_sequence()[0] - (1.0f64 / 3.0).sqrt()).abs() < 0.02);
        assert_relative_eq!(v.eval(&dvec(&[2.0])), 4.0);
    }

    #[test]
    fn definitional_finite_pair_is_a_lyapunov_function() {
        let a = SquareMatrix::from_rows(&[vec![0.3, 0.9], vec![0.0, 0.4]]).unwrap();
        let b = SquareMatrix::from_rows(&[vec![0.4, 0.0], vec![0.8, 0.3]]).unwrap();
        let d = MatrixDistribution::uniform_atoms(vec![a.clone(), b.clone()]).unwrap();
        let gamma = 0.9;
        let v = definitional_lyapunov(&d, 2, gamma).unwrap();
        assert!(v.k0() > 1 && v.is_exact());
        let (lo, hi) = v.bracket();
        let mut r = rng::stream(4, 0);
        for _ in 0..200 {
            let x = random_unit(&mut r, 2);
            let vx = v.eval(&x);
            assert!(vx >= lo - 1e-12 && vx <= hi + 1e-9);
            let next = 0.5 * (v.eval(&(a.as_matrix() * &x)) + v.eval(&(b.as_matrix() * &x)));
            assert!(next <= gamma * gamma * vx + 1e-12);
        }
    }

    #[test]
    fn definitional_gamma_too_small() {
        let d = MatrixDistribution::point_mass(SquareMatrix::diag(&[0.5]).unwrap());
        let opts = DefinitionalOptions {
            k0_cap: 5,
            ..Default::default()
        };
        assert!(matches!(
            definitional_lyapunov_with(&d, 2, 0.4, &opts),
            Err(Error::GammaTooSmall(_))
        ));
    }

    #[test]
    fn definitional_monte_carlo_mode() {
        let d = example_interval_2x2();
        let v = definitional_lyapunov(&d, 1, 0.97).unwrap();
        assert!(!v.is_exact());
        let x = dvec(&[0.0, 1.0]);
        assert!(v.eval(&x) >= 1.0);
    }
}
