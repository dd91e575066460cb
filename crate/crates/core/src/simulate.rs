//! Sample paths of `x(k+1) = A_k x(k)`, stochastic and worst case.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dist::MatrixDistribution;
use crate::error::{Error, Result};
use crate::linalg::{spectral_radius, SquareMatrix};
use crate::lyapunov::StateFunction;
use crate::output::fmt_sig;
use crate::pradius::{log_mean_exp, p_radius_exact};
use crate::rng;

/// Sum in a fixed binary-tree order; result does not depend on threading.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn pairwise_mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub horizon: usize,
    pub seed: u64,
    /// `states[path][k]` for `k = 0..=horizon`.
    pub states: Vec<Vec<DVector<f64>>>,
    /// Sample mean of `‖x(k)‖`.
    pub mean_norm: Vec<f64>,
    /// `mean_v[i][k]`: sample mean of the `i`-th evaluator at step `k`.
    pub mean_v: Vec<Vec<f64>>,
    /// Componentwise mean state.
    pub mean_path: Vec<DVector<f64>>,
}

impl PathEnsemble {
    /// `k,path_id,x1,…,xn`, path-major.
    pub fn paths_csv(&self) -> String {
        let n = self.states.first().map_or(0, |p| p[0].len());
        let mut out = String::from("k,path_id");
        for i in 1..=n {
            let _ = write!(out, ",x{i}");
        }
        out.push('\n');
        for (j, path) in self.states.iter().enumerate() {
            for (k, x) in path.iter().enumerate() {
                let _ = write!(out, "{k},{j}");
                for v in x.iter() {
                    let _ = write!(out, ",{}", fmt_sig(*v));
                }
                out.push('\n');
            }
        }
        out
    }

    /// `k,mean_norm,mean_V_1,…,mean_V_m`.
    pub fn stats_csv(&self) -> String {
        let mut out = String::from("k,mean_norm");
        for i in 1..=self.mean_v.len() {
            let _ = write!(out, ",mean_V_{i}");
        }
        out.push('\n');
        for k in 0..=self.horizon {
            let _ = write!(out, "{k},{}", fmt_sig(self.mean_norm[k]));
            for v in &self.mean_v {
                let _ = write!(out, ",{}", fmt_sig(v[k]));
            }
            out.push('\n');
        }
        out
    }
}

/// Number of steps `k` with `series[k+1] > series[k]`.
pub fn count_increases(series: &[f64]) -> usize {
    series.windows(2).filter(|w| w[1] > w[0]).count()
}

fn check_x0(d_dim: usize, x0: &DVector<f64>, horizon: usize) -> Result<()> {
    if x0.len() != d_dim {
        return Err(Error::invalid(format!(
            "x0 has {} components, distribution has dimension {d_dim}",
            x0.len()
        )));
    }
    if x0.iter().all(|&v| v == 0.0) || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("x0 must be finite and nonzero"));
    }
    if horizon == 0 {
        return Err(Error::invalid("horizon must be >= 1"));
    }
    Ok(())
}

/// `n_paths` independent paths; path `j` draws from stream `(seed, j)`.
pub fn simulate_stochastic(
    d: &MatrixDistribution,
    x0: &DVector<f64>,
    horizon: usize,
    n_paths: usize,
    seed: u64,
    evaluators: &[&dyn StateFunction],
) -> Result<PathEnsemble> {
    check_x0(d.dim(), x0, horizon)?;
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be >= 1"));
    }
    if let Some(e) = evaluators.iter().find(|e| e.state_dim() != d.dim()) {
        return Err(Error::invalid(format!(
            "evaluator has dimension {}, distribution has dimension {}",
            e.state_dim(),
            d.dim()
        )));
    }
    let states: Vec<Vec<DVector<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|j| {
            let mut r = rng::stream(seed, j as u64);
            let mut path = Vec::with_capacity(horizon + 1);
            path.push(x0.clone());
            for k in 0..horizon {
                let next = d.sample(&mut r).as_matrix() * &path[k];
                path.push(next);
            }
            path
        })
        .collect();

    let column = |k: usize, f: &dyn Fn(&DVector<f64>) -> f64| -> f64 {
        let vals: Vec<f64> = states.iter().map(|p| f(&p[k])).collect();
        pairwise_mean(&vals)
    };
    let mean_norm = (0..=horizon).map(|k| column(k, &|x| x.norm())).collect();
    let mean_v = evaluators
        .iter()
        .map(|e| (0..=horizon).map(|k| column(k, &|x| e.eval(x))).collect())
        .collect();
    let mean_path = (0..=horizon)
        .map(|k| DVector::from_fn(d.dim(), |i, _| column(k, &|x| x[i])))
        .collect();
    Ok(PathEnsemble {
        n_paths,
        horizon,
        seed,
        states,
        mean_norm,
        mean_v,
        mean_path,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstCasePath {
    /// Atom indices applied at steps `1..=horizon`.
    pub sequence: Vec<usize>,
    pub states: Vec<DVector<f64>>,
    /// `max_k (‖x(k)‖/‖x₀‖)^{1/k}` along the returned path.
    pub growth: f64,
    /// `max_k ρ(A_{σ_k}⋯A_{σ_1})^{1/k}` along the returned sequence; always a
    /// lower bound on the joint spectral radius.
    pub witness: f64,
}

pub const DEFAULT_BEAM_WIDTH: usize = 64;

struct Candidate {
    sequence: Vec<usize>,
    /// Unit direction of `x(k)`.
    dir: DVector<f64>,
    log_norm: f64,
}

/// Beam search over switching sequences maximizing `‖x(horizon)‖`.
pub fn simulate_worst_case(
    matrices: &[SquareMatrix],
    x0: &DVector<f64>,
    horizon: usize,
    beam_width: usize,
) -> Result<WorstCasePath> {
    let Some(first) = matrices.first() else {
        return Err(Error::invalid("worst-case search needs at least one matrix"));
    };
    if matrices.iter().any(|m| m.dim() != first.dim()) {
        return Err(Error::invalid("matrices have different sides"));
    }
    check_x0(first.dim(), x0, horizon)?;
    let width = beam_width.max(1);
    let norm0 = x0.norm();
    let mut beam = vec![Candidate {
        sequence: Vec::new(),
        dir: x0 / norm0,
        log_norm: norm0.ln(),
    }];
    for _ in 0..horizon {
        let mut next: Vec<Candidate> = beam
            .par_iter()
            .flat_map_iter(|c| {
                matrices.iter().enumerate().map(move |(i, m)| {
                    let y = m.as_matrix() * &c.dir;
                    let ny = y.norm();
                    let mut sequence = c.sequence.clone();
                    sequence.push(i);
                    if ny == 0.0 {
                        Candidate {
                            sequence,
                            dir: y,
                            log_norm: f64::NEG_INFINITY,
                        }
                    } else {
                        Candidate {
                            sequence,
                            dir: y / ny,
                            log_norm: c.log_norm + ny.ln(),
                        }
                    }
                })
            })
            .collect();
        // stable sort keeps the enumeration order among ties
        next.sort_by(|a, b| b.log_norm.total_cmp(&a.log_norm));
        next.truncate(width);
        beam = next;
    }
    let best = &beam[0];

    let mut states = vec![x0.clone()];
    let n = first.dim();
    let mut prod = DMatrix::<f64>::identity(n, n);
    let mut log_scale = 0.0;
    let mut growth = 0.0f64;
    let mut witness = 0.0f64;
    for (k, &i) in best.sequence.iter().enumerate() {
        let steps = (k + 1) as f64;
        let x = matrices[i].as_matrix() * &states[k];
        growth = growth.max((x.norm() / norm0).powf(1.0 / steps));
        states.push(x);
        prod = matrices[i].as_matrix() * prod;
        let c = prod.amax();
        if c > 0.0 {
            prod /= c;
            log_scale += c.ln();
            let rho = spectral_radius(&prod)?;
            if rho > 0.0 {
                witness = witness.max(((rho.ln() + log_scale) / steps).exp());
            }
        }
    }
    Ok(WorstCasePath {
        sequence: best.sequence.clone(),
        states,
        growth,
        witness,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthEstimate {
    pub p: usize,
    /// `exp(slope / p)` of the fit of `log E[‖x(k)‖^p]` against `k`.
    pub rate: f64,
    /// Rate at slope ± 2 standard errors.
    pub band: (f64, f64),
    /// `p_radius_exact(d, p)` when admissible.
    pub exact: Option<f64>,
}

/// Least-squares rate of `E[‖x(k)‖^p]` over `k ∈ [horizon/2, horizon]`.
pub fn estimate_pth_mean_rate(
    d: &MatrixDistribution,
    x0: &DVector<f64>,
    p: usize,
    horizon: usize,
    n_paths: usize,
    seed: u64,
) -> Result<GrowthEstimate> {
    check_x0(d.dim(), x0, horizon)?;
    if p == 0 || n_paths == 0 {
        return Err(Error::invalid("p and n_paths must be >= 1"));
    }
    if horizon < 4 {
        return Err(Error::invalid("horizon must be >= 4 for a rate fit"));
    }
    let pf = p as f64;
    // per path: p·log‖x(k)‖, kept in log space
    let logs: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|j| {
            let mut r = rng::stream(seed, j as u64);
            let n0 = x0.norm();
            let mut dir = x0 / n0;
            let mut log_norm = n0.ln();
            let mut out = Vec::with_capacity(horizon + 1);
            out.push(pf * log_norm);
            for _ in 0..horizon {
                if log_norm == f64::NEG_INFINITY {
                    out.push(f64::NEG_INFINITY);
                    continue;
                }
                let y = d.sample(&mut r).as_matrix() * &dir;
                let ny = y.norm();
                if ny == 0.0 {
                    log_norm = f64::NEG_INFINITY;
                } else {
                    dir = y / ny;
                    log_norm += ny.ln();
                }
                out.push(pf * log_norm);
            }
            out
        })
        .collect();

    let start = horizon / 2;
    let mut ks = Vec::new();
    let mut ys = Vec::new();
    for k in start..=horizon {
        let col: Vec<f64> = logs.iter().map(|l| l[k]).collect();
        let (lm, _) = log_mean_exp(&col);
        if !lm.is_finite() {
            return Err(Error::DegenerateFit(format!(
                "sample mean of |x(k)|^p is zero or overflows at k = {k}"
            )));
        }
        ks.push(k as f64);
        ys.push(lm);
    }
    let (slope, se) = linear_fit(&ks, &ys);
    let exact = p_radius_exact(d, p).ok().map(|r| r.value);
    Ok(GrowthEstimate {
        p,
        rate: (slope / pf).exp(),
        band: (((slope - 2.0 * se) / pf).exp(), ((slope + 2.0 * se) / pf).exp()),
        exact,
    })
}

/// Slope and its standard error.
fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let se = if xs.len() > 2 {
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, se)
}

/// Vertices of `{x ∈ ℝ² : V(x) = c}` along `n_vertices` rays, using
/// homogeneity of `V`.
pub fn level_set(f: &dyn StateFunction, c: f64, n_vertices: usize) -> Result<Vec<(f64, f64)>> {
    if f.state_dim() != 2 {
        return Err(Error::invalid("level sets are only drawn in two dimensions"));
    }
    if !(c > 0.0) || n_vertices < 3 {
        return Err(Error::invalid("level must be positive and n_vertices >= 3"));
    }
    let deg = f.degree() as f64;
    (0..n_vertices)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / n_vertices as f64;
            let u = DVector::from_vec(vec![t.cos(), t.sin()]);
            let v = f.eval(&u);
            if !(v > 0.0) {
                return Err(Error::invalid("function is not positive on the unit circle"));
            }
            let r = (c / v).powf(1.0 / deg);
            Ok((r * u[0], r * u[1]))
        })
        .collect()
}

/// `evaluator_id,c,vertex_x,vertex_y`.
pub fn levels_csv(levels: &[(usize, f64, Vec<(f64, f64)>)]) -> String {
    let mut out = String::from("evaluator_id,c,vertex_x,vertex_y\n");
    for (id, c, vertices) in levels {
        for (x, y) in vertices {
            let _ = writeln!(out, "{id},{},{},{}", fmt_sig(*c), fmt_sig(*x), fmt_sig(*y));
        }
    }
    out
}

/// Euclidean norm as a degree-1 state function.
#[derive(Clone, Copy, Debug)]
pub struct EuclideanNorm(pub usize);

impl StateFunction for EuclideanNorm {
    fn degree(&self) -> usize {
        1
    }

    fn state_dim(&self) -> usize {
        self.0
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        x.norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cone::ConeWeight;
    use crate::dist::example_interval_2x2;
    use crate::lyapunov::{synth_cone_norm, CertificateForm, LyapunovCertificate, Provenance};
    use approx::assert_relative_eq;

    fn dvec(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn point_mass_paths_are_deterministic() {
        let d = MatrixDistribution::point_mass(SquareMatrix::diag(&[0.5, 0.5]).unwrap());
        let e = simulate_stochastic(&d, &dvec(&[1.0, 1.0]), 3, 4, 0, &[]).unwrap();
        for path in &e.states {
            for (k, x) in path.iter().enumerate() {
                assert_eq!(x, &dvec(&[0.5f64.powi(k as i32); 2]));
            }
        }
        assert_eq!(e.mean_norm.len(), 4);
        assert_relative_eq!(e.mean_norm[3], 0.125 * 2.0f64.sqrt());
    }

    #[test]
    fn zero_matrix_kills_state() {
        let d = MatrixDistribution::point_mass(SquareMatrix::zeros(2));
        let w = LyapunovCertificate::new(
            1,
            0.5,
            CertificateForm::ConeNorm { g: ConeWeight::ones(2) },
            false,
            Provenance::default(),
        )
        .unwrap();
        let e = simulate_stochastic(&d, &dvec(&[1.0, 2.0]), 3, 2, 0, &[&w]).unwrap();
        assert_eq!(e.mean_v[0], vec![3.0, 0.0, 0.0, 0.0]);
        assert_eq!(e.mean_norm[1..], [0.0; 3]);
    }

    #[test]
    fn ensemble_is_reproducible_and_thread_independent() {
        let d = example_interval_2x2();
        let x0 = dvec(&[0.0, 1.0]);
        let a = simulate_stochastic(&d, &x0, 20, 50, 42, &[]).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate_stochastic(&d, &x0, 20, 50, 42, &[]).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.stats_csv(), b.stats_csv());
        let c = simulate_stochastic(&d, &x0, 20, 50, 43, &[]).unwrap();
        assert_ne!(a.mean_norm, c.mean_norm);
    }

    #[test]
    fn single_path_stats_equal_path() {
        let d = example_interval_2x2();
        let e = simulate_stochastic(&d, &dvec(&[0.0, 1.0]), 10, 1, 7, &[]).unwrap();
        for k in 0..=10 {
            assert_eq!(e.mean_norm[k], e.states[0][k].norm());
            assert_eq!(e.mean_path[k], e.states[0][k]);
        }
    }

    #[test]
    fn example_box_weighted_norm_decreases_more_often() {
        let d = example_interval_2x2();
        let cert = synth_cone_norm(&d, 1, 0.97).unwrap();
        let e = simulate_stochastic(&d, &dvec(&[0.0, 1.0]), 50, 200, 42, &[&cert]).unwrap();
        assert!(count_increases(&e.mean_v[0]) < count_increases(&e.mean_norm));
    }

    #[test]
    fn csv_layouts() {
        let d = MatrixDistribution::point_mass(SquareMatrix::diag(&[0.5, 0.5]).unwrap());
        let e = simulate_stochastic(&d, &dvec(&[1.0, 1.0]), 2, 2, 0, &[&EuclideanNorm(2)]).unwrap();
        let paths = e.paths_csv();
        assert!(paths.starts_with("k,path_id,x1,x2\n0,0,1,1\n1,0,0.5,0.5\n"));
        assert_eq!(paths.lines().count(), 1 + 2 * 3);
        assert!(e.stats_csv().starts_with("k,mean_norm,mean_V_1\n0,1.41421356237,1.41421356237\n"));
    }

    #[test]
    fn worst_case_singleton() {
        let a = SquareMatrix::from_rows(&[vec![0.5, 0.3], vec![0.2, 0.4]]).unwrap();
        let rho = spectral_radius(a.as_matrix()).unwrap();
        let w = simulate_worst_case(&[a], &dvec(&[1.0, 1.0]), 60, 8).unwrap();
        assert_eq!(w.sequence, vec![0; 60]);
        assert_relative_eq!(w.witness, rho, epsilon = 1e-10);
        assert!((w.growth - rho).abs() < 0.02);
    }

    #[test]
    fn worst_case_diagonal_pair() {
        let mats = [
            SquareMatrix::diag(&[0.9, 0.2]).unwrap(),
            SquareMatrix::diag(&[0.2, 0.9]).unwrap(),
        ];
        let w = simulate_worst_case(&mats, &dvec(&[1.0, 1.0]), 80, DEFAULT_BEAM_WIDTH).unwrap();
        assert!(w.sequence.iter().all(|&i| i == w.sequence[0]));
        assert!((w.growth - 0.9).abs() < 0.01, "{}", w.growth);
        assert_relative_eq!(w.witness, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn worst_case_contractive_pair_stays_below_envelope() {
        let mats = [
            SquareMatrix::from_rows(&[vec![0.3, 0.4], vec![0.1, 0.2]]).unwrap(),
            SquareMatrix::from_rows(&[vec![0.2, -0.1], vec![0.5, 0.3]]).unwrap(),
        ];
        let gamma = mats.iter().map(|m| crate::linalg::spectral_norm(m.as_matrix())).fold(0.0, f64::max);
        assert!(gamma < 1.0);
        let x0 = dvec(&[1.0, -1.0]);
        let w = simulate_worst_case(&mats, &x0, 30, 16).unwrap();
        for (k, x) in w.states.iter().enumerate() {
            assert!(x.norm() <= x0.norm() * gamma.powi(k as i32) * (1.0 + 1e-12));
        }
        assert!(w.witness <= w.growth.max(gamma) + 1e-12);
    }

    #[test]
    fn rate_point_mass() {
        let d = MatrixDistribution::point_mass(SquareMatrix::diag(&[0.5, 0.5]).unwrap());
        for p in [1, 2, 5] {
            let g = estimate_pth_mean_rate(&d, &dvec(&[1.0, 0.0]), p, 40, 3, 0).unwrap();
            assert!((g.rate - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn rate_scalar_uniform() {
        let d = MatrixDistribution::scalar_uniform(0.0, 1.0).unwrap();
        let g = estimate_pth_mean_rate(&d, &dvec(&[1.0]), 2, 10, 100_000, 3).unwrap();
        let exact = (1.0f64 / 3.0).sqrt();
        assert!((g.rate - exact).abs() < 0.02 * exact, "{}", g.rate);
        assert_relative_eq!(g.exact.unwrap(), exact, epsilon = 1e-12);
    }

    #[test]
    fn rate_example_box() {
        let d = example_interval_2x2();
        let g = estimate_pth_mean_rate(&d, &dvec(&[0.0, 1.0]), 2, 20, 50_000, 11).unwrap();
        let exact = g.exact.unwrap();
        assert!((g.rate - exact).abs() < 0.05 * exact, "{} vs {exact}", g.rate);
    }

    #[test]
    fn rate_degenerate() {
        let d = MatrixDistribution::point_mass(SquareMatrix::zeros(2));
        assert!(matches!(
            estimate_pth_mean_rate(&d, &dvec(&[1.0, 0.0]), 2, 10, 5, 0),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn level_sets() {
        let pts = level_set(&EuclideanNorm(2), 2.0, 256).unwrap();
        assert_eq!(pts.len(), 256);
        for (x, y) in &pts {
            assert_relative_eq!((x * x + y * y).sqrt(), 2.0, epsilon = 1e-12);
        }
        let d = example_interval_2x2();
        let cert = synth_cone_norm(&d, 1, 0.97).unwrap();
        for (x, y) in level_set(&cert, 1.0, 64).unwrap() {
            assert_relative_eq!(cert.eval(&dvec(&[x, y])), 1.0, epsilon = 1e-12);
        }
        let csv = levels_csv(&[(1, 2.0, pts)]);
        assert!(csv.starts_with("evaluator_id,c,vertex_x,vertex_y\n1,2,2,0\n"));
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_inputs() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }
}
