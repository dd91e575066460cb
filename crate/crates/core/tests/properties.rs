use approx::assert_relative_eq;
use jsrlab::dist::MatrixDistribution;
use jsrlab::linalg::{spectral_radius, SquareMatrix};
use jsrlab::lyapunov::{synth_quadratic, StateFunction};
use jsrlab::pradius::{p_radius_exact, p_radius_montecarlo};
use jsrlab::tensor::{kron, kron_power, lift_matrix, lift_vector, symmetrizer};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = SquareMatrix> {
    prop::collection::vec(lo..hi, n * n)
        .prop_map(move |v| SquareMatrix::new(DMatrix::from_vec(n, n, v)).unwrap())
}

fn nonnegative_law() -> impl Strategy<Value = MatrixDistribution> {
    (2usize..=3).prop_flat_map(|n| {
        prop::collection::vec((matrix(n, 0.0, 1.0), 0.1f64..1.0), 2..=3).prop_map(|atoms| {
            let total: f64 = atoms.iter().map(|(_, w)| w).sum();
            let atoms = atoms.into_iter().map(|(m, w)| (m, w / total)).collect();
            MatrixDistribution::finite(atoms).unwrap()
        })
    })
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).abs().max() <= tol * (1.0 + b.abs().max())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kron_mixed_product(a in matrix(2, -1.0, 1.0), b in matrix(3, -1.0, 1.0),
                          c in matrix(2, -1.0, 1.0), d in matrix(3, -1.0, 1.0)) {
        let lhs = kron(&a, &b).mul(&kron(&c, &d));
        let rhs = kron(&a.mul(&c), &b.mul(&d));
        prop_assert!(close(lhs.as_matrix(), rhs.as_matrix(), 1e-12));
    }

    #[test]
    fn lift_is_multiplicative_and_matches_isometry(a in matrix(3, -1.0, 1.0), b in matrix(3, -1.0, 1.0),
                                                   p in 1usize..=4) {
        let ab = lift_matrix(&a.mul(&b), p);
        let prod = lift_matrix(&a, p).mul(&lift_matrix(&b, p));
        prop_assert!(close(ab.as_matrix(), prod.as_matrix(), 1e-11));

        let s = symmetrizer(3, p).unwrap();
        let restricted = &s * kron_power(&a, p).unwrap().as_matrix() * s.transpose();
        prop_assert!(close(lift_matrix(&a, p).as_matrix(), &restricted, 1e-11));
    }

    #[test]
    fn lift_vector_preserves_norm_power(x in prop::collection::vec(-2.0f64..2.0, 3), p in 1usize..=5) {
        let x = DVector::from_vec(x);
        assert_relative_eq!(lift_vector(&x, p).norm(), x.norm().powi(p as i32), epsilon = 1e-10, max_relative = 1e-12);
    }

    #[test]
    fn kron_power_radius(a in matrix(2, -1.0, 1.0), p in 1usize..=4) {
        let r = spectral_radius(a.as_matrix()).unwrap();
        let rp = spectral_radius(kron_power(&a, p).unwrap().as_matrix()).unwrap();
        prop_assert!((rp - r.powi(p as i32)).abs() <= 1e-9 * (1.0 + rp));
    }

    #[test]
    fn p_radius_is_nondecreasing(d in nonnegative_law()) {
        let rho: Vec<f64> = (1..=5).map(|p| p_radius_exact(&d, p).unwrap().value).collect();
        for w in rho.windows(2) {
            prop_assert!(w[1] >= w[0] * (1.0 - 1e-12), "{rho:?}");
        }
    }

    #[test]
    fn p_radius_is_homogeneous(d in nonnegative_law(), c in 0.1f64..3.0, p in 1usize..=4) {
        let base = p_radius_exact(&d, p).unwrap().value;
        let scaled = p_radius_exact(&d.scaled(c).unwrap(), p).unwrap().value;
        assert_relative_eq!(scaled, c * base, max_relative = 1e-10);
    }

    #[test]
    fn quadratic_certificate_decreases_on_every_state(d in nonnegative_law(),
                                                      xs in prop::collection::vec(-1.0f64..1.0, 30)) {
        let rho = p_radius_exact(&d, 2).unwrap().value;
        let d = d.scaled(0.7 / rho).unwrap();
        let gamma = 0.85;
        let cert = synth_quadratic(&d, 2, gamma).unwrap();
        let atoms = d.atoms().unwrap();
        let n = d.dim();
        for chunk in xs.chunks(n).filter(|c| c.len() == n) {
            let x = DVector::from_column_slice(chunk);
            let v = cert.eval(&x);
            let next: f64 = atoms.iter().map(|a| a.prob * cert.eval(&(a.matrix.as_matrix() * &x))).sum();
            prop_assert!(next <= gamma * gamma * v + 1e-10 * (1.0 + v));
        }
    }
}

#[test]
fn montecarlo_matches_exact_for_point_mass() {
    let a = SquareMatrix::from_rows(&[vec![0.6, 0.3], vec![0.1, 0.8]]).unwrap();
    let d = MatrixDistribution::point_mass(a);
    let exact = p_radius_exact(&d, 2).unwrap().value;
    let mc = p_radius_montecarlo(&d, 2, 200, 100, 1).unwrap().value;
    assert_relative_eq!(mc, exact, max_relative = 0.01);
}

#[test]
fn montecarlo_is_identical_across_thread_counts() {
    let d = jsrlab::dist::example_interval_2x2();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| p_radius_montecarlo(&d, 2, 20, 5000, 3).unwrap().value)
    };
    let one = run(1);
    assert_eq!(one.to_bits(), run(4).to_bits());
    assert_eq!(one.to_bits(), run(3).to_bits());
}
