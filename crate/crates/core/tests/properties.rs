//! Structural invariants over random inputs.

use kolmo::config::Model;
use kolmo::kernel::{covariance_frozen, gamma_delta, Drift};
use kolmo::linalg::sym_eig_range;
use kolmo::parametrix::parametrix_eval;
use kolmo::quadrature::gauss_hermite_normal;
use kolmo::structure::{block_decompose, kalman_rank, BlockStructure};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Non-increasing chains `d_0 ≥ … ≥ d_r ≥ 1` with `Σ d_j ≤ 8`.
fn chains() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=3, 0usize..=3, prop::collection::vec(0usize..=2, 3)).prop_map(|(d, r, drops)| {
        let mut dims = vec![d];
        for drop in drops.into_iter().take(r) {
            let last = *dims.last().unwrap();
            let next = last.saturating_sub(drop).max(1);
            if dims.iter().sum::<usize>() + next > 8 {
                break;
            }
            dims.push(next);
        }
        dims
    })
}

/// A drift in canonical form for the chain: sub-diagonal blocks `[I | R]`,
/// arbitrary entries on and above the block diagonal, zeros elsewhere.
fn canonical_drift(dims: &[usize], fill: &[f64]) -> DMatrix<f64> {
    let n: usize = dims.iter().sum();
    let starts: Vec<usize> = dims
        .iter()
        .scan(0, |acc, &d| {
            let s = *acc;
            *acc += d;
            Some(s)
        })
        .collect();
    let mut b = DMatrix::zeros(n, n);
    let mut k = 0;
    let mut next = || {
        k += 1;
        fill[k % fill.len()]
    };
    for h in 0..dims.len() {
        for c in 0..dims.len() {
            for i in 0..dims[h] {
                for j in 0..dims[c] {
                    let (row, col) = (starts[h] + i, starts[c] + j);
                    if c >= h {
                        b[(row, col)] = next();
                    } else if h == c + 1 {
                        b[(row, col)] = if i == j {
                            1.0
                        } else if j > i {
                            0.5 * next()
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
    b
}

fn langevin(a2: &str) -> Model {
    Model::from_json(&format!(
        r#"{{"N": 2, "d": 1, "B": [0, 0, 1, 0], "T_bar": 1, "mu": 2, "alpha": 1,
            "coefficients": {{"a2": [["{a2}"]]}}}}"#
    ))
    .unwrap()
}

/// `N = 4`, `d = 2`, `B_1 = I`, with a non-diagonal diffusion.
fn planar(a11: &str, a12: &str, a22: &str) -> Model {
    Model::from_json(&format!(
        r#"{{"N": 4, "d": 2, "B": [0,0,0,0, 0,0,0,0, 1,0,0,0, 0,1,0,0], "T_bar": 1, "mu": 2, "alpha": 1,
            "coefficients": {{"a2": [["{a11}", "{a12}"], ["{a12}", "{a22}"]]}}}}"#
    ))
    .unwrap()
}

fn times() -> impl Strategy<Value = (f64, f64)> {
    (0.0f64..0.8, 0.05f64..1.0).prop_map(|(t, frac)| (t, t + frac * (1.0 - t)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn canonical_chains_are_recovered(dims in chains(), fill in prop::collection::vec(-1.0f64..1.0, 16)) {
        let b = canonical_drift(&dims, &fill);
        let n = b.nrows();
        let s = block_decompose(&b, dims[0], 1e-10).unwrap();
        prop_assert_eq!(&s.dims, &dims);
        prop_assert_eq!(s.dims.iter().sum::<usize>(), n);
        prop_assert!(s.dims.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(s.q >= n);
        prop_assert_eq!(s.q == n, s.r() == 0);
        for c in [-1.0, 1e-3, 1e3] {
            prop_assert_eq!(kalman_rank(&(&b * c), dims[0], 1e-10).unwrap(), (n, true));
        }
    }

    #[test]
    fn quasi_norm_is_homogeneous(
        dims in chains(),
        fill in prop::collection::vec(-1.0f64..1.0, 16),
        x in prop::collection::vec(-10.0f64..10.0, 8),
        log_lambda in -7.0f64..7.0,
    ) {
        let b = canonical_drift(&dims, &fill);
        let s = BlockStructure::analyze(&b, dims[0], 1e-10).unwrap();
        let x = &x[..s.n];
        let lambda = log_lambda.exp();
        let scaled: Vec<f64> = s.dilation_diag(lambda).iter().zip(x).map(|(d, v)| d * v).collect();
        let (lhs, rhs) = (s.anisotropic_norm(&scaled), lambda * s.anisotropic_norm(x));
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(f64::MIN_POSITIVE));
        prop_assert!(s.norm_homogeneity_check(x, lambda));
    }

    #[test]
    fn frozen_covariance_is_sandwiched(
        amp in 0.0f64..0.45,
        k in prop::array::uniform3(-3.0f64..3.0),
        v in prop::array::uniform2(-2.0f64..2.0),
        (t, t_end) in times(),
        s_freeze in 0.0f64..1.0,
    ) {
        let model = langevin(&format!("1 + {amp:.6}*sin({:.6}*x1 + {:.6}*x2 + {:.6}*t)", k[0], k[1], k[2]));
        let mu = model.mu();
        let frozen = covariance_frozen(&model.drift, &model.coeffs, &model.quad, s_freeze, &v, t, t_end).unwrap().c;
        let base = model.drift.cov_identity(t_end - t).unwrap();
        let scale = sym_eig_range(&base).1;
        prop_assert!(sym_eig_range(&(&base * mu - &frozen)).0 >= -1e-10 * scale);
        prop_assert!(sym_eig_range(&(&frozen - &base / mu)).0 >= -1e-10 * scale);
    }

    #[test]
    fn parametrix_hessian_is_symmetric(
        amp in 0.0f64..0.2,
        off in -0.2f64..0.2,
        x in prop::array::uniform4(-1.0f64..1.0),
        u in prop::array::uniform4(-3.0f64..3.0),
        (t, t_end) in times(),
    ) {
        let model = planar(&format!("1 + {amp:.6}*sin(x3)"), &format!("{off:.6}*cos(x1 + x4)"), &format!("1 + {amp:.6}*tanh(x2)"));
        // Poles within a few standard deviations of the flow, where the value is representable.
        let dt = t_end - t;
        let flow = model.drift.exp(dt).unwrap() * DVector::from_column_slice(&x);
        let l = model.drift.cov_identity(dt).unwrap().cholesky().unwrap().l();
        let y = flow + l * DVector::from_column_slice(&u);
        let e = parametrix_eval(&model, t, &x, t_end, y.as_slice(), true).unwrap();
        prop_assert!(e.value > 0.0);
        prop_assert_eq!(e.hess[1], e.hess[2]);
    }

    #[test]
    fn gamma_depends_on_elapsed_time_and_relative_position(
        delta in 0.5f64..2.0,
        x in prop::array::uniform2(-1.0f64..1.0),
        y in prop::array::uniform2(-1.0f64..1.0),
        (i, j, k) in (0u32..800, 50u32..200, 0u32..400),
    ) {
        // Dyadic times keep T − t bit-identical under the shift.
        let (t, t_end, shift) = (i as f64 / 1024.0, (i + j) as f64 / 1024.0, k as f64 / 1024.0);
        let drift = Drift::new(&DMatrix::from_row_slice(2, 2, &[0., 0., 1., 0.]), 1, 1e-10).unwrap();
        let base = gamma_delta(&drift, delta, t, &x, t_end, &y).unwrap();
        let moved = gamma_delta(&drift, delta, t + shift, &x, t_end + shift, &y).unwrap();
        prop_assert!((moved - base).abs() <= 1e-12 * base);
        let flow = drift.exp(t_end - t).unwrap() * DVector::from_column_slice(&x);
        let rel = [y[0] - flow[0], y[1] - flow[1]];
        let origin = gamma_delta(&drift, delta, t, &[0.0, 0.0], t_end, &rel).unwrap();
        prop_assert!((origin - base).abs() <= 1e-12 * base);
    }

    #[test]
    fn gamma_satisfies_chapman_kolmogorov(
        delta in 0.5f64..2.0,
        x in prop::array::uniform2(-1.0f64..1.0),
        u in prop::array::uniform2(-3.0f64..3.0),
        (t, t_end) in times(),
        frac in 0.2f64..0.8,
    ) {
        let drift = Drift::new(&DMatrix::from_row_slice(2, 2, &[0., 0., 1., 0.]), 1, 1e-10).unwrap();
        let flow = drift.exp(t_end - t).unwrap() * DVector::from_column_slice(&x);
        let spread = (drift.cov_identity(t_end - t).unwrap() * delta).cholesky().unwrap().l();
        let y = flow + spread * DVector::from_column_slice(&u);
        let y = [y[0], y[1]];
        let s = t + frac * (t_end - t);
        // Gauss–Hermite under the normal with twice the covariance of the exact
        // η-marginal, so the integrand is a non-trivial Gaussian ratio.
        let e1 = drift.exp(s - t).unwrap();
        let e2_inv = drift.exp(-(t_end - s)).unwrap();
        let c1 = drift.cov_identity(s - t).unwrap() * delta;
        let c2 = &e2_inv * drift.cov_identity(t_end - s).unwrap() * delta * e2_inv.transpose();
        let (p1, p2) = (c1.clone().try_inverse().unwrap(), c2.clone().try_inverse().unwrap());
        let cov = (&p1 + &p2).try_inverse().unwrap();
        let mean = &cov * (&p1 * (&e1 * DVector::from_column_slice(&x)) + &p2 * (&e2_inv * DVector::from_column_slice(&y)));
        let wide = &cov * 2.0;
        let l = wide.clone().cholesky().unwrap().l();
        let det = wide.determinant();
        let wide_inv = wide.try_inverse().unwrap();
        let gh = gauss_hermite_normal(40).unwrap();
        let mut total = 0.0;
        for (u0, w0) in gh.iter() {
            for (u1, w1) in gh.iter() {
                let u = DVector::from_column_slice(&[u0, u1]);
                let eta = &mean + &l * &u;
                let q = (&eta - &mean).dot(&(&wide_inv * (&eta - &mean)));
                let pdf = (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
                let f = gamma_delta(&drift, delta, t, &x, s, eta.as_slice()).unwrap()
                    * gamma_delta(&drift, delta, s, eta.as_slice(), t_end, &y).unwrap();
                total += w0 * w1 * f / pdf;
            }
        }
        let direct = gamma_delta(&drift, delta, t, &x, t_end, &y).unwrap();
        prop_assert!((total - direct).abs() <= 1e-5 * direct, "{total} vs {direct}");
    }
}
