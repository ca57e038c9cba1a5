//! Levi iteration against independent oracles.

use kolmo::config::Model;
use kolmo::density::{PoleDensity, SourceDensity};
use kolmo::kernel::gamma_delta;
use kolmo::levi::{BackwardSeries, ForwardSeries};
use kolmo::parametrix::parametrix_mismatch;
use kolmo::verify::{check_mass, loglog_slope};

/// A huge `series_tol` stops the iteration right after `φ_2`. The default grid
/// (21 Chebyshev points, GH12) is only good to a few percent for `φ_2` here, so
/// the comparison runs on a resolved one.
fn elliptic_second_term() -> Model {
    Model::from_json(
        r#"{"N": 1, "d": 1, "B": [0], "T_bar": 1, "mu": 2, "alpha": 1,
            "coefficients": {"a2": [["1 + 0.5*tanh(x1)"]]},
            "quadrature": {"series_tol": 1e9, "cheb_points": 41, "levels": 24,
                           "space_rule": {"gauss_hermite": 24}}}"#,
    )
    .unwrap()
}

fn langevin(a2: &str, alpha: f64, extra: &str) -> Model {
    Model::from_json(&format!(
        r#"{{"N": 2, "d": 1, "B": [0, 0, 1, 0], "T_bar": 1, "mu": 2, "alpha": {alpha},
            "coefficients": {{"a2": [["{a2}"]]{extra}}}}}"#
    ))
    .unwrap()
}

/// `φ_1(t,x;τ,η)` for `N = d = 1`, `B = 0`: `½(a(x) − a(η)) ∂_xx g(a(η)(τ−t), η − x)`.
fn phi1_elliptic(t: f64, x: f64, tau: f64, eta: f64) -> f64 {
    let a = |z: f64| 1.0 + 0.5 * z.tanh();
    let v = a(eta) * (tau - t);
    let z = eta - x;
    let g = (-0.5 * z * z / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    0.5 * (a(x) - a(eta)) * g * (z * z / (v * v) - 1.0 / v)
}

/// `φ_2 = ∫ₜᵀ ∫ φ_1(t,x;τ,η) φ_1(τ,η;T,y) dη dτ` by a dense midpoint sum on
/// 1000 × 1000 nodes. The substitution `τ = t + (T−t) sin²θ` removes both endpoint
/// singularities; the `η` window follows the Brownian bridge from `x` to `y`.
fn phi2_brute(t: f64, x: f64, t_end: f64, y: f64) -> f64 {
    let m = 1000;
    let dt = t_end - t;
    let h_theta = std::f64::consts::FRAC_PI_2 / m as f64;
    let mut total = 0.0;
    for i in 0..m {
        let theta = (i as f64 + 0.5) * h_theta;
        let tau = t + dt * theta.sin().powi(2);
        let jac = dt * 2.0 * theta.sin() * theta.cos();
        let center = x + (y - x) * (tau - t) / dt;
        let half = 14.0 * (1.5 * (tau - t) * (t_end - tau) / dt).sqrt();
        let h_eta = 2.0 * half / m as f64;
        let mut inner = 0.0;
        for k in 0..m {
            let eta = center - half + (k as f64 + 0.5) * h_eta;
            inner += phi1_elliptic(t, x, tau, eta) * phi1_elliptic(tau, eta, t_end, y);
        }
        total += jac * h_theta * inner * h_eta;
    }
    total
}

#[test]
fn second_term_matches_brute_force_in_the_elliptic_case() {
    let model = elliptic_second_term();
    let (y, t_end) = ([-0.3], 1.0);
    let series = BackwardSeries::build(&model, 0.0, t_end, &y).unwrap();
    assert_eq!(series.report().truncation_k, 2);
    for (t, x) in [(0.0, 0.2), (0.0, -0.6), (0.5, 0.1)] {
        let phi1 = parametrix_mismatch(&model, t, &[x], t_end, &y).unwrap();
        assert!((phi1 - phi1_elliptic(t, x, t_end, y[0])).abs() <= 1e-12 * phi1.abs().max(1e-300));
        let got = series.phi(t, &[x]).unwrap() - phi1;
        let want = phi2_brute(t, x, t_end, y[0]);
        assert!(
            (got - want).abs() <= 1e-3 * want.abs(),
            "t = {t}, x = {x}: {got} vs {want}"
        );
    }
}

#[test]
fn gradient_of_the_correction_scales_with_the_hoelder_exponent() {
    // |∂_{x_1}Φ| ≤ C (T−t)^{−(1−α)/2} Γ^{μ+ε}; sup ratios over a grid around the
    // backward flow of the pole, fitted over T − t ∈ [0.04, 0.5]. The coefficient is
    // exactly α-Hölder in x_1 at the pole, where the bound is attained.
    for (a2, alpha) in [
        ("1 + 0.25*min(abs(x1 - 0.3), 1)", 1.0),
        ("1 + 0.25*min(powb(x1 - 0.3, 0.5), 1)", 0.5),
    ] {
        let model = langevin(a2, alpha, "");
        let y = [0.3, 0.5];
        let series = BackwardSeries::build(&model, 0.4, 1.0, &y).unwrap();
        let gaps = [0.04, 0.08, 0.16, 0.32, 0.5];
        let mut sups = Vec::new();
        for &gap in &gaps {
            let t = 1.0 - gap;
            let back = model.drift.exp(-gap).unwrap();
            let cov = model.drift.cov_identity(gap).unwrap();
            let mut sup = 0.0f64;
            for i in -4..=4 {
                for j in -4..=4 {
                    let u = [
                        i as f64 * 0.6 * cov[(0, 0)].sqrt(),
                        j as f64 * 0.6 * cov[(1, 1)].sqrt(),
                    ];
                    let z = [y[0] - u[0], y[1] - u[1]];
                    let x = [
                        back[(0, 0)] * z[0] + back[(0, 1)] * z[1],
                        back[(1, 0)] * z[0] + back[(1, 1)] * z[1],
                    ];
                    let g = series.big_phi(t, &x, true).unwrap().grad[0];
                    let env =
                        gamma_delta(&model.drift, model.mu() + model.epsilon(), t, &x, 1.0, &y)
                            .unwrap();
                    sup = sup.max(g.abs() / env);
                }
            }
            sups.push(sup);
        }
        let slope = loglog_slope(&gaps, &sups).unwrap();
        let expected = -(1.0 - alpha) / 2.0;
        assert!(
            (slope - expected).abs() <= 0.15,
            "alpha {alpha}: slope {slope} vs {expected}, sups {sups:?}"
        );
    }
}

#[test]
fn forward_and_backward_formulations_agree() {
    let model = langevin("1 + 0.25*sin(x2)", 1.0, "");
    let (x, y) = ([0.3, -0.2], [0.3, 0.5]);
    let pole = BackwardSeries::build(&model, 0.0, 1.0, &y).unwrap();
    let source = ForwardSeries::build(&model, 0.0, &x, 1.0).unwrap();
    let back = pole.eval(0.0, &x, false).unwrap().value;
    let fwd = source.density(1.0, &y).unwrap();
    let tol = model.quad.composed_tol();
    assert!((back - fwd).abs() <= tol * back, "{back} vs {fwd}");
}

#[test]
fn constant_zeroth_order_term_matches_the_raw_series() {
    // The density layer factors ā out exactly; the raw series carries it in φ_1.
    let model = langevin("1 + 0.25*sin(x2)", 1.0, r#", "a0": "0.5""#);
    let x = [0.3, -0.2];
    let raw = ForwardSeries::build(&model, 0.0, &x, 1.0).unwrap();
    let dens = |ys: &[f64]| raw.densities(1.0, ys);
    let r = check_mass(&model, (0.0, &x), 1.0, &dens, 0.5, 1e-3, 20).unwrap();
    assert!(r.passed(), "{r:?}");

    let factored = SourceDensity::build(&model, 0.0, &x, 1.0).unwrap();
    let y = [0.3, 0.5];
    let a = factored.density(1.0, &y).unwrap();
    let b = raw.density(1.0, &y).unwrap();
    assert!((a - b).abs() <= 1e-3 * a, "{a} vs {b}");
    let pole = PoleDensity::build(&model, 0.0, 1.0, &y).unwrap();
    assert!((pole.value(0.0, &x).unwrap() - a).abs() <= 1e-3 * a);
}
