//! Consistency of the verification oracles themselves.

use kolmo::config::Model;
use kolmo::density::{PoleDensity, SourceDensity};
use kolmo::kernel::gamma_delta;
use kolmo::parametrix::parametrix_eval;
use kolmo::quadrature::gauss_hermite_normal;
use kolmo::verify::{check_chapman_kolmogorov, mc_oracle, McOptions};
use nalgebra::DVector;

fn langevin(a2: &str) -> Model {
    Model::from_json(&format!(
        r#"{{"N": 2, "d": 1, "B": [0, 0, 1, 0], "T_bar": 1, "mu": 2, "alpha": 1,
            "coefficients": {{"a2": [["{a2}"]]}}}}"#
    ))
    .unwrap()
}

#[test]
fn monte_carlo_distance_shrinks_with_more_paths() {
    let model = langevin("1.5");
    let x = [0.3, -0.2];
    let density = |ys: &[f64]| -> kolmo::Result<Vec<f64>> {
        ys.chunks_exact(2)
            .map(|y| gamma_delta(&model.drift, 1.5, 0.0, &x, 1.0, y))
            .collect()
    };
    let run = |paths| {
        let opts = McOptions {
            paths,
            steps: 50,
            seed: 3,
            ..McOptions::default()
        };
        mc_oracle(&model, 0.0, &x, 1.0, &opts, &density).unwrap().l1
    };
    let (small, large) = (run(20_000), run(80_000));
    assert!(large < small, "{large} vs {small}");
}

#[test]
fn chapman_kolmogorov_check_detects_a_one_percent_error() {
    let model = langevin("1 + 0.25*sin(3*t)");
    let (x, y) = ([0.3, -0.2], [0.3, 0.5]);
    let (t, s, t_end) = (0.0, 0.45, 1.0);
    let left_density = SourceDensity::build(&model, t, &x, s).unwrap();
    let right_density = PoleDensity::build(&model, s, t_end, &y).unwrap();
    let left = |ys: &[f64]| left_density.densities(s, ys);
    let right = |eta: &[f64]| right_density.value(s, eta);
    let direct = PoleDensity::build(&model, t, t_end, &y)
        .unwrap()
        .value(t, &x)
        .unwrap();
    let tol = 3.0 * model.quad.composed_tol();
    let check = |d| {
        check_chapman_kolmogorov(&model, (t, &x), s, (t_end, &y), &left, &right, d, tol, 16)
            .unwrap()
    };
    assert!(check(direct).passed());
    assert!(!check(1.01 * direct).passed());
    assert!(!check(direct / 1.01).passed());
}

#[test]
fn parametrix_concentrates_at_the_pole() {
    // ∫ P(t,x;T,η) g(η) dη → g(y) as (t,x) → (T,y), with g(η) = tanh(η_1).
    let model = langevin("1 + 0.25*sin(x2)");
    let y = [0.3, 0.5];
    let (t, t_end) = (1.0 - 1e-4, 1.0);
    let dt = t_end - t;
    let mean = model.drift.exp(dt).unwrap() * DVector::from_column_slice(&y);
    let l = (model.drift.cov_identity(dt).unwrap() * 1.5)
        .cholesky()
        .unwrap()
        .l();
    let gh = gauss_hermite_normal(30).unwrap();
    let mut total = 0.0;
    for (u0, w0) in gh.iter() {
        for (u1, w1) in gh.iter() {
            let u = DVector::from_column_slice(&[u0, u1]);
            let z = &l * &u;
            let eta = &mean + &z;
            let normal =
                (-0.5 * u.norm_squared()).exp() / (2.0 * std::f64::consts::PI * l.determinant());
            let p = parametrix_eval(&model, t, &y, t_end, eta.as_slice(), false)
                .unwrap()
                .value;
            total += w0 * w1 * p * eta[0].tanh() / normal;
        }
    }
    assert!(
        (total - y[0].tanh()).abs() <= 1e-3,
        "{total} vs {}",
        y[0].tanh()
    );
}
