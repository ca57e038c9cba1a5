//! The backward Cauchy problem `𝒜u + Yu = f` on `(0, T) × R^N`, `u(T, ·) = g`,
//! solved through the representation
//! `u(t,x) = ∫ p(t,x;T,y) g(y) dy − ∫ₜᵀ ∫ p(t,x;s,y) f(s,y) dy ds`.
//!
//! Spatial integrals use Gauss–Hermite under `N(e^{(s−t)B}x, (μ+ε)C(s−t))`, which
//! dominates the decay of `p`. The time integral uses Gauss–Legendre in `√(s−t)`.

use std::sync::Arc;

use serde::Serialize;

use crate::config::Model;
use crate::density::{SourceDensity, SpatialRule};
use crate::error::{KolmoError, Result};
use crate::expr::Expr;
use crate::linalg::sym_eig_range;
use crate::quadrature::{gauss_legendre_unit, pairwise_sum};
use crate::verify::loglog_slope;

pub type Terminal = Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>;
pub type Source = Arc<dyn Fn(f64, &[f64]) -> Result<f64> + Send + Sync>;

#[derive(Clone)]
pub struct CauchyProblem {
    pub model: Model,
    pub t_end: f64,
    /// `g`; `None` means `g ≡ 0`.
    pub terminal: Option<Terminal>,
    /// `f`; `None` means `f ≡ 0`.
    pub source: Option<Source>,
    /// `C` in `|f| + |g| ≤ C e^{C|x|²}`.
    pub growth_c: f64,
}

impl CauchyProblem {
    pub fn new(model: &Model, t_end: f64) -> Self {
        CauchyProblem {
            growth_c: model.growth_c.unwrap_or(0.0),
            model: model.clone(),
            t_end,
            terminal: None,
            source: None,
        }
    }

    pub fn with_terminal(
        mut self,
        g: impl Fn(&[f64]) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        self.terminal = Some(Arc::new(g));
        self
    }

    pub fn with_source(
        mut self,
        f: impl Fn(f64, &[f64]) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        self.source = Some(Arc::new(f));
        self
    }

    /// Data given as expressions in `x1..xN` (and `t` for `f`).
    pub fn from_exprs(model: &Model, t_end: f64, g: Option<&str>, f: Option<&str>) -> Result<Self> {
        let n = model.n();
        let mut cp = CauchyProblem::new(model, t_end);
        for src in g.iter().chain(f.iter()) {
            let e = Expr::parse(src)?;
            if e.spatial_arity() > n {
                return Err(KolmoError::InvalidInput(format!(
                    "`{src}` references x{} but N = {n}",
                    e.spatial_arity()
                )));
            }
        }
        if let Some(g) = g {
            let e = Expr::parse(g)?;
            if e.uses_t() {
                return Err(KolmoError::InvalidInput(format!(
                    "terminal data `{g}` must not depend on t"
                )));
            }
            cp = cp.with_terminal(move |y| Ok(e.eval(t_end, y)?));
        }
        if let Some(f) = f {
            let e = Expr::parse(f)?;
            cp = cp.with_source(move |s, y| Ok(e.eval(s, y)?));
        }
        Ok(cp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CauchyOptions {
    /// Gauss–Hermite nodes per dimension.
    pub space_order: usize,
    /// Gauss–Legendre nodes in `√(s − t)` for the source term.
    pub time_nodes: usize,
}

impl Default for CauchyOptions {
    fn default() -> Self {
        CauchyOptions {
            space_order: 20,
            time_nodes: 16,
        }
    }
}

/// `2 C λ_max((μ+ε) C(T−t))`, required to be below 1.
pub fn growth_check(model: &Model, growth_c: f64, dt: f64) -> Result<f64> {
    let cov = model.drift.cov_identity(dt)? * (model.mu() + model.epsilon());
    let value = 2.0 * growth_c * sym_eig_range(&cov).1;
    if value >= 1.0 {
        return Err(KolmoError::GrowthHorizon { value });
    }
    Ok(value)
}

/// `u(t, x)`.
pub fn solve(cp: &CauchyProblem, t: f64, x: &[f64], opts: &CauchyOptions) -> Result<f64> {
    growth_check(&cp.model, cp.growth_c, cp.t_end - t)?;
    let p = SourceDensity::build(&cp.model, t, x, cp.t_end)?;
    solve_with(cp, &p, opts)
}

/// `u` at the source of a prepared density, which must reach `T`.
pub fn solve_with(cp: &CauchyProblem, p: &SourceDensity, opts: &CauchyOptions) -> Result<f64> {
    let (t, x) = (p.t(), p.source());
    let model = &cp.model;
    let total = cp.t_end - t;
    growth_check(model, cp.growth_c, total)?;
    let scale = model.mu() + model.epsilon();
    let mut u = 0.0;
    if let Some(g) = &cp.terminal {
        let rule = SpatialRule::around_flow(model, t, x, cp.t_end, scale, opts.space_order)?;
        let ps = p.densities(cp.t_end, &rule.points)?;
        let terms = (0..rule.len())
            .map(|k| Ok(rule.weights[k] * ps[k] * g(rule.point(k))?))
            .collect::<Result<Vec<_>>>()?;
        u += pairwise_sum(&terms);
    }
    if let Some(f) = &cp.source {
        let time = gauss_legendre_unit(opts.time_nodes)?;
        let root = total.sqrt();
        let mut slices = Vec::with_capacity(time.len());
        for (v, w) in time.iter() {
            let r = v * root;
            let s = t + r * r;
            let rule = SpatialRule::around_flow(model, t, x, s, scale, opts.space_order)?;
            let ps = p.densities(s, &rule.points)?;
            let terms = (0..rule.len())
                .map(|k| Ok(rule.weights[k] * ps[k] * f(s, rule.point(k))?))
                .collect::<Result<Vec<_>>>()?;
            slices.push(2.0 * r * root * w * pairwise_sum(&terms));
        }
        u -= pairwise_sum(&slices);
    }
    Ok(u)
}

/// Deviations `|u(T − dt, y) − g(y)|` along a sequence of `dt`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityReport {
    pub dts: Vec<f64>,
    pub deviations: Vec<f64>,
    /// Log–log slope of deviation against `dt`; `None` when some deviation is zero.
    pub order: Option<f64>,
    /// Deviations do not increase as `dt` decreases.
    pub monotone: bool,
}

pub fn terminal_continuity_check(
    cp: &CauchyProblem,
    y: &[f64],
    dts: &[f64],
    opts: &CauchyOptions,
) -> Result<ContinuityReport> {
    let g = cp.terminal.as_ref().ok_or_else(|| {
        KolmoError::InvalidInput("terminal continuity needs terminal data".into())
    })?;
    if dts.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(KolmoError::InvalidInput(
            "dt sequence must be strictly decreasing".into(),
        ));
    }
    let gy = g(y)?;
    let mut deviations = Vec::with_capacity(dts.len());
    for &dt in dts {
        let p = SourceDensity::build(&cp.model, cp.t_end - dt, y, cp.t_end)?;
        deviations.push((solve_with(cp, &p, opts)? - gy).abs());
    }
    let order = deviations
        .iter()
        .all(|d| *d > 0.0)
        .then(|| loglog_slope(dts, &deviations))
        .flatten();
    Ok(ContinuityReport {
        dts: dts.to_vec(),
        monotone: deviations.windows(2).all(|w| w[1] <= w[0]),
        deviations,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langevin(a2: &str) -> Model {
        Model::from_json(&format!(
            r#"{{"N": 2, "d": 1, "B": [0, 0, 1, 0], "T_bar": 1, "mu": 2, "alpha": 1,
            "coefficients": {{"a2": [["{a2}"]]}}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn growth_check_rejects_long_horizons() {
        let m = langevin("1");
        assert!(growth_check(&m, 0.1, 0.5).is_ok());
        assert!(matches!(
            growth_check(&m, 10.0, 1.0),
            Err(KolmoError::GrowthHorizon { .. })
        ));
    }

    #[test]
    fn quadratic_terminal_data_gives_second_moment() {
        // E[X_1²] = x_1² + a·dt for constant a.
        let m = langevin("1.5");
        let cp = CauchyProblem::from_exprs(&m, 1.0, Some("x1^2"), None).unwrap();
        let u = solve(&cp, 0.6, &[0.3, 0.1], &CauchyOptions::default()).unwrap();
        assert!((u - (0.09 + 1.5 * 0.4)).abs() < 1e-10, "{u}");
    }

    #[test]
    fn time_dependent_data_is_rejected_as_terminal() {
        let m = langevin("1");
        assert!(CauchyProblem::from_exprs(&m, 1.0, Some("t*x1"), None).is_err());
        assert!(CauchyProblem::from_exprs(&m, 1.0, Some("x3"), None).is_err());
    }
}
