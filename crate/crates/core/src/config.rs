//! Quadrature knobs and the JSON model file.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientField;
use crate::error::{KolmoError, Result};
use crate::kernel::{Drift, DEFAULT_MIN_DT};
use crate::structure::DEFAULT_RANK_TOL;

/// Spatial cubature for Gaussian-weighted integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceRule {
    /// Tensor Gauss–Hermite with this many nodes per dimension.
    GaussHermite(usize),
    /// Smolyak combination of Gauss–Hermite rules at this level.
    SparseGrid(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Midpoint panels for covariances of time-rough coefficients.
    pub time_panels: usize,
    pub space_rule: SpaceRule,
    /// Overrides the model's Hölder exponent in the endpoint substitution.
    pub alpha: Option<f64>,
    pub series_tol: f64,
    pub max_terms: usize,
    /// Discretization tolerance added to `series_tol` to form the composed tolerance.
    pub quad_tol: f64,
    /// Nodes of the singular time rule in every Volterra time integral.
    pub time_nodes: usize,
    /// Time levels on which iterates are stored.
    pub levels: usize,
    /// Chebyshev points per dimension on each level.
    pub cheb_points: usize,
    /// Half-width of the level boxes in similarity coordinates.
    pub box_half_width: f64,
    /// Inflation of frozen covariances used as cubature envelopes and as the
    /// normalizing envelope of stored iterates.
    pub envelope_scale: f64,
    /// Gauss–Legendre nodes for covariances of time-smooth coefficients.
    pub cov_nodes: usize,
    /// `ε = epsilon_factor · μ` in `Γ^{μ+ε}` comparisons.
    pub epsilon_factor: f64,
    pub min_dt: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            time_panels: 256,
            space_rule: SpaceRule::GaussHermite(12),
            alpha: None,
            series_tol: 1e-4,
            max_terms: 8,
            quad_tol: 4e-4,
            time_nodes: 12,
            levels: 12,
            cheb_points: 21,
            box_half_width: 5.0,
            envelope_scale: 1.25,
            cov_nodes: 12,
            epsilon_factor: 0.1,
            min_dt: DEFAULT_MIN_DT,
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KolmoError::Config(m));
        if self.time_panels < 2 {
            return bad(format!(
                "time_panels must be >= 2, got {}",
                self.time_panels
            ));
        }
        if !(self.series_tol > 0.0) {
            return bad(format!(
                "series_tol must be positive, got {}",
                self.series_tol
            ));
        }
        if self.max_terms < 1 {
            return bad("max_terms must be >= 1".into());
        }
        if !(self.quad_tol >= 0.0) {
            return bad(format!(
                "quad_tol must be non-negative, got {}",
                self.quad_tol
            ));
        }
        match self.space_rule {
            SpaceRule::GaussHermite(n) if !(1..=64).contains(&n) => {
                return bad(format!("gauss_hermite order must lie in 1..=64, got {n}"))
            }
            SpaceRule::SparseGrid(l) if !(1..=12).contains(&l) => {
                return bad(format!("sparse_grid level must lie in 1..=12, got {l}"))
            }
            _ => {}
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return bad(format!("alpha must lie in (0, 1], got {a}"));
            }
        }
        if self.time_nodes < 2
            || self.levels < 2
            || !(3..=64).contains(&self.cheb_points)
            || self.cov_nodes < 1
        {
            return bad("time_nodes, levels >= 2; cheb_points in 3..=64; cov_nodes >= 1".into());
        }
        if !(self.box_half_width > 0.0 && self.envelope_scale >= 1.0 && self.epsilon_factor > 0.0) {
            return bad(
                "box_half_width > 0, envelope_scale >= 1 and epsilon_factor > 0 required".into(),
            );
        }
        if !(self.min_dt > 0.0) {
            return bad(format!("min_dt must be positive, got {}", self.min_dt));
        }
        Ok(())
    }

    /// `series_tol + quad_tol`.
    pub fn composed_tol(&self) -> f64 {
        self.series_tol + self.quad_tol
    }
}

/// A coefficient entry: an expression or a bare number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExprSource {
    Number(f64),
    Text(String),
}

impl ExprSource {
    fn text(&self) -> String {
        match self {
            ExprSource::Number(v) if *v < 0.0 => format!("-{:?}", -v),
            ExprSource::Number(v) => format!("{v:?}"),
            ExprSource::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSources {
    pub a2: Vec<Vec<ExprSource>>,
    #[serde(default)]
    pub a1: Vec<ExprSource>,
    #[serde(default = "zero_source")]
    pub a0: ExprSource,
}

fn zero_source() -> ExprSource {
    ExprSource::Number(0.0)
}

/// The on-disk model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfigFile {
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    /// Row-major `N × N`.
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    #[serde(rename = "T_bar")]
    pub t_bar: f64,
    pub mu: f64,
    pub alpha: f64,
    pub coefficients: CoefficientSources,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(rename = "growth_C", default)]
    pub growth_c: Option<f64>,
    #[serde(default)]
    pub holder_norms: Option<Vec<f64>>,
    #[serde(default)]
    pub rank_tol: Option<f64>,
}

/// A validated operator: drift, coefficients and numerical settings.
#[derive(Debug, Clone)]
pub struct Model {
    pub drift: Drift,
    pub coeffs: CoefficientField,
    pub quad: QuadratureConfig,
    pub growth_c: Option<f64>,
}

impl Model {
    pub fn new(drift: Drift, coeffs: CoefficientField, quad: QuadratureConfig) -> Result<Self> {
        quad.validate()?;
        if coeffs.n != drift.n() || coeffs.d != drift.d() {
            return Err(KolmoError::Config(format!(
                "coefficients are for N = {}, d = {} but B gives N = {}, d = {}",
                coeffs.n,
                coeffs.d,
                drift.n(),
                drift.d()
            )));
        }
        let drift = drift.with_min_dt(quad.min_dt);
        Ok(Model {
            drift,
            coeffs,
            quad,
            growth_c: None,
        })
    }

    pub fn from_file(cfg: &ModelConfigFile) -> Result<Self> {
        let n = cfg.n;
        if n == 0 || n > 10 {
            return Err(KolmoError::DimensionBudget(format!(
                "N = {n} outside the supported range 1..=10"
            )));
        }
        if cfg.b.len() != n * n {
            return Err(KolmoError::Config(format!(
                "B must have {} entries, got {}",
                n * n,
                cfg.b.len()
            )));
        }
        let b = DMatrix::from_row_slice(n, n, &cfg.b);
        let drift = Drift::new(&b, cfg.d, cfg.rank_tol.unwrap_or(DEFAULT_RANK_TOL))?;
        let c = &cfg.coefficients;
        let a2: Vec<Vec<String>> =
            c.a2.iter()
                .map(|row| row.iter().map(ExprSource::text).collect())
                .collect();
        let a1: Vec<String> = c.a1.iter().map(ExprSource::text).collect();
        let mut coeffs = CoefficientField::from_sources(
            n,
            cfg.d,
            &a2,
            &a1,
            &c.a0.text(),
            cfg.mu,
            cfg.alpha,
            cfg.t_bar,
        )?;
        coeffs.holder_norms = cfg.holder_norms.clone();
        let mut model = Model::new(drift, coeffs, cfg.quadrature.clone())?;
        if let Some(g) = cfg.growth_c {
            if !(g >= 0.0) {
                return Err(KolmoError::Config(format!(
                    "growth_C must be non-negative, got {g}"
                )));
            }
        }
        model.growth_c = cfg.growth_c;
        Ok(model)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfigFile = serde_json::from_str(text)?;
        Self::from_file(&cfg)
    }

    pub fn n(&self) -> usize {
        self.drift.n()
    }

    pub fn d(&self) -> usize {
        self.drift.d()
    }

    pub fn mu(&self) -> f64 {
        self.coeffs.mu
    }

    /// Hölder exponent driving the singular time substitution.
    pub fn alpha(&self) -> f64 {
        self.quad.alpha.unwrap_or(self.coeffs.alpha)
    }

    /// `ε` used in `Γ^{μ+ε}` comparisons.
    pub fn epsilon(&self) -> f64 {
        self.quad.epsilon_factor * self.mu()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LANGEVIN: &str = r#"{
        "N": 2, "d": 1, "B": [0, 0, 1, 0], "T_bar": 1, "mu": 2, "alpha": 1,
        "coefficients": {"a2": [["1 + 0.25*sin(x2)"]], "a1": ["0"], "a0": 0},
        "quadrature": {"series_tol": 1e-4},
        "growth_C": 0.1
    }"#;

    #[test]
    fn parses_model_file() {
        let m = Model::from_json(LANGEVIN).unwrap();
        assert_eq!(m.n(), 2);
        assert_eq!(m.drift.structure().q, 4);
        assert_eq!(m.quad.max_terms, 8);
        assert_eq!(m.growth_c, Some(0.1));
    }

    #[test]
    fn rejects_bad_models() {
        let bad_b = LANGEVIN.replace("[0, 0, 1, 0]", "[0, 0, 1]");
        assert!(Model::from_json(&bad_b).unwrap_err().is_config());
        let bad_expr = LANGEVIN.replace("sin(x2)", "sinh(x2)");
        assert!(Model::from_json(&bad_expr).unwrap_err().is_config());
        let unknown = LANGEVIN.replace("\"series_tol\"", "\"seres_tol\"");
        assert!(Model::from_json(&unknown).is_err());
        let bad_tol = LANGEVIN.replace("1e-4", "-1");
        assert!(Model::from_json(&bad_tol).unwrap_err().is_config());
    }

    #[test]
    fn negative_numbers_become_expressions() {
        assert_eq!(ExprSource::Number(-0.5).text(), "-0.5");
        assert_eq!(ExprSource::Number(2.0).text(), "2.0");
    }
}
