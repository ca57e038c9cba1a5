//! The fundamental solution `p(t,x;T,y)` as used by the rest of the library.
//!
//! Two exact reductions are applied before any series is built. A constant
//! zeroth-order coefficient `ā` is factored out, `p = e^{ā(T−t)} p_0`, and when
//! the remaining mismatch vanishes the parametrix is the fundamental solution,
//! which also lifts the dimension limit of the Levi iteration.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Model;
use crate::error::{KolmoError, Result};
use crate::kernel::{gamma_delta, CovPlan, FrozenKernel};
use crate::levi::{BackwardSeries, ForwardSeries, SeriesReport};
use crate::linalg::SpdFactor;
use crate::parametrix::{
    check_interval, eval_kernel, mismatch_vanishes, KernelCache, ParametrixEval,
};
use crate::quadrature::NormalCubature;

/// How a computed density compares with zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Positive,
    /// Negative but within `series_tol · Γ^μ`: quadrature noise.
    NoiseNegative,
    /// Below `−series_tol · Γ^μ`: the discretization is too coarse here.
    Negative,
}

/// `p` and its `x`-derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEval {
    pub value: f64,
    /// `∂_{x_i}p`, `i < d`.
    pub grad: Vec<f64>,
    /// `∂_{x_i x_j}p`, `i, j < d`, row-major.
    pub hess: Vec<f64>,
    /// `∂_{x_j}p`, `j < d + d_1`.
    pub extended_grad: Vec<f64>,
    pub sign: Sign,
}

/// `φ(t,x;T,y)` with the number of terms summed and the estimated tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiSeries {
    pub value: f64,
    pub k_used: usize,
    pub tail_bound: f64,
}

/// The model with a constant `a` removed, and `ā`.
fn reduce(model: &Model) -> (Model, f64) {
    match model.coeffs.split_constant_a0() {
        Some((coeffs, abar)) => {
            let mut m = model.clone();
            m.coeffs = coeffs;
            (m, abar)
        }
        None => (model.clone(), 0.0),
    }
}

fn classify(model: &Model, t: f64, x: &[f64], t_end: f64, y: &[f64], value: f64) -> Result<Sign> {
    if value >= 0.0 {
        return Ok(Sign::Positive);
    }
    let scale = gamma_delta(&model.drift, model.mu(), t, x, t_end, y)?;
    Ok(if value < -model.quad.series_tol * scale {
        Sign::Negative
    } else {
        Sign::NoiseNegative
    })
}

fn scaled(mut e: ParametrixEval, f: f64) -> ParametrixEval {
    e.value *= f;
    e.grad
        .iter_mut()
        .chain(e.hess.iter_mut())
        .chain(e.extended_grad.iter_mut())
        .for_each(|v| *v *= f);
    e
}

/// `p(·, ·; T, y)` for one pole, evaluable at any `t ∈ [t_min, T)`.
pub struct PoleDensity {
    original: Model,
    model: Model,
    abar: f64,
    t_end: f64,
    y: Vec<f64>,
    series: Option<BackwardSeries>,
    cache: KernelCache,
}

impl PoleDensity {
    pub fn build(model: &Model, t_min: f64, t_end: f64, y: &[f64]) -> Result<Self> {
        check_interval(model, t_min, t_end)?;
        if y.len() != model.n() {
            return Err(KolmoError::InvalidInput(format!(
                "y has length {}, expected {}",
                y.len(),
                model.n()
            )));
        }
        let (reduced, abar) = reduce(model);
        let series = if mismatch_vanishes(&reduced.coeffs) {
            None
        } else {
            Some(BackwardSeries::build(&reduced, t_min, t_end, y)?)
        };
        Ok(PoleDensity {
            original: model.clone(),
            model: reduced,
            abar,
            t_end,
            y: y.to_vec(),
            series,
            cache: KernelCache::default(),
        })
    }

    /// The model as given, including any constant zeroth-order term.
    #[allow(clippy::misnamed_getters)]
    pub fn model(&self) -> &Model {
        &self.original
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn pole(&self) -> &[f64] {
        &self.y
    }

    pub fn report(&self) -> SeriesReport {
        self.series
            .as_ref()
            .map_or_else(SeriesReport::vanishing, |s| s.report().clone())
    }

    /// True when the parametrix is already the fundamental solution.
    pub fn is_exact(&self) -> bool {
        self.series.is_none()
    }

    pub fn eval(&self, t: f64, x: &[f64], derivs: bool) -> Result<DensityEval> {
        if x.len() != self.model.n() {
            return Err(KolmoError::InvalidInput(format!(
                "x has length {}, expected {}",
                x.len(),
                self.model.n()
            )));
        }
        let e = match &self.series {
            Some(s) => s.eval(t, x, derivs)?,
            None => {
                check_interval(&self.model, t, self.t_end)?;
                self.model.drift.check_dt(self.t_end - t)?;
                let k = self
                    .cache
                    .get_or_build(&self.model, t, self.t_end, &self.y)?;
                eval_kernel(&self.model, &k, x, &self.y, derivs)
            }
        };
        let e = scaled(e, (self.abar * (self.t_end - t)).exp());
        Ok(DensityEval {
            sign: classify(&self.original, t, x, self.t_end, &self.y, e.value)?,
            value: e.value,
            grad: e.grad,
            hess: e.hess,
            extended_grad: e.extended_grad,
        })
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.eval(t, x, false)?.value)
    }

    /// `𝒜p(t, x)` from the value and derivatives in the first `d` directions.
    pub fn apply_operator(&self, t: f64, x: &[f64]) -> Result<(DensityEval, f64)> {
        let e = self.eval(t, x, true)?;
        Ok((e.clone(), apply_operator(&self.original, t, x, &e)?))
    }
}

/// `½ Σ a_ij ∂_ij u + Σ a_i ∂_i u + a u` at `(t, x)`.
pub fn apply_operator(model: &Model, t: f64, x: &[f64], e: &DensityEval) -> Result<f64> {
    let d = model.d();
    let c = &model.coeffs;
    let a = c.a2(t, x)?;
    let mut a1 = vec![0.0; d];
    c.a1_into(t, x, &mut a1)?;
    let mut v = c.a0(t, x)? * e.value;
    for i in 0..d {
        v += a1[i] * e.grad[i];
        for j in 0..d {
            v += 0.5 * a[(i, j)] * e.hess[i * d + j];
        }
    }
    Ok(v)
}

/// `p(t, x; ·, ·)` for one source, evaluable at any `T ∈ (t, t_max]`.
pub struct SourceDensity {
    original: Model,
    model: Model,
    abar: f64,
    t: f64,
    x: Vec<f64>,
    t_max: f64,
    series: Option<ForwardSeries>,
}

impl SourceDensity {
    pub fn build(model: &Model, t: f64, x: &[f64], t_max: f64) -> Result<Self> {
        check_interval(model, t, t_max)?;
        if x.len() != model.n() {
            return Err(KolmoError::InvalidInput(format!(
                "x has length {}, expected {}",
                x.len(),
                model.n()
            )));
        }
        let (reduced, abar) = reduce(model);
        let series = if mismatch_vanishes(&reduced.coeffs) {
            None
        } else {
            Some(ForwardSeries::build(&reduced, t, x, t_max)?)
        };
        Ok(SourceDensity {
            original: model.clone(),
            model: reduced,
            abar,
            t,
            x: x.to_vec(),
            t_max,
            series,
        })
    }

    /// The model as given, including any constant zeroth-order term.
    #[allow(clippy::misnamed_getters)]
    pub fn model(&self) -> &Model {
        &self.original
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn source(&self) -> &[f64] {
        &self.x
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn report(&self) -> SeriesReport {
        self.series
            .as_ref()
            .map_or_else(SeriesReport::vanishing, |s| s.report().clone())
    }

    pub fn density(&self, t_end: f64, y: &[f64]) -> Result<f64> {
        Ok(self.densities(t_end, y)?[0])
    }

    /// `p(t, x; T, y)` for every `y` in the row-major list `ys`.
    pub fn densities(&self, t_end: f64, ys: &[f64]) -> Result<Vec<f64>> {
        let n = self.model.n();
        let mut out = match &self.series {
            Some(s) => s.densities(t_end, ys)?,
            None => {
                if ys.is_empty() || !ys.len().is_multiple_of(n) {
                    return Err(KolmoError::InvalidInput(format!(
                        "point list of length {} is not a nonempty multiple of {n}",
                        ys.len()
                    )));
                }
                if !(t_end > self.t && t_end <= self.t_max * (1.0 + 1e-12)) {
                    return Err(KolmoError::InvalidInput(format!(
                        "T = {t_end} outside the built range ({}, {}]",
                        self.t, self.t_max
                    )));
                }
                let dt = t_end - self.t;
                self.model.drift.check_dt(dt)?;
                let m = &self.model;
                let plan = CovPlan::new(&m.drift, &m.coeffs, &m.quad, t_end, self.t, t_end)?;
                let (fwd, back) = (m.drift.exp(dt)?, m.drift.exp(-dt)?);
                ys.par_chunks(n)
                    .map(|y| {
                        let k = FrozenKernel::from_parts(
                            plan.eval(&m.coeffs, y)?,
                            fwd.clone(),
                            back.clone(),
                            m.drift.trace(),
                            dt,
                        )?;
                        Ok(k.value(&self.x, y))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let f = (self.abar * (t_end - self.t)).exp();
        out.iter_mut().for_each(|v| *v *= f);
        Ok(out)
    }
}

/// `p(t,x;T,y)` with `x`-derivatives, building a series for this pole.
pub fn fundamental_solution(
    model: &Model,
    t: f64,
    x: &[f64],
    t_end: f64,
    y: &[f64],
) -> Result<DensityEval> {
    PoleDensity::build(model, t, t_end, y)?.eval(t, x, true)
}

/// `φ(t,x;T,y) = Σ_k φ_k` for the model as given (no reduction).
pub fn phi_series(model: &Model, t: f64, x: &[f64], t_end: f64, y: &[f64]) -> Result<PhiSeries> {
    let s = BackwardSeries::build(model, t, t_end, y)?;
    let r = s.report();
    Ok(PhiSeries {
        value: s.phi(t, x)?,
        k_used: r.truncation_k,
        tail_bound: r.est_tail,
    })
}

/// `Φ(t,x;T,y)` with `x`-derivatives, for the model as given.
pub fn big_phi(model: &Model, t: f64, x: &[f64], t_end: f64, y: &[f64]) -> Result<ParametrixEval> {
    BackwardSeries::build(model, t, t_end, y)?.big_phi(t, x, true)
}

/// Cubature for `∫ h(y) dy` built on the Gaussian `N(e^{(T−t)B}x, scale · C(T−t))`:
/// `∫ h ≈ Σ_k weights[k] · h(points[k])`.
#[derive(Debug, Clone)]
pub struct SpatialRule {
    pub dim: usize,
    /// Row-major node list.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SpatialRule {
    pub fn around_flow(
        model: &Model,
        t: f64,
        x: &[f64],
        t_end: f64,
        scale: f64,
        order: usize,
    ) -> Result<Self> {
        let dt = t_end - t;
        let mean = model.drift.exp(dt)? * DVector::from_column_slice(x);
        let cov = model.drift.cov_identity(dt)? * scale;
        Self::gaussian(mean.as_slice(), &cov, order)
    }

    /// Built on the product of `N(e^{(s−t)B}x, scale · C(s−t))` and
    /// `N(e^{−(T−s)B}y, scale · e^{−(T−s)B} C(T−s) e^{−(T−s)B*})`, the two
    /// Gaussians bounding `η ↦ p(t,x;s,η) p(s,η;T,y)`.
    #[allow(clippy::too_many_arguments)]
    pub fn bridge(
        model: &Model,
        t: f64,
        x: &[f64],
        s: f64,
        t_end: f64,
        y: &[f64],
        scale: f64,
        order: usize,
    ) -> Result<Self> {
        let drift = &model.drift;
        let (a, b) = (s - t, t_end - s);
        let mean_a = drift.exp(a)? * DVector::from_column_slice(x);
        let prec_a = SpdFactor::new(&(drift.cov_identity(a)? * scale), "bridge envelope")?.inv;
        let back = drift.exp(-b)?;
        let mean_b = &back * DVector::from_column_slice(y);
        let cov_b = &back * drift.cov_identity(b)? * back.transpose() * scale;
        let prec_b = SpdFactor::new(&cov_b, "bridge envelope")?.inv;
        let prec = &prec_a + &prec_b;
        let mut cov = SpdFactor::new(&prec, "bridge precision")?.inv;
        crate::linalg::symmetrize(&mut cov);
        let mean = &cov * (&prec_a * mean_a + &prec_b * mean_b);
        Self::gaussian(mean.as_slice(), &cov, order)
    }

    pub fn gaussian(mean: &[f64], cov: &DMatrix<f64>, order: usize) -> Result<Self> {
        let n = mean.len();
        let f = SpdFactor::new(cov, "spatial envelope")?;
        let base = NormalCubature::new(n, order)?;
        let log_scale = 0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + f.logdet);
        let mut points = Vec::with_capacity(base.len() * n);
        let mut weights = Vec::with_capacity(base.len());
        for k in 0..base.len() {
            let xi = DVector::from_column_slice(base.point(k));
            let y = &f.l * &xi;
            points.extend((0..n).map(|i| mean[i] + y[i]));
            weights.push(base.weights[k] * (log_scale + 0.5 * xi.norm_squared()).exp());
        }
        Ok(SpatialRule {
            dim: n,
            points,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::pairwise_sum;

    fn model(a2: &str, a0: &str) -> Model {
        Model::from_json(&format!(
            r#"{{"N": 2, "d": 1, "B": [0, 0, 1, 0], "T_bar": 1, "mu": 2, "alpha": 1,
            "coefficients": {{"a2": [["{a2}"]], "a0": "{a0}"}}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn constant_zeroth_order_term_factors_out() {
        let m = model("1.5", "0.5");
        let p = PoleDensity::build(&m, 0.0, 1.0, &[0.2, 0.1]).unwrap();
        let e = p.eval(0.25, &[0.1, -0.3], true).unwrap();
        let g = gamma_delta(&m.drift, 1.5, 0.25, &[0.1, -0.3], 1.0, &[0.2, 0.1]).unwrap();
        assert!((e.value - (0.375f64).exp() * g).abs() < 1e-14 * e.value);
        assert_eq!(e.sign, Sign::Positive);
        assert!(p.series.is_none());
    }

    #[test]
    fn spatial_rule_integrates_gaussians() {
        let m = model("1", "0");
        let rule = SpatialRule::around_flow(&m, 0.0, &[0.3, -0.1], 0.5, 2.2, 20).unwrap();
        let vals: Vec<f64> = (0..rule.len())
            .map(|k| {
                rule.weights[k]
                    * gamma_delta(&m.drift, 1.0, 0.0, &[0.3, -0.1], 0.5, rule.point(k)).unwrap()
            })
            .collect();
        assert!((pairwise_sum(&vals) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn source_and_pole_agree_without_series() {
        let m = model("1 + 0.5*step(t - 0.5)", "0");
        let src = SourceDensity::build(&m, 0.0, &[0.1, 0.2], 1.0).unwrap();
        let pole = PoleDensity::build(&m, 0.0, 1.0, &[-0.4, 0.5]).unwrap();
        let a = src.density(1.0, &[-0.4, 0.5]).unwrap();
        let b = pole.value(0.0, &[0.1, 0.2]).unwrap();
        assert!((a - b).abs() < 1e-14 * b);
    }
}
