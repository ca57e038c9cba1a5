//! Identity checks and Gaussian-bound fits.

use nalgebra::DVector;
use rayon::prelude::*;

use super::{loglog_slope, Status, VerificationReport};
use crate::config::Model;
use crate::density::{PoleDensity, SpatialRule};
use crate::error::{KolmoError, Result};
use crate::kernel::{gamma_delta, Drift};
use crate::linalg::SpdFactor;
use crate::quadrature::pairwise_sum;

/// Batched `y ↦ p(t, x; s, y)` over a row-major point list.
pub type BatchDensity<'a> = &'a (dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync);
/// Pointwise space-time function.
pub type PointFn<'a> = &'a (dyn Fn(f64, &[f64]) -> Result<f64> + Sync);

/// `p(t,x;T,y)` against `∫ p(t,x;s,η) p(s,η;T,y) dη`, relative error within `tol`.
///
/// The cubature is Gauss–Hermite under [`SpatialRule::bridge`] at scale `μ+ε`.
#[allow(clippy::too_many_arguments)]
pub fn check_chapman_kolmogorov(
    model: &Model,
    (t, x): (f64, &[f64]),
    s: f64,
    (t_end, y): (f64, &[f64]),
    left: BatchDensity,
    right: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    direct: f64,
    tol: f64,
    order: usize,
) -> Result<VerificationReport> {
    if !(t < s && s < t_end) {
        return Err(KolmoError::InvalidInput(format!(
            "need t < s < T, got {t}, {s}, {t_end}"
        )));
    }
    let rule = SpatialRule::bridge(
        model,
        t,
        x,
        s,
        t_end,
        y,
        model.mu() + model.epsilon(),
        order,
    )?;
    let lv = left(&rule.points)?;
    let terms = (0..rule.len())
        .into_par_iter()
        .map(|k| Ok(rule.weights[k] * lv[k] * right(rule.point(k))?))
        .collect::<Result<Vec<_>>>()?;
    let integral = pairwise_sum(&terms);
    let err = (integral - direct).abs() / direct.abs();
    Ok(
        VerificationReport::new("chapman_kolmogorov", Status::from_bool(err <= tol), tol, rule.len())
            .with("direct", direct)
            .with("integral", integral)
            .with("relative_error", err)
            .note(format!("t = {t}, s = {s}, T = {t_end}; Gauss-Hermite order {order} per dimension on the bridge envelope")),
    )
}

/// `∫ p(t,x;T,y) dy` against `e^{ā(T−t)}`, relative error within `tol`.
pub fn check_mass(
    model: &Model,
    (t, x): (f64, &[f64]),
    t_end: f64,
    density: BatchDensity,
    abar: f64,
    tol: f64,
    order: usize,
) -> Result<VerificationReport> {
    let rule = SpatialRule::around_flow(model, t, x, t_end, model.mu() + model.epsilon(), order)?;
    let p = density(&rule.points)?;
    let terms: Vec<f64> = rule.weights.iter().zip(&p).map(|(w, v)| w * v).collect();
    let mass = pairwise_sum(&terms);
    let want = (abar * (t_end - t)).exp();
    let err = (mass - want).abs() / want;
    Ok(
        VerificationReport::new("mass", Status::from_bool(err <= tol), tol, rule.len())
            .with("mass", mass)
            .with("expected", want)
            .with("relative_error", err),
    )
}

/// `|u(s, e^{(s−t)B}x) − u(t,x) + ∫ₜˢ (𝒜u − f)(τ, e^{(τ−t)B}x) dτ|`, midpoint rule
/// on `panels` panels along the exact flow.
#[allow(clippy::too_many_arguments)]
pub fn residual_along_y(
    drift: &Drift,
    u: PointFn,
    au: PointFn,
    f: Option<PointFn>,
    t: f64,
    x: &[f64],
    s: f64,
    panels: usize,
) -> Result<f64> {
    if !(t < s) || panels == 0 {
        return Err(KolmoError::InvalidInput(format!(
            "need t < s and panels > 0, got t = {t}, s = {s}"
        )));
    }
    let xv = DVector::from_column_slice(x);
    let h = (s - t) / panels as f64;
    let integrand = (0..panels)
        .into_par_iter()
        .map(|k| {
            let tau = t + (k as f64 + 0.5) * h;
            let z = drift.exp(tau - t)? * &xv;
            let mut v = au(tau, z.as_slice())?;
            if let Some(f) = f {
                v -= f(tau, z.as_slice())?;
            }
            Ok(h * v)
        })
        .collect::<Result<Vec<_>>>()?;
    let end = drift.exp(s - t)? * &xv;
    Ok((u(s, end.as_slice())? - u(t, x)? + pairwise_sum(&integrand)).abs())
}

/// What a residual check needs beyond the operator data.
pub struct ResidualInputs<'a> {
    pub u: PointFn<'a>,
    pub au: PointFn<'a>,
    pub f: Option<PointFn<'a>>,
    pub panels: usize,
}

/// [`residual_along_y`] relative to `max(|u(t,x)|, |u(s, e^{(s−t)B}x)|)`.
pub fn check_residual(
    drift: &Drift,
    inputs: &ResidualInputs,
    t: f64,
    x: &[f64],
    s: f64,
    tol: f64,
) -> Result<VerificationReport> {
    let r = residual_along_y(drift, inputs.u, inputs.au, inputs.f, t, x, s, inputs.panels)?;
    let end = drift.exp(s - t)? * DVector::from_column_slice(x);
    let scale = (inputs.u)(t, x)?
        .abs()
        .max((inputs.u)(s, end.as_slice())?.abs());
    let rel = r / scale;
    Ok(VerificationReport::new(
        "strong_lie_residual",
        Status::from_bool(rel <= tol),
        tol,
        inputs.panels,
    )
    .with("residual", r)
    .with("scale", scale)
    .with("relative_residual", rel)
    .note(format!(
        "t = {t}, s = {s}, midpoint panels {}",
        inputs.panels
    )))
}

/// `(e^{tB})` block `(h, k)` behaves as `O(t^{h−k})`, and `B^n` has zero blocks
/// for `h > k + n`.
pub fn check_expm_block_orders(drift: &Drift) -> Result<VerificationReport> {
    let s = drift.structure();
    let r = s.r();
    let ts = [1e-2, 1e-3, 1e-4];
    let mut report = VerificationReport::new("expm_block_orders", Status::Pass, 10.0, ts.len());
    let mut worst = 1.0f64;
    let mut ok = true;
    for h in 1..=r {
        for k in 0..h {
            let n = (h - k) as i32;
            let mut ratios = Vec::new();
            for &t in &ts {
                let e = drift.exp(t)?;
                let block_max = s
                    .block_range(h)
                    .flat_map(|i| s.block_range(k).map(move |j| (i, j)))
                    .map(|(i, j)| e[(i, j)].abs())
                    .fold(0.0, f64::max);
                let ratio = block_max / t.powi(n);
                report
                    .measured
                    .insert(format!("ratio_{h}_{k}_t{t:e}"), ratio);
                ratios.push(ratio);
            }
            let (lo, hi) = ratios
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
            if !(lo > 0.0 && hi.is_finite()) {
                ok = false;
            } else {
                worst = worst.max(hi / lo);
            }
        }
    }
    ok &= worst < 10.0;
    let b = drift.b();
    let mut power = b.clone();
    let mut exact_zero = true;
    for n in 1..=r {
        for h in 0..=r {
            for k in 0..=r {
                if h > k + n {
                    let zero = s
                        .block_range(h)
                        .all(|i| s.block_range(k).all(|j| power[(i, j)] == 0.0));
                    exact_zero &= zero;
                }
            }
        }
        power = &power * b;
    }
    report.status = Status::from_bool(ok && exact_zero);
    Ok(report
        .with("max_ratio_spread", worst)
        .with("power_blocks_zero", if exact_zero { 1.0 } else { 0.0 }))
}

/// Evaluation grid for Gaussian-bound fits: times `T − t` and a whitened box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundGrid {
    /// Values of `T − t`, at least two.
    pub scales: Vec<f64>,
    /// Points per dimension in `ξ ∈ [−radius, radius]^N`, with
    /// `x = e^{−(T−t)B}(y − L ξ)` and `L Lᵀ = C(T−t)`.
    pub points: usize,
    pub radius: f64,
}

impl BoundGrid {
    pub fn refined(&self) -> Self {
        BoundGrid {
            points: 2 * self.points - 1,
            ..self.clone()
        }
    }
}

/// Tolerance class for exponent recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundLevel {
    /// Exact kernels: slopes within `±0.1`.
    Kernel,
    /// Levi-level quadrature noise: slopes within `±0.3`.
    Levi,
}

impl BoundLevel {
    fn slope_tol(self) -> f64 {
        match self {
            BoundLevel::Kernel => 0.1,
            BoundLevel::Levi => 0.3,
        }
    }
}

const LOWER_CANDIDATES: [f64; 6] = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0];

struct BoundFit {
    /// `max |∂^k p| / Γ^{μ+ε}` per scale, `k = 0, 1, 2`.
    sup: [Vec<f64>; 3],
    /// `min p / Γ^δ` over everything, per lower candidate.
    lower: Vec<f64>,
    evaluations: usize,
}

fn fit_bounds(p: &PoleDensity, grid: &BoundGrid) -> Result<BoundFit> {
    let model = p.model();
    let drift = &model.drift;
    let n = model.n();
    let t_end = p.t_end();
    let y = DVector::from_column_slice(p.pole());
    let upper = model.mu() + model.epsilon();
    let m = grid.points.max(2);
    let count = m.pow(n as u32);
    let mut sup: [Vec<f64>; 3] = Default::default();
    let mut lower = vec![f64::INFINITY; LOWER_CANDIDATES.len()];
    for &s in &grid.scales {
        let t = t_end - s;
        let l = SpdFactor::new(&drift.cov_identity(s)?, "bound grid")?.l;
        let back = drift.exp(-s)?;
        let rows = (0..count)
            .into_par_iter()
            .map(|mut idx| -> Result<[f64; 3 + LOWER_CANDIDATES.len()]> {
                let mut xi = DVector::zeros(n);
                for k in (0..n).rev() {
                    xi[k] = -grid.radius + 2.0 * grid.radius * (idx % m) as f64 / (m - 1) as f64;
                    idx /= m;
                }
                let x = &back * (&y - &l * xi);
                let e = p.eval(t, x.as_slice(), true)?;
                let g = gamma_delta(drift, upper, t, x.as_slice(), t_end, y.as_slice())?;
                let mut row = [0.0; 3 + LOWER_CANDIDATES.len()];
                row[0] = e.value.abs() / g;
                row[1] = e.grad.iter().map(|v| v.abs()).fold(0.0, f64::max) / g;
                row[2] = e.hess.iter().map(|v| v.abs()).fold(0.0, f64::max) / g;
                for (j, &delta) in LOWER_CANDIDATES.iter().enumerate() {
                    row[3 + j] =
                        e.value / gamma_delta(drift, delta, t, x.as_slice(), t_end, y.as_slice())?;
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        for k in 0..3 {
            sup[k].push(rows.iter().map(|r| r[k]).fold(0.0, f64::max));
        }
        for (j, lo) in lower.iter_mut().enumerate() {
            *lo = rows.iter().map(|r| r[3 + j]).fold(*lo, f64::min);
        }
    }
    Ok(BoundFit {
        sup,
        lower,
        evaluations: count * grid.scales.len(),
    })
}

/// Fits `p ≤ C Γ^{μ+ε}`, `|∂p| ≤ C (T−t)^{−1/2} Γ^{μ+ε}`, `|∂²p| ≤ C (T−t)^{−1} Γ^{μ+ε}`
/// and `c̄ Γ^{μ̄} ≤ p` on `grid` and on its 2× refinement.
///
/// Passes when the sup-ratio slopes against `T − t` are `0, −½, −1` within the
/// level's tolerance, every fitted constant moves by at most 20% under
/// refinement, and `c̄ > 0`.
pub fn check_gaussian_bounds(
    p: &PoleDensity,
    grid: &BoundGrid,
    level: BoundLevel,
) -> Result<VerificationReport> {
    if grid.scales.len() < 2 {
        return Err(KolmoError::InvalidInput("need at least two scales".into()));
    }
    let coarse = fit_bounds(p, grid)?;
    let fine = fit_bounds(p, &grid.refined())?;
    let tol = level.slope_tol();
    let mut report = VerificationReport::new(
        "gaussian_bounds",
        Status::Pass,
        tol,
        coarse.evaluations + fine.evaluations,
    );
    let mut ok = true;
    for (k, want) in [0.0, -0.5, -1.0].into_iter().enumerate() {
        let slope = loglog_slope(&grid.scales, &fine.sup[k]).unwrap_or(f64::NAN);
        ok &= (slope - want).abs() <= tol;
        let drift = coarse.sup[k]
            .iter()
            .zip(&fine.sup[k])
            .map(|(a, b)| (a - b).abs() / b)
            .fold(0.0, f64::max);
        ok &= drift <= 0.2;
        let scaled_c = grid
            .scales
            .iter()
            .zip(&fine.sup[k])
            .map(|(s, c)| c * s.powf(-want))
            .fold(0.0, f64::max);
        report = report
            .with(&format!("slope_d{k}"), slope)
            .with(&format!("C_d{k}"), scaled_c)
            .with(&format!("refinement_change_d{k}"), drift);
    }
    let (best, cbar) = coarse
        .lower
        .iter()
        .zip(&fine.lower)
        .enumerate()
        .map(|(j, (a, b))| (j, a.min(*b)))
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, v| if v.1 > acc.1 { v } else { acc },
        );
    let lower_change = (coarse.lower[best] - fine.lower[best]).abs() / fine.lower[best].abs();
    ok &= cbar > 0.0 && lower_change <= 0.2;
    report.status = Status::from_bool(ok);
    Ok(report
        .with("c_bar", cbar)
        .with("mu_bar", LOWER_CANDIDATES[best])
        .with("refinement_change_lower", lower_change)
        .note(format!(
            "scales T-t = {:?}; {}^N and {}^N whitened points in [-{r}, {r}]^N",
            grid.scales,
            grid.points,
            grid.refined().points,
            r = grid.radius
        )))
}
