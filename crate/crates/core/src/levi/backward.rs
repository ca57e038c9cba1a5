//! Iterates with a fixed pole `(T, y)`.
//!
//! `φ_1` is always evaluated exactly; `Σ_{k≥2} φ_k` lives on a [`LevelGrid`]
//! indexed by `s = T − τ`, in frames centred at `e^{−sB}y`. For a level node
//! `(τ, η)` the inner integral runs over `τ' = τ + v s` and `η'` with weight
//! `N(η'; e^{v s B}η, κ C) · N(η'; c(s'), κ H_ref(s'))`, `s' = (1 − v)s`, where
//! the first factor follows the kernel of `φ_1(τ,η;τ',η')` and the second the
//! envelope of the stored iterate.

use rayon::prelude::*;

use super::grid::{Direction, Frame, Frames, LevelGrid, Stencil};
use super::small::{from_dmatrix, mat_vec, rescale, scale, Mn, Normal, SmallKernel, Vn, MAXN};
use super::{analytic_tail, check_dimension, fits_budget, tail_estimate, SeriesReport};
use crate::config::Model;
use crate::error::{KolmoError, Result};
use crate::kernel::{CovPlan, PoleKernel};
use crate::parametrix::{
    check_interval, eval_kernel, mismatch_factor, mismatch_vanishes, mismatch_with_kernel,
    KernelCache, ParametrixEval,
};
use crate::quadrature::{endpoint_rule, NormalCubature, Rule};

/// The Levi series for one pole, valid for `t ∈ [t_min, T)`.
pub struct BackwardSeries {
    model: Model,
    t_min: f64,
    t_end: f64,
    y: Vn,
    frames: Frames,
    time: Rule,
    space: NormalCubature,
    /// `Σ_{k≥2} φ_k`; `None` when the series stops at `φ_1`.
    rest: Option<LevelGrid>,
    cache: KernelCache,
    report: SeriesReport,
}

/// Data shared by all nodes of level `l` at inner time node `j`.
struct Slice {
    tau: f64,
    tau2: f64,
    dt1: f64,
    /// `s_l ω_j`.
    weight: f64,
    ef: Mn,
    eb: Mn,
    /// `C^{(τ',·)}(τ, τ')`.
    plan: CovPlan,
    frame2: Frame,
    env2: Normal,
    /// `(2πκ)^{N/2} / s'`, converting stored values to `φ_k / W_2`.
    gain: f64,
    stencil: Stencil,
    /// `P(τ', ·; T, y)`.
    target: SmallKernel,
}

struct Builder<'a> {
    model: &'a Model,
    t_end: f64,
    y: Vn,
    geometry: LevelGrid,
    level_frames: Vec<Frame>,
    slices: Vec<Vec<Slice>>,
    space: &'a NormalCubature,
}

fn pole_kernel(model: &Model, t: f64, t_end: f64, y: &[f64]) -> Result<SmallKernel> {
    let n = model.n();
    let dt = t_end - t;
    let plan = CovPlan::new(&model.drift, &model.coeffs, &model.quad, t_end, t, t_end)?;
    let mut c = [0.0; MAXN * MAXN];
    plan.eval_into(&model.coeffs, y, &mut c[..n * n])?;
    SmallKernel::new(
        n,
        &from_dmatrix(&model.drift.exp(-dt)?),
        &c,
        model.drift.trace(),
        dt,
    )
    .ok_or_else(|| not_pd("parametrix covariance"))
}

fn not_pd(context: &str) -> KolmoError {
    KolmoError::NotPositiveDefinite {
        context: context.into(),
    }
}

fn envelope_weight(z: &[f64], nu: f64) -> f64 {
    (-z.iter().map(|v| v * v).sum::<f64>() / (2.0 * nu)).exp()
}

impl<'a> Builder<'a> {
    fn slice(&self, frames: &Frames, time: &Rule, l: usize, j: usize) -> Result<Slice> {
        let model = self.model;
        let n = model.n();
        let drift = &model.drift;
        let s = self.geometry.s_level(l);
        let (v, w) = (time.nodes[j], time.weights[j]);
        let tau = self.t_end - s;
        let dt1 = v * s;
        let s2 = (1.0 - v) * s;
        let tau2 = self.t_end - s2;
        let frame2 = frames.frame(s2)?;
        Ok(Slice {
            tau,
            tau2,
            dt1,
            weight: s * w,
            ef: from_dmatrix(&drift.exp(dt1)?),
            eb: from_dmatrix(&drift.exp(-dt1)?),
            plan: CovPlan::new(drift, &model.coeffs, &model.quad, tau2, tau, tau2)?,
            env2: frame2.envelope(model.quad.envelope_scale)?,
            frame2,
            gain: (2.0 * std::f64::consts::PI * model.quad.envelope_scale).powf(n as f64 / 2.0)
                / s2,
            stencil: self.geometry.stencil(s2)?,
            target: pole_kernel(model, tau2, self.t_end, &self.y[..n])?,
        })
    }

    /// Calls `f(j, z', c, r1)` for every inner quadrature node of level node `(l, i)`;
    /// `Σ c · φ_k(τ', η') / W_2(η')` approximates `φ_{k+1}(τ, η)` and `r1` is the
    /// exact `φ_1(τ', η') / W_2(η')` when `exact` is set.
    fn visit<F: FnMut(usize, &Vn, f64, f64)>(
        &self,
        l: usize,
        i: usize,
        exact: bool,
        mut f: F,
    ) -> Result<()> {
        let model = self.model;
        let n = model.n();
        let coeffs = &model.coeffs;
        let kappa = model.quad.envelope_scale;
        let eta = self.level_frames[l - 1].point(&self.geometry.node_z(i));
        let mut c = [0.0; MAXN * MAXN];
        let mut w = [0.0; MAXN];
        let y = &self.y[..n];
        for (j, sl) in self.slices[l - 1].iter().enumerate() {
            let m1 = mat_vec(n, &sl.ef, &eta);
            sl.plan.eval_into(coeffs, &m1[..n], &mut c[..n * n])?;
            let w1 =
                Normal::new(n, m1, scale(n, &c, kappa)).ok_or_else(|| not_pd("inner envelope"))?;
            let (nc, log_k) = w1
                .product(&sl.env2)
                .ok_or_else(|| not_pd("inner product weight"))?;
            for q in 0..self.space.len() {
                let eta2 = nc.point(self.space.point(q));
                sl.plan.eval_into(coeffs, &eta2[..n], &mut c[..n * n])?;
                let k = SmallKernel::new(n, &sl.eb, &c, model.drift.trace(), sl.dt1)
                    .ok_or_else(|| not_pd("inner parametrix"))?;
                let (factor, val) =
                    mismatch_factor(coeffs, &k, sl.tau, &eta[..n], &eta2[..n], &mut w[..n])?;
                let coef = sl.weight
                    * self.space.weights[q]
                    * factor
                    * rescale(val, log_k - w1.log_pdf(&eta2[..n]));
                let r1 = if exact {
                    let phi1 = mismatch_with_kernel(
                        coeffs,
                        &sl.target,
                        sl.tau2,
                        &eta2[..n],
                        y,
                        &mut w[..n],
                    )?;
                    rescale(phi1, -sl.env2.log_pdf(&eta2[..n]))
                } else {
                    0.0
                };
                f(j, &sl.frame2.z_of(&eta2[..n]), coef, r1);
            }
        }
        Ok(())
    }
}

impl BackwardSeries {
    pub fn build(model: &Model, t_min: f64, t_end: f64, y: &[f64]) -> Result<Self> {
        check_dimension(model)?;
        check_interval(model, t_min, t_end)?;
        let n = model.n();
        if y.len() != n {
            return Err(KolmoError::InvalidInput(format!(
                "y has length {}, expected {n}",
                y.len()
            )));
        }
        let quad = &model.quad;
        let mu = model.mu();
        let nu = quad.envelope_scale;
        let alpha = model.alpha();
        let time = endpoint_rule(quad.time_nodes, alpha / 2.0)?;
        let space = NormalCubature::from_config(n, quad.space_rule)?;
        let mut ya = [0.0; MAXN];
        ya[..n].copy_from_slice(y);
        let frames = Frames::new(
            &model.drift,
            Direction::Backward,
            y,
            model.coeffs.a2(t_end, y)?,
        );
        let mut series = BackwardSeries {
            model: model.clone(),
            t_min,
            t_end,
            y: ya,
            frames,
            time,
            space,
            rest: None,
            cache: KernelCache::default(),
            report: SeriesReport::vanishing(),
        };
        if mismatch_vanishes(&model.coeffs) {
            return Ok(series);
        }
        let linear = !model.coeffs.class().time_smooth;
        let geometry = LevelGrid::new(
            n,
            quad.cheb_points,
            quad.box_half_width,
            (t_end - t_min).sqrt(),
            quad.levels,
            linear,
        );
        let levels = quad.levels;
        let level_frames = (1..=levels)
            .map(|l| series.frames.frame(geometry.s_level(l)))
            .collect::<Result<Vec<_>>>()?;
        let mut builder = Builder {
            model,
            t_end,
            y: ya,
            geometry,
            level_frames,
            slices: Vec::new(),
            space: &series.space,
        };
        let pairs: Vec<(usize, usize)> = (1..=levels)
            .flat_map(|l| (0..quad.time_nodes).map(move |j| (l, j)))
            .collect();
        let flat = pairs
            .par_iter()
            .map(|&(l, j)| builder.slice(&series.frames, &series.time, l, j))
            .collect::<Result<Vec<_>>>()?;
        let mut it = flat.into_iter();
        builder.slices = (0..levels)
            .map(|_| it.by_ref().take(quad.time_nodes).collect())
            .collect();

        let per = builder.geometry.per_level();
        let inner = quad.time_nodes * series.space.len();
        let store = fits_budget(levels * per * inner, n + 1);
        let eps_mu = mu + model.epsilon();
        let gamma_kernels = (1..=levels)
            .map(|l| {
                let s = builder.geometry.s_level(l);
                let c = from_dmatrix(&(model.drift.cov_identity(s)? * eps_mu));
                SmallKernel::new(
                    n,
                    &from_dmatrix(&model.drift.exp(-s)?),
                    &c,
                    model.drift.trace(),
                    s,
                )
                .ok_or_else(|| not_pd("comparison Gaussian"))
            })
            .collect::<Result<Vec<_>>>()?;
        let level_targets = (1..=levels)
            .map(|l| pole_kernel(model, t_end - builder.geometry.s_level(l), t_end, y))
            .collect::<Result<Vec<_>>>()?;

        struct NodeSetup {
            phi1: f64,
            phi2: f64,
            kappa: f64,
            entries: Vec<f64>,
        }
        let nodes: Vec<(usize, usize)> = (1..=levels)
            .flat_map(|l| (0..per).map(move |i| (l, i)))
            .collect();
        let setups = nodes
            .par_iter()
            .map(|&(l, i)| -> Result<NodeSetup> {
                let b = &builder;
                let s = b.geometry.s_level(l);
                let z = b.geometry.node_z(i);
                let eta = b.level_frames[l - 1].point(&z);
                let mut w = [0.0; MAXN];
                let tau = t_end - s;
                let phi1 = mismatch_with_kernel(
                    &model.coeffs,
                    &level_targets[l - 1],
                    tau,
                    &eta[..n],
                    y,
                    &mut w[..n],
                )?;
                let gamma = gamma_kernels[l - 1].value(&eta[..n], y);
                let kappa = if gamma > 0.0 {
                    phi1.abs() * s.powf(1.0 - alpha / 2.0) / gamma
                } else {
                    0.0
                };
                let mut phi2 = 0.0;
                let mut entries = Vec::with_capacity(if store { inner * (n + 1) } else { 0 });
                b.visit(l, i, true, |j, z2, coef, r1| {
                    phi2 += coef * r1;
                    if store {
                        entries.extend_from_slice(&z2[..n]);
                        entries.push(coef * b.slices[l - 1][j].gain);
                    }
                })?;
                Ok(NodeSetup {
                    phi1,
                    phi2,
                    kappa,
                    entries,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let to_psi = |l: usize, i: usize, phi: f64, b: &Builder| {
            let s = b.geometry.s_level(l);
            let z = b.geometry.node_z(i);
            s * b.level_frames[l - 1].det_l * phi / envelope_weight(&z[..n], nu)
        };
        let norm1 = nodes
            .iter()
            .zip(&setups)
            .map(|(&(l, i), st)| {
                (to_psi(l, i, st.phi1, &builder)
                    * envelope_weight(&builder.geometry.node_z(i)[..n], nu))
                .abs()
            })
            .fold(0.0, f64::max);
        let kappa = setups.iter().map(|s| s.kappa).fold(0.0, f64::max);
        let mut current = builder.geometry.clone();
        for (&(l, i), st) in nodes.iter().zip(&setups) {
            current.level_mut(l)[i] = to_psi(l, i, st.phi2, &builder);
        }
        let mut norms = vec![norm1, current.weighted_sup(nu)];
        let mut rest = current.clone();
        let tol = quad.series_tol;
        let tail = loop {
            if let Some(t) = tail_estimate(&norms) {
                if t <= tol {
                    break t;
                }
            }
            if norms.len() >= quad.max_terms {
                return Err(KolmoError::SeriesNotConverged {
                    tol,
                    max_terms: quad.max_terms,
                    partial: norms.iter().sum(),
                    tail: tail_estimate(&norms).unwrap_or(f64::INFINITY),
                });
            }
            let values = nodes
                .par_iter()
                .zip(&setups)
                .map(|(&(l, i), st)| -> Result<f64> {
                    let b = &builder;
                    let mut acc = 0.0;
                    if store {
                        let q_per = series.space.len();
                        for (e, rec) in st.entries.chunks_exact(n + 1).enumerate() {
                            let sl = &b.slices[l - 1][e / q_per];
                            acc += rec[n] * current.value(&sl.stencil, &rec[..n]);
                        }
                    } else {
                        b.visit(l, i, false, |j, z2, coef, _| {
                            let sl = &b.slices[l - 1][j];
                            let c = coef * sl.gain;
                            acc += c * current.value(&sl.stencil, &z2[..n]);
                        })?;
                    }
                    Ok(to_psi(l, i, acc, b))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut next = builder.geometry.clone();
            for (&(l, i), v) in nodes.iter().zip(values) {
                next.level_mut(l)[i] = v;
            }
            norms.push(next.weighted_sup(nu));
            rest.axpy(1.0, &next);
            current = next;
        };
        let k = norms.len();
        series.report = SeriesReport {
            truncation_k: k,
            est_tail: tail,
            term_norms: norms,
            kappa: Some(kappa),
            analytic_tail: Some(analytic_tail(kappa, alpha, t_end - t_min, k)),
            cached_entries: store,
        };
        series.rest = Some(rest);
        Ok(series)
    }

    pub fn report(&self) -> &SeriesReport {
        &self.report
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn pole(&self) -> &[f64] {
        &self.y[..self.model.n()]
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn check_point(&self, t: f64, x: &[f64]) -> Result<()> {
        if x.len() != self.model.n() {
            return Err(KolmoError::InvalidInput(format!(
                "x has length {}, expected {}",
                x.len(),
                self.model.n()
            )));
        }
        if !(t >= self.t_min - 1e-12 * self.t_end.abs().max(1.0) && t < self.t_end) {
            return Err(KolmoError::InvalidInput(format!(
                "t = {t} outside the built range [{}, {})",
                self.t_min, self.t_end
            )));
        }
        self.model.drift.check_dt(self.t_end - t)
    }

    /// `φ(t, x; T, y)` summed over the kept terms.
    pub fn phi(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.check_point(t, x)?;
        let n = self.model.n();
        let y = self.pole();
        let k = self.cache.get_or_build(&self.model, t, self.t_end, y)?;
        let mut w = vec![0.0; n];
        let mut v = mismatch_with_kernel(&self.model.coeffs, &*k, t, x, y, &mut w)?;
        if let Some(rest) = &self.rest {
            let s = self.t_end - t;
            let frame = self.frames.frame(s)?;
            let z = frame.z_of(x);
            v += rest.value(&rest.stencil(s)?, &z[..n])
                * envelope_weight(&z[..n], self.model.quad.envelope_scale)
                / (s * frame.det_l);
        }
        Ok(v)
    }

    /// `Φ(t, x; T, y)` with `x`-derivatives when `derivs` is set.
    pub fn big_phi(&self, t: f64, x: &[f64], derivs: bool) -> Result<ParametrixEval> {
        self.check_point(t, x)?;
        let model = &self.model;
        let n = model.n();
        let d = model.d();
        let ext = (d + model.drift.structure().dims.get(1).copied().unwrap_or(0)).min(n);
        let mut value = 0.0;
        let mut grad = [0.0; MAXN];
        let mut hess = [0.0; MAXN * MAXN];
        if self.rest.is_some() || !mismatch_vanishes(&model.coeffs) {
            self.accumulate(t, x, derivs, &mut value, &mut grad, &mut hess)?;
        }
        let mut out = ParametrixEval {
            value,
            grad: Vec::new(),
            hess: Vec::new(),
            extended_grad: Vec::new(),
        };
        if derivs {
            out.grad = grad[..d].to_vec();
            out.extended_grad = grad[..ext].to_vec();
            out.hess = (0..d * d).map(|k| hess[(k / d) * n + k % d]).collect();
        }
        Ok(out)
    }

    /// `∫ P(t,x;τ,η) φ(τ,η;T,y) dη` at one intermediate time.
    #[cfg(test)]
    fn pairing(&self, t: f64, x: &[f64], tau: f64) -> Result<f64> {
        let total = self.t_end - t;
        let v = (tau - t) / total;
        let one = Rule {
            nodes: vec![v],
            weights: vec![1.0 / total],
        };
        let probe = BackwardSeries {
            model: self.model.clone(),
            t_min: self.t_min,
            t_end: self.t_end,
            y: self.y,
            frames: self.frames.clone(),
            time: one,
            space: self.space.clone(),
            rest: self.rest.clone(),
            cache: KernelCache::default(),
            report: self.report.clone(),
        };
        let mut value = 0.0;
        probe.accumulate(
            t,
            x,
            false,
            &mut value,
            &mut [0.0; MAXN],
            &mut [0.0; MAXN * MAXN],
        )?;
        Ok(value)
    }

    fn accumulate(
        &self,
        t: f64,
        x: &[f64],
        derivs: bool,
        value: &mut f64,
        grad: &mut Vn,
        hess: &mut Mn,
    ) -> Result<()> {
        let model = &self.model;
        let n = model.n();
        let drift = &model.drift;
        let coeffs = &model.coeffs;
        let nu = model.quad.envelope_scale;
        let y = self.pole();
        let total = self.t_end - t;
        let gain_base = (2.0 * std::f64::consts::PI * nu).powf(n as f64 / 2.0);
        let mut c = [0.0; MAXN * MAXN];
        let mut w = [0.0; MAXN];
        let mut w2 = [0.0; MAXN];
        for (v, wt) in self.time.iter() {
            let dt = v * total;
            let s = (1.0 - v) * total;
            let tau = self.t_end - s;
            let ef = from_dmatrix(&drift.exp(dt)?);
            let eb = from_dmatrix(&drift.exp(-dt)?);
            let plan = CovPlan::new(drift, coeffs, &model.quad, tau, t, tau)?;
            let m1 = mat_vec(n, &ef, x);
            plan.eval_into(coeffs, &m1[..n], &mut c[..n * n])?;
            let w1 = Normal::new(n, m1, scale(n, &c, model.quad.envelope_scale))
                .ok_or_else(|| not_pd("outer envelope"))?;
            let frame = self.frames.frame(s)?;
            let env = frame.envelope(nu)?;
            let (nc, log_k) = w1
                .product(&env)
                .ok_or_else(|| not_pd("outer product weight"))?;
            let target = self.cache.get_or_build(model, tau, self.t_end, y)?;
            let stencil = match &self.rest {
                Some(r) => Some(r.stencil(s)?),
                None => None,
            };
            for q in 0..self.space.len() {
                let eta = nc.point(self.space.point(q));
                plan.eval_into(coeffs, &eta[..n], &mut c[..n * n])?;
                let k = SmallKernel::new(n, &eb, &c, drift.trace(), dt)
                    .ok_or_else(|| not_pd("outer parametrix"))?;
                let p = k.whiten_into(x, &eta[..n], &mut w[..n]);
                let phi1 = mismatch_with_kernel(coeffs, &*target, tau, &eta[..n], y, &mut w2[..n])?;
                if p == 0.0 {
                    continue;
                }
                let log_pw = p.ln() + log_k - w1.log_pdf(&eta[..n]);
                let mut r = rescale(phi1, log_pw - env.log_pdf(&eta[..n]));
                if let (Some(rest), Some(st)) = (&self.rest, &stencil) {
                    let z = frame.z_of(&eta[..n]);
                    r += log_pw.exp() * rest.value(st, &z[..n]) * gain_base / s;
                }
                let cst = total * wt * self.space.weights[q] * r;
                *value += cst;
                if derivs {
                    let h_inv = k.h_inv();
                    for a in 0..n {
                        grad[a] += cst * w[a];
                        for b in 0..n {
                            hess[a * n + b] += cst * (w[a] * w[b] - h_inv[a * n + b]);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// `p = P + Φ` with `x`-derivatives when `derivs` is set.
    pub fn eval(&self, t: f64, x: &[f64], derivs: bool) -> Result<ParametrixEval> {
        self.check_point(t, x)?;
        let k = self
            .cache
            .get_or_build(&self.model, t, self.t_end, self.pole())?;
        let mut p = eval_kernel(&self.model, &k, x, self.pole(), derivs);
        let phi = self.big_phi(t, x, derivs)?;
        p.value += phi.value;
        for (a, b) in p.grad.iter_mut().zip(&phi.grad) {
            *a += b;
        }
        for (a, b) in p.hess.iter_mut().zip(&phi.hess) {
            *a += b;
        }
        for (a, b) in p.extended_grad.iter_mut().zip(&phi.extended_grad) {
            *a += b;
        }
        Ok(p)
    }
}
