//! Iterates with a fixed source `(t, x)`.
//!
//! `G_k(τ', η') = ∫∫ P(t,x;τ,η) φ_k(τ,η;τ',η') dη dτ` obeys
//! `G_{k+1}(τ', η') = ∫ₜ^{τ'}∫ G_k(τ,η) φ_1(τ,η;τ',η') dη dτ` with `G_0 = P`, so
//! `p(t,x;·,·) = P + Σ_{k≥1} G_k`. Levels are indexed by `s = τ' − t` with frames
//! centred at `e^{sB}x`. For a node `(τ', η')` the pole of `φ_1` is the node
//! itself, so its covariance is fixed per inner time node and `φ_1` is an exact
//! Gaussian in `η` times a quadratic.

use rayon::prelude::*;

use super::grid::{Direction, Frame, Frames, LevelGrid, Stencil};
use super::small::{congruence, from_dmatrix, mat_vec, rescale, Mn, Normal, SmallKernel, Vn, MAXN};
use super::{check_dimension, fits_budget, tail_estimate, SeriesReport};
use crate::config::Model;
use crate::error::{KolmoError, Result};
use crate::kernel::CovPlan;
use crate::parametrix::{check_interval, mismatch_factor, mismatch_vanishes};
use crate::quadrature::{endpoint_rule, NormalCubature, Rule};

/// The Levi series for one source point, valid for `T ∈ (t, t_max]`.
pub struct ForwardSeries {
    model: Model,
    t: f64,
    t_max: f64,
    x: Vn,
    frames: Frames,
    /// `Σ_{k≥1} G_k`; `None` when the mismatch vanishes.
    sum: Option<LevelGrid>,
    report: SeriesReport,
}

struct Slice {
    tau: f64,
    dt: f64,
    weight: f64,
    eb: Mn,
    /// `C^{(τ',·)}(τ, τ')`.
    plan: CovPlan,
    env1: Normal,
    frame1: Frame,
    stencil: Stencil,
    /// `C^{(τ,·)}(t, τ)` and `e^{−(τ−t)B}` for `G_0`.
    plan0: CovPlan,
    eb0: Mn,
    s1: f64,
}

struct Builder<'a> {
    model: &'a Model,
    t: f64,
    x: Vn,
    geometry: LevelGrid,
    level_frames: Vec<Frame>,
    slices: Vec<Vec<Slice>>,
    space: &'a NormalCubature,
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
        let drift = &model.drift;
        let s = self.geometry.s_level(l);
        let (v, w) = (time.nodes[j], time.weights[j]);
        let s1 = v * s;
        let dt = (1.0 - v) * s;
        let tau = self.t + s1;
        let tau2 = self.t + s;
        let frame1 = frames.frame(s1)?;
        Ok(Slice {
            tau,
            dt,
            weight: s * w,
            eb: from_dmatrix(&drift.exp(-dt)?),
            plan: CovPlan::new(drift, &model.coeffs, &model.quad, tau2, tau, tau2)?,
            env1: frame1.envelope(model.quad.envelope_scale)?,
            frame1,
            stencil: self.geometry.stencil(s1)?,
            plan0: CovPlan::new(drift, &model.coeffs, &model.quad, tau, self.t, tau)?,
            eb0: from_dmatrix(&drift.exp(-s1)?),
            s1,
        })
    }

    /// Calls `f(j, z, c, r0)` for every inner node of level node `(l, i)`; `Σ c · G_k / W_1`
    /// approximates `G_{k+1}` and `r0 = G_0 / W_1` when `exact` is set.
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
        let trace = model.drift.trace();
        let eta2 = self.level_frames[l - 1].point(&self.geometry.node_z(i));
        let mut c = [0.0; MAXN * MAXN];
        let mut w = [0.0; MAXN];
        for (j, sl) in self.slices[l - 1].iter().enumerate() {
            sl.plan.eval_into(coeffs, &eta2[..n], &mut c[..n * n])?;
            let k1 = SmallKernel::new(n, &sl.eb, &c, trace, sl.dt)
                .ok_or_else(|| not_pd("inner parametrix"))?;
            let w2 = Normal::new(n, mat_vec(n, &sl.eb, &eta2), congruence(n, &sl.eb, &c))
                .ok_or_else(|| not_pd("inner kernel weight"))?;
            let (nc, log_k) = sl
                .env1
                .product(&w2)
                .ok_or_else(|| not_pd("inner product weight"))?;
            for q in 0..self.space.len() {
                let eta = nc.point(self.space.point(q));
                let (factor, val) =
                    mismatch_factor(coeffs, &k1, sl.tau, &eta[..n], &eta2[..n], &mut w[..n])?;
                let coef = sl.weight
                    * self.space.weights[q]
                    * factor
                    * rescale(val, log_k - w2.log_pdf(&eta[..n]));
                let r0 = if exact {
                    sl.plan0.eval_into(coeffs, &eta[..n], &mut c[..n * n])?;
                    let k0 = SmallKernel::new(n, &sl.eb0, &c, trace, sl.s1)
                        .ok_or_else(|| not_pd("source kernel"))?;
                    (k0.value(&self.x[..n], &eta[..n]).ln() - sl.env1.log_pdf(&eta[..n])).exp()
                } else {
                    0.0
                };
                f(j, &sl.frame1.z_of(&eta[..n]), coef, r0);
            }
        }
        Ok(())
    }
}

impl ForwardSeries {
    pub fn build(model: &Model, t: f64, x: &[f64], t_max: f64) -> Result<Self> {
        check_dimension(model)?;
        check_interval(model, t, t_max)?;
        let n = model.n();
        if x.len() != n {
            return Err(KolmoError::InvalidInput(format!(
                "x has length {}, expected {n}",
                x.len()
            )));
        }
        let quad = &model.quad;
        let nu = quad.envelope_scale;
        let time = endpoint_rule(quad.time_nodes, model.alpha() / 2.0)?;
        let space = NormalCubature::from_config(n, quad.space_rule)?;
        let mut xa = [0.0; MAXN];
        xa[..n].copy_from_slice(x);
        let frames = Frames::new(&model.drift, Direction::Forward, x, model.coeffs.a2(t, x)?);
        let mut series = ForwardSeries {
            model: model.clone(),
            t,
            t_max,
            x: xa,
            frames,
            sum: None,
            report: SeriesReport::vanishing(),
        };
        if mismatch_vanishes(&model.coeffs) {
            return Ok(series);
        }
        let linear = !model.coeffs.class().time_smooth;
        let levels = quad.levels;
        let geometry = LevelGrid::new(
            n,
            quad.cheb_points,
            quad.box_half_width,
            (t_max - t).sqrt(),
            levels,
            linear,
        );
        let level_frames = (1..=levels)
            .map(|l| series.frames.frame(geometry.s_level(l)))
            .collect::<Result<Vec<_>>>()?;
        let mut builder = Builder {
            model,
            t,
            x: xa,
            geometry,
            level_frames,
            slices: Vec::new(),
            space: &space,
        };
        let pairs: Vec<(usize, usize)> = (1..=levels)
            .flat_map(|l| (0..quad.time_nodes).map(move |j| (l, j)))
            .collect();
        let flat = pairs
            .par_iter()
            .map(|&(l, j)| builder.slice(&series.frames, &time, l, j))
            .collect::<Result<Vec<_>>>()?;
        let mut it = flat.into_iter();
        builder.slices = (0..levels)
            .map(|_| it.by_ref().take(quad.time_nodes).collect())
            .collect();

        let per = builder.geometry.per_level();
        let q_per = space.len();
        let inner = quad.time_nodes * q_per;
        let store = fits_budget(levels * per * inner, n + 1);
        let gain = (2.0 * std::f64::consts::PI * nu).powf(n as f64 / 2.0);
        let nodes: Vec<(usize, usize)> = (1..=levels)
            .flat_map(|l| (0..per).map(move |i| (l, i)))
            .collect();
        let setups = nodes
            .par_iter()
            .map(|&(l, i)| -> Result<(f64, Vec<f64>)> {
                let mut g1 = 0.0;
                let mut entries = Vec::with_capacity(if store { inner * (n + 1) } else { 0 });
                builder.visit(l, i, true, |_, z, coef, r0| {
                    g1 += coef * r0;
                    if store {
                        entries.extend_from_slice(&z[..n]);
                        entries.push(coef * gain);
                    }
                })?;
                Ok((g1, entries))
            })
            .collect::<Result<Vec<_>>>()?;
        let to_psi = |l: usize, i: usize, g: f64| {
            let z = builder.geometry.node_z(i);
            builder.level_frames[l - 1].det_l * g / envelope_weight(&z[..n], nu)
        };
        let mut current = builder.geometry.clone();
        for (&(l, i), (g1, _)) in nodes.iter().zip(&setups) {
            current.level_mut(l)[i] = to_psi(l, i, *g1);
        }
        let mut norms = vec![current.weighted_sup(nu)];
        let mut sum = current.clone();
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
                .map(|(&(l, i), (_, entries))| -> Result<f64> {
                    let b = &builder;
                    let mut acc = 0.0;
                    if store {
                        for (e, rec) in entries.chunks_exact(n + 1).enumerate() {
                            let sl = &b.slices[l - 1][e / q_per];
                            acc += rec[n] * current.value(&sl.stencil, &rec[..n]);
                        }
                    } else {
                        b.visit(l, i, false, |j, z, coef, _| {
                            let sl = &b.slices[l - 1][j];
                            let c = coef * gain;
                            acc += c * current.value(&sl.stencil, &z[..n]);
                        })?;
                    }
                    Ok(to_psi(l, i, acc))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut next = builder.geometry.clone();
            for (&(l, i), v) in nodes.iter().zip(values) {
                next.level_mut(l)[i] = v;
            }
            norms.push(next.weighted_sup(nu));
            sum.axpy(1.0, &next);
            current = next;
        };
        series.report = SeriesReport {
            truncation_k: norms.len(),
            est_tail: tail,
            term_norms: norms,
            kappa: None,
            analytic_tail: None,
            cached_entries: store,
        };
        series.sum = Some(sum);
        Ok(series)
    }

    pub fn report(&self) -> &SeriesReport {
        &self.report
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn source(&self) -> &[f64] {
        &self.x[..self.model.n()]
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// `Σ_{k≥1} G_k(T, y)`, the correction to the parametrix.
    pub fn correction(&self, t_end: f64, y: &[f64]) -> Result<f64> {
        self.check_point(t_end, y)?;
        match self.locate(t_end)? {
            Some((frame, st)) => Ok(self.correction_at(&frame, &st, y)),
            None => Ok(0.0),
        }
    }

    fn locate(&self, t_end: f64) -> Result<Option<(Frame, Stencil)>> {
        let Some(sum) = &self.sum else {
            return Ok(None);
        };
        let s = t_end - self.t;
        Ok(Some((self.frames.frame(s)?, sum.stencil(s)?)))
    }

    fn correction_at(&self, frame: &Frame, st: &Stencil, y: &[f64]) -> f64 {
        let Some(sum) = &self.sum else {
            return 0.0;
        };
        let n = self.model.n();
        let z = frame.z_of(y);
        sum.value(st, &z[..n]) * envelope_weight(&z[..n], self.model.quad.envelope_scale)
            / frame.det_l
    }

    /// `p(t, x; T, y)`.
    pub fn density(&self, t_end: f64, y: &[f64]) -> Result<f64> {
        Ok(self.densities(t_end, y)?[0])
    }

    /// `p(t, x; T, y)` for every `y` in the row-major list `ys`, sharing the
    /// covariance plan of the parametrix at `T`.
    pub fn densities(&self, t_end: f64, ys: &[f64]) -> Result<Vec<f64>> {
        let model = &self.model;
        let n = model.n();
        if ys.is_empty() || !ys.len().is_multiple_of(n) {
            return Err(KolmoError::InvalidInput(format!(
                "point list of length {} is not a nonempty multiple of {n}",
                ys.len()
            )));
        }
        self.check_point(t_end, &ys[..n])?;
        let dt = t_end - self.t;
        let plan = CovPlan::new(
            &model.drift,
            &model.coeffs,
            &model.quad,
            t_end,
            self.t,
            t_end,
        )?;
        let back = from_dmatrix(&model.drift.exp(-dt)?);
        let trace = model.drift.trace();
        let located = self.locate(t_end)?;
        ys.par_chunks(n)
            .map(|y| {
                let mut c = [0.0; MAXN * MAXN];
                plan.eval_into(&model.coeffs, y, &mut c[..n * n])?;
                let k = SmallKernel::new(n, &back, &c, trace, dt)
                    .ok_or_else(|| not_pd("parametrix covariance"))?;
                let corr = located
                    .as_ref()
                    .map_or(0.0, |(f, st)| self.correction_at(f, st, y));
                Ok(k.value(self.source(), y) + corr)
            })
            .collect()
    }

    fn check_point(&self, t_end: f64, y: &[f64]) -> Result<()> {
        if y.len() != self.model.n() {
            return Err(KolmoError::InvalidInput(format!(
                "y has length {}, expected {}",
                y.len(),
                self.model.n()
            )));
        }
        if !(t_end > self.t && t_end <= self.t_max * (1.0 + 1e-12)) {
            return Err(KolmoError::InvalidInput(format!(
                "T = {t_end} outside the built range ({}, {}]",
                self.t, self.t_max
            )));
        }
        self.model.drift.check_dt(t_end - self.t)
    }
}
