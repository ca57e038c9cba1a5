//! Sample-sup estimators of the intrinsic Hölder semi-norms.
//!
//! Samples are drawn sequentially from one seeded stream and evaluated in
//! parallel; every component is a running maximum, so an estimate with more
//! samples never decreases.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{dyadic_scales, loglog_slope, Status, VerificationReport};
use crate::density::{apply_operator, PoleDensity};
use crate::error::{KolmoError, Result};
use crate::kernel::Drift;
use crate::sampling::rng;

/// Value and derivatives in the first `d` directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    /// `∂_i f`, `i < d`.
    pub grad: Vec<f64>,
    /// `∂_ij f`, `i, j < d`, row-major.
    pub hess: Vec<f64>,
}

/// A function on `S_T` with the derivatives the semi-norms need.
pub trait Observable: Sync {
    /// `(N, d)`.
    fn dims(&self) -> (usize, usize);
    fn jet(&self, t: f64, x: &[f64]) -> Result<Jet>;
    /// a.e.-Lie derivative `f_Y`.
    fn lie(&self, t: f64, x: &[f64]) -> Result<f64>;
    fn jet_and_lie(&self, t: f64, x: &[f64]) -> Result<(Jet, f64)> {
        Ok((self.jet(t, x)?, self.lie(t, x)?))
    }
}

/// `f_Y = −𝒜p`, since `(𝒜 + Y)p = 0`.
impl Observable for PoleDensity {
    fn dims(&self) -> (usize, usize) {
        (self.model().n(), self.model().d())
    }

    fn jet(&self, t: f64, x: &[f64]) -> Result<Jet> {
        let e = self.eval(t, x, true)?;
        Ok(Jet {
            value: e.value,
            grad: e.grad,
            hess: e.hess,
        })
    }

    fn lie(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.jet_and_lie(t, x)?.1)
    }

    fn jet_and_lie(&self, t: f64, x: &[f64]) -> Result<(Jet, f64)> {
        let e = self.eval(t, x, true)?;
        let lie = -apply_operator(self.model(), t, x, &e)?;
        Ok((
            Jet {
                value: e.value,
                grad: e.grad,
                hess: e.hess,
            },
            lie,
        ))
    }
}

type FieldFn = Box<dyn Fn(f64, &[f64]) -> Result<f64> + Send + Sync>;

/// A closure `f(t, x)` with central finite-difference derivatives.
pub struct ScalarField {
    drift: Drift,
    f: FieldFn,
    step: f64,
}

impl ScalarField {
    pub fn new(
        drift: &Drift,
        f: impl Fn(f64, &[f64]) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        ScalarField {
            drift: drift.clone(),
            f: Box::new(f),
            step: 1e-4,
        }
    }

    fn shifted(&self, t: f64, x: &[f64], moves: &[(usize, f64)]) -> Result<f64> {
        let mut z = x.to_vec();
        for &(i, h) in moves {
            z[i] += h;
        }
        (self.f)(t, &z)
    }
}

impl Observable for ScalarField {
    fn dims(&self) -> (usize, usize) {
        (self.drift.n(), self.drift.d())
    }

    fn jet(&self, t: f64, x: &[f64]) -> Result<Jet> {
        let d = self.drift.d();
        let h = self.step;
        let value = (self.f)(t, x)?;
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for i in 0..d {
            let (p, m) = (
                self.shifted(t, x, &[(i, h)])?,
                self.shifted(t, x, &[(i, -h)])?,
            );
            grad[i] = (p - m) / (2.0 * h);
            hess[i * d + i] = (p - 2.0 * value + m) / (h * h);
            for j in 0..i {
                let pp = self.shifted(t, x, &[(i, h), (j, h)])?;
                let pm = self.shifted(t, x, &[(i, h), (j, -h)])?;
                let mp = self.shifted(t, x, &[(i, -h), (j, h)])?;
                let mm = self.shifted(t, x, &[(i, -h), (j, -h)])?;
                let v = (pp - pm - mp + mm) / (4.0 * h * h);
                hess[i * d + j] = v;
                hess[j * d + i] = v;
            }
        }
        Ok(Jet { value, grad, hess })
    }

    /// `(f(t+h, e^{hB}x) − f(t−h, e^{−hB}x)) / 2h`.
    fn lie(&self, t: f64, x: &[f64]) -> Result<f64> {
        let h = self.step;
        let xv = DVector::from_column_slice(x);
        let fwd = self.drift.exp(h)? * &xv;
        let back = self.drift.exp(-h)? * &xv;
        Ok(((self.f)(t + h, fwd.as_slice())? - (self.f)(t - h, back.as_slice())?) / (2.0 * h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeminormKind {
    /// `Σ_i sup |f(t,x+h e_i) − f(t,x)| / |h|^α`, `i < d`.
    Cd,
    /// `sup |f(s, e^{(s−t)B}x) − f(t,x)| / |s−t|^{β/2}`.
    Cy,
    /// `C_Y^α + C_d^α`.
    CB0,
    /// `‖f‖_{C_Y^{1+α}} + Σ_i ‖∂_i f‖_{C_B^{0,α}}`.
    CB1,
    /// `Σ_i ‖∂_i f‖_{C_Y^{1+α}} + Σ_ij ‖∂_ij f‖_{C_B^{0,α}} + sup_t ‖f_Y(t)‖_{C_B^α(R^N)}`,
    /// each part a sample-sup over the same points.
    CB2Partial,
}

/// Where base points and increments are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum HolderDomain {
    /// `t` uniform in `t_range`, each `x_i` uniform in `[−radius, radius]` or `0`
    /// with probability 1/8; increments `h` log-uniform in `h_range` with time
    /// increments `h²`.
    Box {
        t_range: (f64, f64),
        radius: f64,
        h_range: (f64, f64),
    },
    /// Adapted to the pole `(T, y)`: `x = e^{−(T−t)B}y + D(√(T−t))ξ` with `ξ`
    /// uniform in `[−radius, radius]^N`; increments `h = r√(T−t)`, `r` log-uniform
    /// in `r_range`, with time increments `h²`. Earlier points never go below `t_floor`.
    Pole {
        t_end: f64,
        y: Vec<f64>,
        t_range: (f64, f64),
        t_floor: f64,
        radius: f64,
        r_range: (f64, f64),
    },
}

impl HolderDomain {
    fn t_range(&self) -> (f64, f64) {
        match self {
            HolderDomain::Box { t_range, .. } | HolderDomain::Pole { t_range, .. } => *t_range,
        }
    }

    fn t_floor(&self) -> f64 {
        match self {
            HolderDomain::Box { t_range, .. } => t_range.0,
            HolderDomain::Pole { t_floor, .. } => *t_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolderEstimate {
    pub seminorm_kind: SeminormKind,
    pub value: f64,
    pub pairs_used: usize,
    /// The separate sups whose sum is `value`.
    pub components: Vec<f64>,
}

/// One sampled configuration: base `(t, x)`, its predecessor on the flow
/// `(t − δ, e^{−δB}x)`, coordinate shifts `h` and an anisotropic shift `Δ`.
struct Sample {
    t: f64,
    x: Vec<f64>,
    t_prev: f64,
    x_prev: Vec<f64>,
    h: f64,
    delta: Vec<f64>,
    delta_norm: f64,
}

fn log_uniform<R: Rng>(r: &mut R, (lo, hi): (f64, f64)) -> f64 {
    (lo.ln() + r.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn draw_samples(
    drift: &Drift,
    domain: &HolderDomain,
    count: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let s = drift.structure();
    let n = drift.n();
    let (lo, hi) = domain.t_range();
    if !(lo <= hi) {
        return Err(KolmoError::InvalidInput(format!(
            "empty time range [{lo}, {hi}]"
        )));
    }
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let t = lo + r.gen::<f64>() * (hi - lo);
        let (x, lambda) = match domain {
            HolderDomain::Box {
                radius, h_range, ..
            } => {
                let x: Vec<f64> = (0..n)
                    .map(|_| {
                        if r.gen::<f64>() < 0.125 {
                            0.0
                        } else {
                            radius * (2.0 * r.gen::<f64>() - 1.0)
                        }
                    })
                    .collect();
                (x, log_uniform(&mut r, *h_range))
            }
            HolderDomain::Pole {
                t_end,
                y,
                radius,
                r_range,
                ..
            } => {
                let gap = t_end - t;
                if !(gap > 0.0) {
                    return Err(KolmoError::InvalidInput(format!(
                        "sample time {t} not before the pole"
                    )));
                }
                let dil = s.dilation_diag(gap.sqrt());
                let center = drift.exp(-gap)? * DVector::from_column_slice(y);
                let x: Vec<f64> = (0..n)
                    .map(|i| center[i] + dil[i] * radius * (2.0 * r.gen::<f64>() - 1.0))
                    .collect();
                (x, log_uniform(&mut r, *r_range) * gap.sqrt())
            }
        };
        let sign = if r.gen::<bool>() { 1.0 } else { -1.0 };
        let h = sign * lambda;
        let step = (lambda * lambda).min(t - domain.t_floor());
        let x_prev = drift.exp(-step)? * DVector::from_column_slice(&x);
        let dil = s.dilation_diag(lambda);
        let delta: Vec<f64> = (0..n)
            .map(|i| dil[i] * (2.0 * r.gen::<f64>() - 1.0))
            .collect();
        let delta_norm = s.anisotropic_norm(&delta);
        out.push(Sample {
            t,
            x,
            t_prev: t - step,
            x_prev: x_prev.as_slice().to_vec(),
            h,
            delta,
            delta_norm,
        });
    }
    Ok(out)
}

fn quotient(a: f64, b: f64, denom: f64) -> f64 {
    if denom > 0.0 {
        (a - b).abs() / denom
    } else {
        0.0
    }
}

/// Component quotients of one sample, in a fixed layout per kind.
fn sample_quotients(
    f: &dyn Observable,
    kind: SeminormKind,
    exponent: f64,
    s: &Sample,
) -> Result<Vec<f64>> {
    let (_, d) = f.dims();
    let a = exponent;
    let dt = s.t - s.t_prev;
    let ya = dt.powf(a / 2.0);
    let ha = s.h.abs().powf(a);
    let shifted = |i: usize| -> Vec<f64> {
        let mut z = s.x.clone();
        z[i] += s.h;
        z
    };
    let mut q = Vec::new();
    match kind {
        SeminormKind::Cd | SeminormKind::Cy | SeminormKind::CB0 => {
            let base = f.jet(s.t, &s.x)?.value;
            if kind != SeminormKind::Cd {
                q.push(quotient(base, f.jet(s.t_prev, &s.x_prev)?.value, ya));
            }
            if kind != SeminormKind::Cy {
                for i in 0..d {
                    q.push(quotient(f.jet(s.t, &shifted(i))?.value, base, ha));
                }
            }
        }
        SeminormKind::CB1 => {
            let base = f.jet(s.t, &s.x)?;
            let prev = f.jet(s.t_prev, &s.x_prev)?;
            q.push(quotient(base.value, prev.value, dt.powf((1.0 + a) / 2.0)));
            for i in 0..d {
                q.push(quotient(base.grad[i], prev.grad[i], ya));
            }
            for k in 0..d {
                let sh = f.jet(s.t, &shifted(k))?;
                for i in 0..d {
                    q.push(quotient(sh.grad[i], base.grad[i], ha));
                }
            }
        }
        SeminormKind::CB2Partial => {
            let (base, lie) = f.jet_and_lie(s.t, &s.x)?;
            let prev = f.jet(s.t_prev, &s.x_prev)?;
            for i in 0..d {
                q.push(quotient(
                    base.grad[i],
                    prev.grad[i],
                    dt.powf((1.0 + a) / 2.0),
                ));
            }
            for ij in 0..d * d {
                q.push(quotient(base.hess[ij], prev.hess[ij], ya));
            }
            for k in 0..d {
                let sh = f.jet(s.t, &shifted(k))?;
                for ij in 0..d * d {
                    q.push(quotient(sh.hess[ij], base.hess[ij], ha));
                }
            }
            let moved: Vec<f64> = s.x.iter().zip(&s.delta).map(|(u, v)| u + v).collect();
            q.push(lie.abs());
            q.push(quotient(f.lie(s.t, &moved)?, lie, s.delta_norm.powf(a)));
        }
    }
    Ok(q)
}

/// Sample-sup estimate of a semi-norm of `f` with Hölder exponent `exponent`.
pub fn holder_seminorm(
    f: &dyn Observable,
    kind: SeminormKind,
    drift: &Drift,
    domain: &HolderDomain,
    exponent: f64,
    samples: usize,
    seed: u64,
) -> Result<HolderEstimate> {
    let upper = if kind == SeminormKind::Cy { 2.0 } else { 1.0 };
    if !(exponent > 0.0 && exponent <= upper) {
        return Err(KolmoError::InvalidInput(format!(
            "exponent {exponent} outside (0, {upper}] for {kind:?}"
        )));
    }
    let drawn = draw_samples(drift, domain, samples, seed)?;
    let rows = drawn
        .par_iter()
        .map(|s| sample_quotients(f, kind, exponent, s))
        .collect::<Result<Vec<_>>>()?;
    let width = rows.first().map_or(0, Vec::len);
    let mut components = vec![0.0f64; width];
    for row in &rows {
        for (c, v) in components.iter_mut().zip(row) {
            *c = c.max(*v);
        }
    }
    Ok(HolderEstimate {
        seminorm_kind: kind,
        value: components.iter().sum(),
        pairs_used: samples,
        components,
    })
}

/// `‖p(·,·;T,y)‖_{C_B^{2,β}(S_τ)}` against `T − τ` over `scales` dyadic gaps
/// `T − τ = top, top/2, …`, sampled on `t ∈ [τ − (T−τ), τ]`; passes when the
/// log–log slope is `−(Q+2+β)/2` within `tol`.
pub fn blowup_check(
    p: &PoleDensity,
    beta: f64,
    top: f64,
    scales: usize,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<VerificationReport> {
    let model = p.model();
    let t_end = p.t_end();
    let gaps = dyadic_scales(top, scales);
    let q = model.drift.structure().q as f64;
    let want = -(q + 2.0 + beta) / 2.0;
    let mut values = Vec::with_capacity(gaps.len());
    let mut report =
        VerificationReport::new("holder_blowup", Status::Pass, tol, samples * gaps.len());
    for (k, &g) in gaps.iter().enumerate() {
        let tau = t_end - g;
        let domain = HolderDomain::Pole {
            t_end,
            y: p.pole().to_vec(),
            t_range: (tau - g, tau),
            t_floor: tau - 2.0 * g,
            radius: 2.5,
            r_range: (0.02, 1.0),
        };
        let est = holder_seminorm(
            p,
            SeminormKind::CB2Partial,
            &model.drift,
            &domain,
            beta,
            samples,
            seed + k as u64,
        )?;
        report.measured.insert(format!("norm_gap_{g:e}"), est.value);
        values.push(est.value);
    }
    let slope = loglog_slope(&gaps, &values).unwrap_or(f64::NAN);
    report.status = Status::from_bool((slope - want).abs() <= tol);
    Ok(report
        .with("slope", slope)
        .with("expected_slope", want)
        .note(format!(
            "beta = {beta}; gaps T-tau = {gaps:?}; {samples} samples per gap"
        )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn langevin() -> Drift {
        Drift::new(&DMatrix::from_row_slice(2, 2, &[0., 0., 1., 0.]), 1, 1e-10).unwrap()
    }

    fn unit_box() -> HolderDomain {
        HolderDomain::Box {
            t_range: (0.2, 1.0),
            radius: 1.0,
            h_range: (1e-3, 0.5),
        }
    }

    #[test]
    fn constant_has_zero_seminorms() {
        let drift = langevin();
        let f = ScalarField::new(&drift, |_, _| Ok(2.5));
        for kind in [
            SeminormKind::Cd,
            SeminormKind::Cy,
            SeminormKind::CB0,
            SeminormKind::CB1,
            SeminormKind::CB2Partial,
        ] {
            let e = holder_seminorm(&f, kind, &drift, &unit_box(), 0.5, 200, 3).unwrap();
            assert_eq!(e.value, 0.0, "{kind:?}");
        }
    }

    #[test]
    fn lipschitz_quotient_of_abs() {
        let drift = langevin();
        let f = ScalarField::new(&drift, |_, x| Ok(x[0].abs()));
        let e = holder_seminorm(&f, SeminormKind::Cd, &drift, &unit_box(), 1.0, 500, 1).unwrap();
        assert!((e.value - 1.0).abs() < 1e-12, "{}", e.value);
    }

    #[test]
    fn lie_quotient_of_flow_invariant_is_zero() {
        // x2 − t x1 is constant along (t, e^{tB}x) for the Langevin drift.
        let drift = langevin();
        let f = ScalarField::new(&drift, |t, x| Ok(x[1] - t * x[0]));
        let e = holder_seminorm(&f, SeminormKind::Cy, &drift, &unit_box(), 1.0, 300, 2).unwrap();
        assert!(e.value < 1e-12, "{}", e.value);
        assert!(f.lie(0.4, &[0.3, 0.7]).unwrap().abs() < 1e-8);
    }

    #[test]
    fn time_quotient_matches_exponent() {
        // f = t: |t − s| / |t − s|^{β/2} with β = 2 is exactly 1.
        let drift = langevin();
        let f = ScalarField::new(&drift, |t, _| Ok(t));
        let e = holder_seminorm(&f, SeminormKind::Cy, &drift, &unit_box(), 2.0, 100, 5).unwrap();
        assert!((e.value - 1.0).abs() < 1e-9, "{}", e.value);
    }

    #[test]
    fn estimates_grow_with_samples() {
        let drift = langevin();
        let f = ScalarField::new(&drift, |t, x| Ok((x[0] * 3.0).sin() + t * x[1]));
        let mut last = 0.0;
        for n in [10, 40, 160] {
            let e = holder_seminorm(&f, SeminormKind::CB0, &drift, &unit_box(), 0.7, n, 9).unwrap();
            assert!(e.value >= last);
            last = e.value;
        }
    }
}
