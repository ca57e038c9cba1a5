//! Gaussian kernels of Kolmogorov type.
//!
//! `C(t) = ∫₀ᵗ e^{uB} E e^{uB*} du` with `E = diag(I_d, 0)` is the covariance of
//! the prototype operator; frozen kernels replace `E` by the diffusion matrix
//! evaluated along an integral curve of `Y`. Spatial derivatives are computed
//! in the variable `w = H⁻¹(e^{−(T−t)B}y − x)`, `H = e^{−(T−t)B} C e^{−(T−t)B*}`.

use nalgebra::{DMatrix, DVector};

use crate::coeffs::CoefficientField;
use crate::config::QuadratureConfig;
use crate::error::{KolmoError, Result};
use crate::expr::Dependence;
use crate::linalg::{symmetrize, Flow, SpdFactor};
use crate::quadrature::{adaptive_legendre, gauss_legendre_unit, pairwise_sum};
use crate::structure::{block_decompose, BlockStructure, MultiIndex};

/// Smallest `T − t` for which kernels are evaluated by default.
pub const DEFAULT_MIN_DT: f64 = 1e-8;

/// Highest total derivative order supported by [`FrozenKernel::deriv`].
pub const MAX_DERIV_ORDER: usize = 4;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// The drift matrix together with its block structure and cached flow data.
#[derive(Debug, Clone)]
pub struct Drift {
    flow: Flow,
    structure: BlockStructure,
    trace: f64,
    /// `B^k / k!` for `k < N` when `B` is nilpotent.
    powers: Option<Vec<DMatrix<f64>>>,
    /// `C(t) = Σ_m M_m t^{m+1}` when `B` is nilpotent.
    identity_poly: Option<Vec<DMatrix<f64>>>,
    pub min_dt: f64,
}

impl Drift {
    pub fn new(b: &DMatrix<f64>, d: usize, rank_tol: f64) -> Result<Self> {
        let structure = block_decompose(b, d, rank_tol)?;
        Self::with_structure(b, structure)
    }

    pub(crate) fn with_structure(b: &DMatrix<f64>, structure: BlockStructure) -> Result<Self> {
        let flow = Flow::new(b)?;
        let n = b.nrows();
        let d = structure.d;
        let powers = flow.is_nilpotent().then(|| {
            let mut out = Vec::with_capacity(n);
            let mut p = DMatrix::<f64>::identity(n, n);
            for k in 0..n {
                if k > 0 {
                    p = &p * b / k as f64;
                }
                out.push(p.clone());
            }
            out
        });
        let identity_poly = powers.as_ref().map(|pw| {
            let mut m = vec![DMatrix::<f64>::zeros(n, n); 2 * n - 1];
            for (k, pk) in pw.iter().enumerate() {
                for (l, pl) in pw.iter().enumerate() {
                    let a = pk.columns(0, d);
                    let b = pl.columns(0, d);
                    m[k + l] += a * b.transpose() / (k + l + 1) as f64;
                }
            }
            m
        });
        Ok(Drift {
            trace: b.trace(),
            flow,
            structure,
            powers,
            identity_poly,
            min_dt: DEFAULT_MIN_DT,
        })
    }

    pub fn with_min_dt(mut self, min_dt: f64) -> Self {
        self.min_dt = min_dt;
        self
    }

    /// Drift `B_0` with every `∗` block dropped.
    pub fn reduced(&self) -> Result<Drift> {
        let b0 = self.structure.reduced_drift(self.b());
        Ok(Self::with_structure(&b0, self.structure.clone())?.with_min_dt(self.min_dt))
    }

    pub fn n(&self) -> usize {
        self.structure.n
    }

    pub fn d(&self) -> usize {
        self.structure.d
    }

    pub fn b(&self) -> &DMatrix<f64> {
        self.flow.matrix()
    }

    pub fn structure(&self) -> &BlockStructure {
        &self.structure
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn is_nilpotent(&self) -> bool {
        self.powers.is_some()
    }

    /// `e^{uB}`.
    pub fn exp(&self, u: f64) -> Result<DMatrix<f64>> {
        self.flow.exp(u)
    }

    pub fn check_dt(&self, dt: f64) -> Result<()> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(KolmoError::InvalidInput(format!(
                "time increment must be positive, got {dt}"
            )));
        }
        if dt < self.min_dt {
            return Err(KolmoError::TooShort {
                dt,
                min: self.min_dt,
            });
        }
        Ok(())
    }

    /// `C(dt)` for `E = diag(I_d, 0)`.
    pub fn cov_identity(&self, dt: f64) -> Result<DMatrix<f64>> {
        if !(dt > 0.0) {
            return Err(KolmoError::InvalidInput(format!(
                "time increment must be positive, got {dt}"
            )));
        }
        match &self.identity_poly {
            Some(poly) => {
                let n = self.n();
                let mut c = DMatrix::zeros(n, n);
                for m in poly.iter().rev() {
                    c *= dt;
                    c += m;
                }
                c *= dt;
                symmetrize(&mut c);
                Ok(c)
            }
            None => self.cov_constant(&DMatrix::identity(self.d(), self.d()), dt),
        }
    }

    /// `∫₀^{dt} e^{uB} Â e^{uB*} du` with `Â = diag(A, 0)` for a constant `d × d` matrix `A`.
    pub fn cov_constant(&self, a: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
        if !(dt > 0.0) {
            return Err(KolmoError::InvalidInput(format!(
                "time increment must be positive, got {dt}"
            )));
        }
        let n = self.n();
        let d = self.d();
        let mut c = match &self.powers {
            Some(pw) => {
                let mut c = DMatrix::zeros(n, n);
                for (k, pk) in pw.iter().enumerate() {
                    let left = pk.columns(0, d) * a;
                    for (l, pl) in pw.iter().enumerate() {
                        let m = k + l + 1;
                        c += &left * pl.columns(0, d).transpose() * (dt.powi(m as i32) / m as f64);
                    }
                }
                c
            }
            None => {
                let mut f = |u: f64, out: &mut [f64]| -> Result<()> {
                    let e = self.flow.exp(u)?;
                    let cols = e.columns(0, d);
                    let m = cols * a * cols.transpose();
                    out.copy_from_slice(m.as_slice());
                    Ok(())
                };
                let v = adaptive_legendre(0.0, dt, n * n, 1e-14, &mut f)?;
                DMatrix::from_column_slice(n, n, &v)
            }
        };
        symmetrize(&mut c);
        Ok(c)
    }
}

/// Which construction produced a covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum CovKind {
    ConstantDelta(f64),
    Frozen { s: f64, v: Vec<f64> },
    Reduced,
}

#[derive(Debug, Clone)]
pub struct CovMatrix {
    pub c: DMatrix<f64>,
    pub t: f64,
    pub t_end: f64,
    pub kind: CovKind,
}

/// `δ C(dt)`.
pub fn covariance_const(drift: &Drift, delta: f64, dt: f64) -> Result<CovMatrix> {
    if !(delta > 0.0) {
        return Err(KolmoError::InvalidInput(format!(
            "delta must be positive, got {delta}"
        )));
    }
    Ok(CovMatrix {
        c: drift.cov_identity(dt)? * delta,
        t: 0.0,
        t_end: dt,
        kind: CovKind::ConstantDelta(delta),
    })
}

/// `C_0(dt)` for the reduced drift `B_0`.
pub fn covariance_reduced(drift: &Drift, dt: f64) -> Result<CovMatrix> {
    Ok(CovMatrix {
        c: drift.reduced()?.cov_identity(dt)?,
        t: 0.0,
        t_end: dt,
        kind: CovKind::Reduced,
    })
}

/// `C^{(s,v)}(t,T) = ∫ₜᵀ e^{(T−τ)B} A^{(s,v)}(τ) e^{(T−τ)B*} dτ`.
pub fn covariance_frozen(
    drift: &Drift,
    coeffs: &CoefficientField,
    quad: &QuadratureConfig,
    s_freeze: f64,
    v: &[f64],
    t: f64,
    t_end: f64,
) -> Result<CovMatrix> {
    let plan = CovPlan::new(drift, coeffs, quad, s_freeze, t, t_end)?;
    Ok(CovMatrix {
        c: plan.eval(coeffs, v)?,
        t,
        t_end,
        kind: CovKind::Frozen {
            s: s_freeze,
            v: v.to_vec(),
        },
    })
}

#[derive(Debug, Clone)]
struct PlanNode {
    r: f64,
    weight: f64,
    /// Row-major `e^{(r − s)B}`, maps the freezing point onto the curve at time `r`.
    curve: Vec<f64>,
    /// For each `a ≤ b < d`: row-major `c_a c_bᵀ (+ c_b c_aᵀ if a < b)`, `c = e^{(T − r)B}` columns.
    outer: Vec<Vec<f64>>,
}

/// Quadrature plan for `C^{(s,v)}(t,T)` at fixed `(s, t, T)` and varying `v`.
///
/// Constant and time-only diffusions give a fixed matrix. Otherwise the
/// integrand is sampled at Gauss–Legendre nodes when the coefficients are
/// smooth in time, and by Richardson-extrapolated composite midpoint rules
/// (`time_panels` and `time_panels / 2` panels) when they are not.
#[derive(Debug, Clone)]
pub struct CovPlan {
    /// Row-major fixed covariance.
    fixed: Option<Vec<f64>>,
    nodes: Vec<PlanNode>,
    n: usize,
    d: usize,
}

impl CovPlan {
    pub fn new(
        drift: &Drift,
        coeffs: &CoefficientField,
        quad: &QuadratureConfig,
        s_freeze: f64,
        t: f64,
        t_end: f64,
    ) -> Result<Self> {
        if !(t_end > t) {
            return Err(KolmoError::InvalidInput(format!(
                "covariance needs t < T, got t = {t}, T = {t_end}"
            )));
        }
        let n = drift.n();
        let d = drift.d();
        let class = coeffs.class();
        if class.a2 == Dependence::Constant {
            let a = coeffs.a2(t, &vec![0.0; n])?;
            return Ok(CovPlan {
                fixed: Some(row_major(&drift.cov_constant(&a, t_end - t)?)),
                nodes: Vec::new(),
                n,
                d,
            });
        }
        if class.a2 == Dependence::TimeOnly && !class.time_smooth {
            return Ok(CovPlan {
                fixed: Some(time_only_rough(drift, coeffs, quad.time_panels, t, t_end)?),
                nodes: Vec::new(),
                n,
                d,
            });
        }
        let len = t_end - t;
        let mut rule: Vec<(f64, f64)> = Vec::new();
        if class.time_smooth {
            let gl = gauss_legendre_unit(quad.cov_nodes)?;
            rule.extend(gl.iter().map(|(x, w)| (t + len * x, len * w)));
        } else {
            let fine = quad.time_panels.max(2) & !1;
            let coarse = fine / 2;
            let hf = len / fine as f64;
            let hc = len / coarse as f64;
            rule.extend((0..fine).map(|i| (t + (i as f64 + 0.5) * hf, 4.0 / 3.0 * hf)));
            rule.extend((0..coarse).map(|i| (t + (i as f64 + 0.5) * hc, -1.0 / 3.0 * hc)));
        }
        let mut nodes = Vec::with_capacity(rule.len());
        for (r, weight) in rule {
            let e = drift.exp(t_end - r)?;
            let mut outer = Vec::with_capacity(d * (d + 1) / 2);
            for a in 0..d {
                for b in a..d {
                    let ca = e.column(a);
                    let cb = e.column(b);
                    let mut m = ca * cb.transpose();
                    if a != b {
                        m += cb * ca.transpose();
                    }
                    outer.push(row_major(&m));
                }
            }
            nodes.push(PlanNode {
                r,
                weight,
                curve: row_major(&drift.exp(r - s_freeze)?),
                outer,
            });
        }
        let mut plan = CovPlan {
            fixed: None,
            nodes,
            n,
            d,
        };
        if class.a2 == Dependence::TimeOnly {
            let mut c = vec![0.0; n * n];
            plan.eval_into(coeffs, &vec![0.0; n], &mut c)?;
            plan.fixed = Some(c);
            plan.nodes.clear();
        }
        Ok(plan)
    }

    /// True when the covariance does not depend on the freezing point.
    pub fn is_fixed(&self) -> bool {
        self.fixed.is_some()
    }

    pub fn eval(&self, coeffs: &CoefficientField, v: &[f64]) -> Result<DMatrix<f64>> {
        let mut c = vec![0.0; self.n * self.n];
        self.eval_into(coeffs, v, &mut c)?;
        Ok(DMatrix::from_row_slice(self.n, self.n, &c))
    }

    /// Writes the row-major covariance for freezing point `v` into `out`.
    pub fn eval_into(&self, coeffs: &CoefficientField, v: &[f64], out: &mut [f64]) -> Result<()> {
        let (n, d) = (self.n, self.d);
        if let Some(c) = &self.fixed {
            out[..n * n].copy_from_slice(c);
            return Ok(());
        }
        out[..n * n].iter_mut().for_each(|o| *o = 0.0);
        let mut x = [0.0f64; 16];
        let mut a = [0.0f64; 100];
        for node in &self.nodes {
            for i in 0..n {
                x[i] = node.curve[i * n..(i + 1) * n]
                    .iter()
                    .zip(v)
                    .map(|(c, v)| c * v)
                    .sum();
            }
            coeffs.a2_into(node.r, &x[..n], &mut a[..d * d])?;
            let mut k = 0;
            for ia in 0..d {
                for ib in ia..d {
                    let coef = node.weight * a[ia * d + ib];
                    if coef != 0.0 {
                        for (o, m) in out.iter_mut().zip(&node.outer[k]) {
                            *o += coef * m;
                        }
                    }
                    k += 1;
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let s = 0.5 * (out[i * n + j] + out[j * n + i]);
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        Ok(())
    }
}

/// `∫ₜᵀ e^{(T−τ)B} diag(A(τ), 0) e^{(T−τ)B*} dτ` for `A` depending on time only,
/// possibly with jumps. Panels are bisected until 8-node Gauss–Legendre on the
/// two halves agrees to `1e-14` of the total with both Gauss–Legendre and Simpson
/// on the whole panel. Simpson samples the endpoints, so a jump hiding between an
/// endpoint and the first Gauss node is still seen; every jump ends up in an
/// interval of negligible weight.
fn time_only_rough(
    drift: &Drift,
    coeffs: &CoefficientField,
    panels: usize,
    t: f64,
    t_end: f64,
) -> Result<Vec<f64>> {
    const MAX_DEPTH: u32 = 40;
    let (n, d) = (drift.n(), drift.d());
    let rule = gauss_legendre_unit(8)?;
    let origin = vec![0.0; n];
    let integrand = |r: f64, out: &mut [f64]| -> Result<()> {
        let a = coeffs.a2(r, &origin)?;
        let e = drift.exp(t_end - r)?;
        let cols = e.columns(0, d);
        let m = cols * a * cols.transpose();
        out.copy_from_slice(&row_major(&m));
        Ok(())
    };
    let mut buf = vec![0.0; n * n];
    let mut gl = |lo: f64, hi: f64, out: &mut [f64]| -> Result<()> {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (x, w) in rule.iter() {
            integrand(lo + (hi - lo) * x, &mut buf)?;
            out.iter_mut()
                .zip(&buf)
                .for_each(|(o, v)| *o += w * (hi - lo) * v);
        }
        Ok(())
    };
    let panels = panels.max(1);
    let h = (t_end - t) / panels as f64;
    let mut stack: Vec<(f64, f64, u32)> = (0..panels)
        .rev()
        .map(|i| {
            (
                t + i as f64 * h,
                if i + 1 == panels {
                    t_end
                } else {
                    t + (i + 1) as f64 * h
                },
                0,
            )
        })
        .collect();
    let mut whole = vec![0.0; n * n];
    let mut left = vec![0.0; n * n];
    let mut right = vec![0.0; n * n];
    let mut simpson = vec![0.0; n * n];
    let mut sample = vec![0.0; n * n];
    let mut pieces: Vec<Vec<f64>> = Vec::new();
    let mut scale = 0.0f64;
    // A first pass over the panels fixes the absolute tolerance.
    for &(lo, hi, _) in &stack {
        gl(lo, hi, &mut whole)?;
        scale = scale.max(whole.iter().map(|v| v.abs()).fold(0.0, f64::max) * panels as f64);
    }
    let tol = 1e-14 * scale.max(f64::MIN_POSITIVE);
    while let Some((lo, hi, depth)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        gl(lo, hi, &mut whole)?;
        gl(lo, mid, &mut left)?;
        gl(mid, hi, &mut right)?;
        simpson.iter_mut().for_each(|o| *o = 0.0);
        for (r, w) in [(lo, 1.0), (mid, 4.0), (hi, 1.0)] {
            integrand(r, &mut sample)?;
            simpson
                .iter_mut()
                .zip(&sample)
                .for_each(|(o, v)| *o += w * (hi - lo) / 6.0 * v);
        }
        let err = (0..n * n)
            .map(|k| {
                let halves = left[k] + right[k];
                (whole[k] - halves).abs().max((simpson[k] - halves).abs())
            })
            .fold(0.0, f64::max);
        if err <= tol || depth >= MAX_DEPTH {
            pieces.push(left.iter().zip(&right).map(|(l, r)| l + r).collect());
        } else {
            stack.push((mid, hi, depth + 1));
            stack.push((lo, mid, depth + 1));
        }
    }
    let mut c: Vec<f64> = (0..n * n)
        .map(|k| pairwise_sum(&pieces.iter().map(|p| p[k]).collect::<Vec<_>>()))
        .collect();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (c[i * n + j] + c[j * n + i]);
            c[i * n + j] = s;
            c[j * n + i] = s;
        }
    }
    Ok(c)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// `g(C, z) = (2π)^{−N/2} (det C)^{−1/2} e^{−½⟨C⁻¹z, z⟩}`.
pub fn gauss_density(c: &DMatrix<f64>, z: &[f64]) -> Result<f64> {
    let f = SpdFactor::new(c, "gauss_density")?;
    let zv = DVector::from_column_slice(z);
    let q = f.quad_form(&zv);
    Ok((-0.5 * (c.nrows() as f64 * LN_2PI + f.logdet + q)).exp())
}

/// Fundamental solution of the constant-coefficient prototype, `g(δC(T−t), y − e^{(T−t)B}x)`.
pub fn gamma_delta(
    drift: &Drift,
    delta: f64,
    t: f64,
    x: &[f64],
    t_end: f64,
    y: &[f64],
) -> Result<f64> {
    let dt = t_end - t;
    drift.check_dt(dt)?;
    let cov = covariance_const(drift, delta, dt)?;
    FrozenKernel::new(drift, cov.c, dt).map(|k| k.value(x, y))
}

/// Spatial derivatives of a Gaussian kernel up to second order.
#[derive(Debug, Clone)]
pub struct KernelDerivs {
    pub value: f64,
    /// `∂_{x_i}`, all `N` coordinates.
    pub grad: Vec<f64>,
    /// `∂_{x_i x_j}`, row-major `N × N`; empty when not requested.
    pub hess: Vec<f64>,
}

/// Gaussian kernel in `x` with pole `y`, the interface the mismatch needs.
pub trait PoleKernel {
    fn dim(&self) -> usize;
    /// `e^{−dt B} y`.
    fn pullback(&self, y: &[f64], out: &mut [f64]);
    /// `H⁻¹`, row-major.
    fn h_inv(&self) -> &[f64];
    /// Writes `w = H⁻¹(e^{−dt B}y − x)` and returns the kernel value.
    fn whiten_into(&self, x: &[f64], y: &[f64], w: &mut [f64]) -> f64;
}

impl PoleKernel for FrozenKernel {
    fn dim(&self) -> usize {
        self.n
    }
    fn pullback(&self, y: &[f64], out: &mut [f64]) {
        FrozenKernel::pullback(self, y, out)
    }
    fn h_inv(&self) -> &[f64] {
        FrozenKernel::h_inv(self)
    }
    fn whiten_into(&self, x: &[f64], y: &[f64], w: &mut [f64]) -> f64 {
        FrozenKernel::whiten_into(self, x, y, w)
    }
}

/// A Gaussian kernel `x ↦ g(C, y − e^{(T−t)B}x)` with fixed covariance.
#[derive(Debug, Clone)]
pub struct FrozenKernel {
    pub n: usize,
    pub dt: f64,
    pub cov: DMatrix<f64>,
    /// `e^{dt B}`.
    pub forward: DMatrix<f64>,
    /// `e^{−dt B}`.
    pub backward: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// `H⁻¹`, row-major.
    h_inv: Vec<f64>,
    /// Row-major `e^{−dt B}` for allocation-free evaluation.
    back: Vec<f64>,
    pub logdet_c: f64,
    log_norm: f64,
}

impl FrozenKernel {
    pub fn new(drift: &Drift, cov: DMatrix<f64>, dt: f64) -> Result<Self> {
        drift.check_dt(dt)?;
        let forward = drift.exp(dt)?;
        let backward = drift.exp(-dt)?;
        Self::from_parts(cov, forward, backward, drift.trace(), dt)
    }

    /// Builds from precomputed `e^{±dt B}`.
    pub fn from_parts(
        cov: DMatrix<f64>,
        forward: DMatrix<f64>,
        backward: DMatrix<f64>,
        trace: f64,
        dt: f64,
    ) -> Result<Self> {
        let n = cov.nrows();
        let mut h = &backward * &cov * backward.transpose();
        symmetrize(&mut h);
        let f = SpdFactor::new(&h, "frozen kernel H")?;
        // det C = det H · det(e^{dt B})² = det H · e^{2 dt tr B}.
        let logdet_c = f.logdet + 2.0 * dt * trace;
        let h_inv = f.inv.transpose().as_slice().to_vec();
        let back = backward.transpose().as_slice().to_vec();
        Ok(FrozenKernel {
            n,
            dt,
            log_norm: -0.5 * (n as f64 * LN_2PI + logdet_c),
            cov,
            forward,
            backward,
            h,
            h_inv,
            back,
            logdet_c,
        })
    }

    /// `e^{dt B} x`.
    pub fn mean(&self, x: &[f64]) -> DVector<f64> {
        &self.forward * DVector::from_column_slice(x)
    }

    /// `e^{−dt B} y`.
    pub fn pullback(&self, y: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.back[i * n..(i + 1) * n];
            out[i] = row.iter().zip(y).map(|(a, b)| a * b).sum();
        }
    }

    /// `H⁻¹`, row-major.
    pub fn h_inv(&self) -> &[f64] {
        &self.h_inv
    }

    /// `w = H⁻¹(e^{−dt B}y − x)` and `⟨H⁻¹ζ, ζ⟩`.
    fn whitened(&self, x: &[f64], y: &[f64], w: &mut [f64]) -> f64 {
        let n = self.n;
        let mut zeta = [0.0f64; 16];
        let zeta = if n <= 16 {
            &mut zeta[..n]
        } else {
            unreachable!("dimension budget is 10")
        };
        self.pullback(y, zeta);
        for i in 0..n {
            zeta[i] -= x[i];
        }
        let mut q = 0.0;
        for i in 0..n {
            let row = &self.h_inv[i * n..(i + 1) * n];
            w[i] = row.iter().zip(zeta.iter()).map(|(a, b)| a * b).sum();
            q += w[i] * zeta[i];
        }
        q
    }

    /// Writes `w = H⁻¹(e^{−dt B}y − x)` into `w` and returns the kernel value;
    /// `∂_i = w_i Γ` and `∂_{ij} = (w_i w_j − H⁻¹_{ij}) Γ`.
    pub fn whiten_into(&self, x: &[f64], y: &[f64], w: &mut [f64]) -> f64 {
        let q = self.whitened(x, y, w);
        (self.log_norm - 0.5 * q).exp()
    }

    pub fn log_value(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut w = [0.0f64; 16];
        let q = self.whitened(x, y, &mut w[..self.n]);
        self.log_norm - 0.5 * q
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        self.log_value(x, y).exp()
    }

    /// Value, gradient and (if `second`) Hessian in `x`.
    pub fn derivs(&self, x: &[f64], y: &[f64], second: bool) -> KernelDerivs {
        let n = self.n;
        let mut w = vec![0.0; n];
        let q = self.whitened(x, y, &mut w);
        let value = (self.log_norm - 0.5 * q).exp();
        let grad = w.iter().map(|wi| wi * value).collect();
        let hess = if second {
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let v = (w[i] * w[j] - self.h_inv[i * n + j]) * value;
                    h[i * n + j] = v;
                    h[j * n + i] = v;
                }
            }
            h
        } else {
            Vec::new()
        };
        KernelDerivs { value, grad, hess }
    }

    /// `∂_x^ν` of the kernel for total order `|ν| ≤ 4`.
    pub fn deriv(&self, x: &[f64], y: &[f64], nu: &MultiIndex) -> Result<f64> {
        if nu.0.len() != self.n {
            return Err(KolmoError::InvalidInput(format!(
                "multi-index has length {}, expected {}",
                nu.0.len(),
                self.n
            )));
        }
        let order = nu.order();
        if order > MAX_DERIV_ORDER {
            return Err(KolmoError::DerivativeOrder(order));
        }
        let mut w = vec![0.0; self.n];
        let q = self.whitened(x, y, &mut w);
        let value = (self.log_norm - 0.5 * q).exp();
        Ok(value * hermite(&nu.coordinates(), &w, &self.h_inv, self.n))
    }
}

/// Multivariate Hermite factor: sum over partial pairings of `idx` of
/// `Π (−H⁻¹_{ab}) Π w_c`.
fn hermite(idx: &[usize], w: &[f64], h_inv: &[f64], n: usize) -> f64 {
    let Some((&i, rest)) = idx.split_first() else {
        return 1.0;
    };
    let mut total = w[i] * hermite(rest, w, h_inv, n);
    for k in 0..rest.len() {
        let mut others = rest.to_vec();
        let j = others.remove(k);
        total -= h_inv[i * n + j] * hermite(&others, w, h_inv, n);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langevin() -> Drift {
        Drift::new(&DMatrix::from_row_slice(2, 2, &[0., 0., 1., 0.]), 1, 1e-10).unwrap()
    }

    fn chain3() -> Drift {
        Drift::new(
            &DMatrix::from_row_slice(3, 3, &[0., 0., 0., 1., 0., 0., 0., 1., 0.]),
            1,
            1e-10,
        )
        .unwrap()
    }

    #[test]
    fn expm_examples() {
        let d = langevin();
        assert_eq!(d.exp(0.0).unwrap(), DMatrix::identity(2, 2));
        for t in [0.3, -2.0, 7.0] {
            let want = DMatrix::from_row_slice(2, 2, &[1., 0., t, 1.]);
            assert!((d.exp(t).unwrap() - want).amax() < 1e-15);
        }
    }

    #[test]
    fn langevin_covariance() {
        let d = langevin();
        let c = covariance_const(&d, 1.0, 1.0).unwrap().c;
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0 / 3.0]);
        assert!((&c - &want).amax() < 1e-15);
        let c2 = covariance_const(&d, 2.0, 1.0).unwrap().c;
        assert!((c2 - want * 2.0).amax() < 1e-15);
        assert!(covariance_const(&d, 1.0, 0.0).is_err());
    }

    #[test]
    fn constant_covariance_matches_quadrature_for_non_nilpotent_drift() {
        let b = DMatrix::from_row_slice(2, 2, &[-0.5, 0.3, 1.0, 0.2]);
        let d = Drift::new(&b, 1, 1e-10).unwrap();
        assert!(!d.is_nilpotent());
        let c = d.cov_identity(0.7).unwrap();
        // Midpoint-free check: derivative of C at t equals e^{tB}Ee^{tB*} (finite difference).
        let h = 1e-5;
        let dc = (d.cov_identity(0.7 + h).unwrap() - d.cov_identity(0.7 - h).unwrap()) / (2.0 * h);
        let e = d.exp(0.7).unwrap();
        let want = e.columns(0, 1) * e.columns(0, 1).transpose();
        assert!((dc - want).amax() < 1e-8);
        assert!(c.symmetric_eigen().eigenvalues.min() > 0.0);
    }

    #[test]
    fn gauss_density_examples() {
        let c = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!((gauss_density(&c, &[0.0]).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-15);
        let c = langevin().cov_identity(1.0).unwrap();
        let g0 = gauss_density(&c, &[0.0, 0.0]).unwrap();
        assert!((g0 - 12f64.sqrt() / (2.0 * std::f64::consts::PI)).abs() < 1e-14);
        assert!(gauss_density(&DMatrix::from_row_slice(1, 1, &[-1.0]), &[0.0]).is_err());
    }

    #[test]
    fn gamma_delta_translation() {
        let d = langevin();
        let v = gamma_delta(&d, 1.0, 0.0, &[0.0, 0.0], 1.0, &[0.0, 0.0]).unwrap();
        assert!((v - 0.551_328_895_421_792).abs() < 1e-12);
        let x = [0.3, -0.2];
        let y = [0.5, 0.7];
        let m = d.exp(1.0).unwrap() * DVector::from_column_slice(&x);
        let a = gamma_delta(&d, 1.3, 0.0, &x, 1.0, &y).unwrap();
        let b = gamma_delta(&d, 1.3, 0.0, &[0.0, 0.0], 1.0, &[y[0] - m[0], y[1] - m[1]]).unwrap();
        assert!((a - b).abs() < 1e-15 * a.max(1.0));
        assert!(matches!(
            gamma_delta(&d, 1.0, 0.0, &x, 1e-9, &y),
            Err(KolmoError::TooShort { .. })
        ));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let d = chain3();
        let c = covariance_const(&d, 1.5, 0.8).unwrap().c;
        let k = FrozenKernel::new(&d, c, 0.8).unwrap();
        let x = [0.2, -0.1, 0.4];
        let y = [0.5, 0.3, -0.2];
        let h = 1e-5;
        let shifted = |i: usize, s: f64| {
            let mut z = x;
            z[i] += s;
            z
        };
        let kd = k.derivs(&x, &y, true);
        for i in 0..3 {
            let fd = (k.value(&shifted(i, h), &y) - k.value(&shifted(i, -h), &y)) / (2.0 * h);
            assert!((fd - kd.grad[i]).abs() < 1e-6 * kd.value.max(1.0));
            assert!(
                (k.deriv(&x, &y, &MultiIndex::axis(3, i, 1)).unwrap() - kd.grad[i]).abs() < 1e-14
            );
            for j in 0..3 {
                let dj = |z: [f64; 3]| k.derivs(&z, &y, false).grad[j];
                let fd = (dj(shifted(i, h)) - dj(shifted(i, -h))) / (2.0 * h);
                assert!((fd - kd.hess[i * 3 + j]).abs() < 1e-5 * kd.value.max(1.0));
            }
        }
        // Fourth order against a central difference of the third.
        let third = |z: [f64; 3]| k.deriv(&z, &y, &MultiIndex(vec![2, 1, 0])).unwrap();
        let fd = (third(shifted(2, h)) - third(shifted(2, -h))) / (2.0 * h);
        let exact = k.deriv(&x, &y, &MultiIndex(vec![2, 1, 1])).unwrap();
        assert!((fd - exact).abs() < 1e-4 * exact.abs().max(1.0));
        assert!(matches!(
            k.deriv(&x, &y, &MultiIndex(vec![3, 2, 0])),
            Err(KolmoError::DerivativeOrder(5))
        ));
    }

    #[test]
    fn odd_derivative_vanishes_at_mean() {
        let d = langevin();
        let c = d.cov_identity(0.5).unwrap();
        let k = FrozenKernel::new(&d, c, 0.5).unwrap();
        let y = [0.4, -0.3];
        let mut x = [0.0; 2];
        k.pullback(&y, &mut x);
        assert!(k.deriv(&x, &y, &MultiIndex::axis(2, 0, 1)).unwrap().abs() < 1e-15);
        assert!(k.deriv(&x, &y, &MultiIndex::axis(2, 0, 3)).unwrap().abs() < 1e-14);
    }
}
