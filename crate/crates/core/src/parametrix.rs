//! The time-dependent parametrix `P(t,x;T,y) = Γ^{(T,y)}(t,x;T,y)`: a Gaussian
//! whose diffusion matrix is frozen along the integral curve `τ ↦ e^{(τ−T)B}y`
//! of `Y` through the pole, keeping the full time dependence.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::coeffs::CoefficientField;
use crate::config::Model;
use crate::error::{KolmoError, Result};
use crate::kernel::{CovPlan, Drift, FrozenKernel, PoleKernel};

/// Value and spatial derivatives of the parametrix at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametrixEval {
    pub value: f64,
    /// `∂_{x_i}P`, `i < d`.
    pub grad: Vec<f64>,
    /// `∂_{x_i x_j}P`, `i, j < d`, row-major.
    pub hess: Vec<f64>,
    /// `∂_{x_j}P`, `j < d + d_1`.
    pub extended_grad: Vec<f64>,
}

/// `½ Σ_{i,j<d} a_ij(t, e^{(t−s)B}v) hess_ij`.
pub fn frozen_apply(
    drift: &Drift,
    coeffs: &CoefficientField,
    s_freeze: f64,
    v: &[f64],
    t: f64,
    eval: &ParametrixEval,
) -> Result<f64> {
    let curve = drift.exp(t - s_freeze)? * nalgebra::DVector::from_column_slice(v);
    let d = coeffs.d;
    let mut a = vec![0.0; d * d];
    coeffs.a2_into(t, curve.as_slice(), &mut a)?;
    Ok(0.5 * a.iter().zip(&eval.hess).map(|(a, h)| a * h).sum::<f64>())
}

/// Gaussian kernel of the parametrix with pole `(T, y)` on `[t, T]`.
pub fn parametrix_kernel(model: &Model, t: f64, t_end: f64, y: &[f64]) -> Result<FrozenKernel> {
    model.drift.check_dt(t_end - t)?;
    kernel_unchecked(model, t, t_end, y)
}

/// As [`parametrix_kernel`] without the `min_dt` floor; quadrature nodes inside
/// the Volterra integrals may sit closer to the pole than user-facing points.
pub(crate) fn kernel_unchecked(
    model: &Model,
    t: f64,
    t_end: f64,
    y: &[f64],
) -> Result<FrozenKernel> {
    let dt = t_end - t;
    let plan = CovPlan::new(&model.drift, &model.coeffs, &model.quad, t_end, t, t_end)?;
    let drift = &model.drift;
    FrozenKernel::from_parts(
        plan.eval(&model.coeffs, y)?,
        drift.exp(dt)?,
        drift.exp(-dt)?,
        drift.trace(),
        dt,
    )
}

pub fn parametrix_eval(
    model: &Model,
    t: f64,
    x: &[f64],
    t_end: f64,
    y: &[f64],
    derivs: bool,
) -> Result<ParametrixEval> {
    let k = parametrix_kernel(model, t, t_end, y)?;
    Ok(eval_kernel(model, &k, x, y, derivs))
}

/// Value and requested derivatives of a prepared kernel.
pub fn eval_kernel(
    model: &Model,
    k: &FrozenKernel,
    x: &[f64],
    y: &[f64],
    derivs: bool,
) -> ParametrixEval {
    let s = model.drift.structure();
    let d = s.d;
    if !derivs {
        return ParametrixEval {
            value: k.value(x, y),
            grad: Vec::new(),
            hess: Vec::new(),
            extended_grad: Vec::new(),
        };
    }
    let n = s.n;
    let kd = k.derivs(x, y, true);
    let ext = (d + s.dims.get(1).copied().unwrap_or(0)).min(n);
    let mut hess = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            hess[i * d + j] = kd.hess[i * n + j];
        }
    }
    ParametrixEval {
        value: kd.value,
        grad: kd.grad[..d].to_vec(),
        hess,
        extended_grad: kd.grad[..ext].to_vec(),
    }
}

/// `(𝒜 − 𝒜^{(T,y)})P` at `(t, x)` from a prepared parametrix kernel for `[t, T]`.
///
/// `w` is scratch of length `N`.
pub fn mismatch_with_kernel<K: PoleKernel>(
    coeffs: &CoefficientField,
    k: &K,
    t: f64,
    x: &[f64],
    y: &[f64],
    w: &mut [f64],
) -> Result<f64> {
    let (factor, value) = mismatch_factor(coeffs, k, t, x, y, w)?;
    Ok(factor * value)
}

/// The mismatch as `(factor, P)` with `φ_1 = factor · P`.
pub fn mismatch_factor<K: PoleKernel>(
    coeffs: &CoefficientField,
    k: &K,
    t: f64,
    x: &[f64],
    y: &[f64],
    w: &mut [f64],
) -> Result<(f64, f64)> {
    let n = k.dim();
    let d = coeffs.d;
    let value = k.whiten_into(x, y, w);
    let class = coeffs.class();
    let mut total = 0.0;
    if class.a2 == crate::expr::Dependence::SpaceTime {
        let mut frozen_x = [0.0f64; 16];
        k.pullback(y, &mut frozen_x[..n]);
        let mut a = [0.0f64; 100];
        let mut af = [0.0f64; 100];
        coeffs.a2_into(t, x, &mut a[..d * d])?;
        coeffs.a2_into(t, &frozen_x[..n], &mut af[..d * d])?;
        let h_inv = k.h_inv();
        for i in 0..d {
            for j in 0..d {
                let diff = a[i * d + j] - af[i * d + j];
                if diff != 0.0 {
                    total += 0.5 * diff * (w[i] * w[j] - h_inv[i * n + j]);
                }
            }
        }
    }
    if !class.lower_order_zero {
        let mut a1 = [0.0f64; 10];
        coeffs.a1_into(t, x, &mut a1[..d])?;
        for i in 0..d {
            total += a1[i] * w[i];
        }
        total += coeffs.a0(t, x)?;
    }
    Ok((total, value))
}

/// `φ_1(t,x;T,y) = (𝒜 − 𝒜^{(T,y)})P(t,x;T,y)`, lower-order terms included.
pub fn parametrix_mismatch(model: &Model, t: f64, x: &[f64], t_end: f64, y: &[f64]) -> Result<f64> {
    let k = parametrix_kernel(model, t, t_end, y)?;
    let mut w = vec![0.0; model.n()];
    mismatch_with_kernel(&model.coeffs, &k, t, x, y, &mut w)
}

/// True when `φ_1 ≡ 0`: diffusion independent of `x` and no lower-order terms.
pub fn mismatch_vanishes(coeffs: &CoefficientField) -> bool {
    let c = coeffs.class();
    c.a2 != crate::expr::Dependence::SpaceTime && c.lower_order_zero
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    t: u64,
    t_end: u64,
    y: Vec<u64>,
}

/// Memo of parametrix kernels keyed by `(T, y, t)`, bounded in bytes.
///
/// Cached kernels are bit-identical to recomputed ones, so eviction never
/// changes results. The budget defaults to `KOLMO_CACHE_MB` (512 MB if unset).
pub struct KernelCache {
    map: Mutex<(HashMap<CacheKey, Arc<FrozenKernel>>, usize)>,
    budget: usize,
}

impl Default for KernelCache {
    fn default() -> Self {
        Self::new(cache_budget_bytes())
    }
}

/// Byte budget from `KOLMO_CACHE_MB`.
pub fn cache_budget_bytes() -> usize {
    std::env::var("KOLMO_CACHE_MB")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(512)
        * 1024
        * 1024
}

impl KernelCache {
    pub fn new(budget_bytes: usize) -> Self {
        KernelCache {
            map: Mutex::new((HashMap::new(), 0)),
            budget: budget_bytes,
        }
    }

    pub fn len(&self) -> usize {
        self.map.lock().0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_build(
        &self,
        model: &Model,
        t: f64,
        t_end: f64,
        y: &[f64],
    ) -> Result<Arc<FrozenKernel>> {
        let key = CacheKey {
            t: t.to_bits(),
            t_end: t_end.to_bits(),
            y: y.iter().map(|v| v.to_bits()).collect(),
        };
        if let Some(k) = self.map.lock().0.get(&key) {
            return Ok(k.clone());
        }
        let k = Arc::new(kernel_unchecked(model, t, t_end, y)?);
        let n = k.n;
        let size = 8 * (7 * n * n + 3 * n) + 128;
        if size > self.budget {
            return Ok(k);
        }
        let mut guard = self.map.lock();
        if guard.1 + size > self.budget {
            guard.0.clear();
            guard.1 = 0;
        }
        guard.1 += size;
        guard.0.insert(key, k.clone());
        Ok(k)
    }
}

impl std::fmt::Debug for KernelCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelCache")
            .field("entries", &self.len())
            .field("budget", &self.budget)
            .finish()
    }
}

/// Rejects points outside `0 ≤ t < T ≤ T̄`.
pub fn check_interval(model: &Model, t: f64, t_end: f64) -> Result<()> {
    if !(t >= 0.0 && t < t_end && t_end <= model.coeffs.t_bar * (1.0 + 1e-12)) {
        return Err(KolmoError::InvalidInput(format!(
            "need 0 <= t < T <= T_bar = {}, got t = {t}, T = {t_end}",
            model.coeffs.t_bar
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::QuadratureConfig;
    use crate::kernel::gamma_delta;
    use nalgebra::DMatrix;

    fn model(a2: &str, a1: &str, a0: &str) -> Model {
        let drift =
            Drift::new(&DMatrix::from_row_slice(2, 2, &[0., 0., 1., 0.]), 1, 1e-10).unwrap();
        let c = CoefficientField::from_sources(
            2,
            1,
            &[vec![a2.into()]],
            &[a1.into()],
            a0,
            2.0,
            1.0,
            1.0,
        )
        .unwrap();
        Model::new(drift, c, QuadratureConfig::default()).unwrap()
    }

    #[test]
    fn constant_coefficients_reduce_to_gamma_delta() {
        let m = model("1.5", "0", "0");
        let (x, y) = ([0.1, -0.3], [0.4, 0.2]);
        let p = parametrix_eval(&m, 0.2, &x, 0.9, &y, false).unwrap().value;
        let g = gamma_delta(&m.drift, 1.5, 0.2, &x, 0.9, &y).unwrap();
        assert!((p - g).abs() <= 1e-12 * g);
        assert_eq!(parametrix_mismatch(&m, 0.2, &x, 0.9, &y).unwrap(), 0.0);
    }

    #[test]
    fn time_only_mismatch_is_exactly_zero() {
        let m = model("1 + 0.5*step(t - 0.5)", "0", "0");
        for (t, x) in [(0.0, [0.3, 0.1]), (0.6, [-1.0, 2.0])] {
            assert_eq!(
                parametrix_mismatch(&m, t, &x, 1.0, &[0.2, 0.2]).unwrap(),
                0.0
            );
        }
        assert!(mismatch_vanishes(&m.coeffs));
    }

    #[test]
    fn frozen_apply_examples() {
        let m = model("1 + 0.5*sin(x2)", "0", "0");
        let e = ParametrixEval {
            value: 1.0,
            grad: vec![0.0],
            hess: vec![0.8],
            extended_grad: vec![0.0, 0.0],
        };
        // The curve through the origin stays at the origin, so a_11 = 1.
        let v = frozen_apply(&m.drift, &m.coeffs, 0.0, &[0.0, 0.0], 0.7, &e).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
        let zero = ParametrixEval {
            hess: vec![0.0],
            ..e
        };
        assert_eq!(
            frozen_apply(&m.drift, &m.coeffs, 0.0, &[1.0, 1.0], 0.3, &zero).unwrap(),
            0.0
        );
    }

    #[test]
    fn mismatch_includes_lower_order_terms() {
        let m = model("1 + 0.25*sin(x2)", "0.3", "0.5");
        let (t, x, te, y) = (0.1, [0.2, 0.5], 0.8, [0.1, 0.9]);
        let pe = parametrix_eval(&m, t, &x, te, &y, true).unwrap();
        let k = parametrix_kernel(&m, t, te, &y).unwrap();
        let mut fx = [0.0; 2];
        k.pullback(&y, &mut fx);
        let a = 1.0 + 0.25 * x[1].sin();
        let af = 1.0 + 0.25 * fx[1].sin();
        let want = 0.5 * (a - af) * pe.hess[0] + 0.3 * pe.grad[0] + 0.5 * pe.value;
        let got = parametrix_mismatch(&m, t, &x, te, &y).unwrap();
        assert!((got - want).abs() < 1e-13 * want.abs().max(1e-300));
    }

    #[test]
    fn cache_returns_identical_kernels() {
        let m = model("1 + 0.25*sin(x2)", "0", "0");
        let cache = KernelCache::new(1 << 20);
        let a = cache.get_or_build(&m, 0.1, 0.6, &[0.3, 0.4]).unwrap();
        let b = cache.get_or_build(&m, 0.1, 0.6, &[0.3, 0.4]).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let tiny = KernelCache::new(10);
        let c = tiny.get_or_build(&m, 0.1, 0.6, &[0.3, 0.4]).unwrap();
        assert_eq!(
            c.value(&[0.0, 0.0], &[0.3, 0.4]),
            a.value(&[0.0, 0.0], &[0.3, 0.4])
        );
        assert!(tiny.is_empty());
    }
}
