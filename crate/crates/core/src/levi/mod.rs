//! Levi iteration for the fundamental solution `p = P + Φ`.
//!
//! `φ = Σ_k φ_k` solves the Volterra equation built from the mismatch
//! `φ_1 = (𝒜 − 𝒜^{(T,y)})P` and `φ_{k+1}(t,x) = ∫∫ φ_1(t,x;τ,η) φ_k(τ,η) dη dτ`,
//! and `Φ = ∫∫ P(t,x;τ,η) φ(τ,η;T,y) dη dτ`.
//!
//! Two formulations share the same discretization:
//!
//! * [`BackwardSeries`] fixes the pole `(T, y)` and stores `φ_k` on levels in
//!   `T − τ`. It gives `p` and its `x`-derivatives at any `(t, x)`.
//! * [`ForwardSeries`] fixes the source `(t, x)` and stores
//!   `G_k = ∫∫ P(t,x;τ,η) φ_k(τ,η;·,·)` on levels in `τ − t`. It gives `p` at any
//!   `(T, y)` and is the natural route for integrals over `y`.
//!
//! Time integrals use the endpoint substitution for `v^{α/2−1}(1−v)^{α/2−1}`;
//! spatial integrals use Gauss–Hermite under the product of the kernel envelope
//! and the level envelope.

mod backward;
mod forward;
mod grid;
mod small;

pub use backward::BackwardSeries;
pub use forward::ForwardSeries;

use serde::Serialize;

use crate::config::Model;
use crate::error::{KolmoError, Result};
use crate::parametrix::cache_budget_bytes;

/// Largest `N` for which the iteration is supported.
pub const MAX_LEVI_DIM: usize = small::MAXN;

/// Convergence record of a series build.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesReport {
    /// Number of terms kept (`1` when the mismatch vanishes identically).
    pub truncation_k: usize,
    /// Geometric tail estimate from the last measured ratio, relative to the first term.
    pub est_tail: f64,
    /// Weighted sup norms of the terms on the level nodes.
    pub term_norms: Vec<f64>,
    /// `κ` in `|φ_1| ≤ κ s^{α/2−1} Γ^{μ+ε}`, fitted on the level nodes.
    pub kappa: Option<f64>,
    /// Tail of the analytic majorant with the fitted `κ`, relative to its first term.
    pub analytic_tail: Option<f64>,
    /// True when the inner quadrature was kept in memory between iterations.
    pub cached_entries: bool,
}

impl SeriesReport {
    pub(crate) fn vanishing() -> Self {
        SeriesReport {
            truncation_k: 1,
            est_tail: 0.0,
            term_norms: vec![0.0],
            kappa: Some(0.0),
            analytic_tail: Some(0.0),
            cached_entries: false,
        }
    }
}

/// `‖φ_K‖ r / (1 − r) / ‖φ_1‖` with `r = ‖φ_K‖ / ‖φ_{K−1}‖`; `None` while the terms do not decrease.
pub(crate) fn tail_estimate(norms: &[f64]) -> Option<f64> {
    let k = norms.len();
    if k < 2 || !(norms[0] > 0.0) {
        return None;
    }
    let (prev, last) = (norms[k - 2], norms[k - 1]);
    if last == 0.0 {
        return Some(0.0);
    }
    let r = last / prev;
    (r < 1.0).then(|| last * r / (1.0 - r) / norms[0])
}

/// `Σ_{k>K} c_k / c_1` for `c_k = (κ Γ(α/2))^k s^{kα/2} / Γ(kα/2)`.
pub(crate) fn analytic_tail(kappa: f64, alpha: f64, s: f64, terms: usize) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let log_c = |k: usize| {
        let k = k as f64;
        k * (kappa.ln() + ln_gamma(alpha / 2.0)) + k * alpha / 2.0 * s.ln()
            - ln_gamma(k * alpha / 2.0)
    };
    let first = log_c(1);
    (terms + 1..terms + 200)
        .map(|k| (log_c(k) - first).exp())
        .sum()
}

pub(crate) fn check_dimension(model: &Model) -> Result<()> {
    if model.n() > MAX_LEVI_DIM {
        return Err(KolmoError::DimensionBudget(format!(
            "Levi iteration supports N <= {MAX_LEVI_DIM}, got N = {}",
            model.n()
        )));
    }
    Ok(())
}

/// Whether `entries` inner-quadrature records of `floats` numbers fit the cache budget.
pub(crate) fn fits_budget(entries: usize, floats: usize) -> bool {
    entries.saturating_mul(floats).saturating_mul(8) <= cache_budget_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_estimate_is_geometric() {
        assert_eq!(tail_estimate(&[1.0]), None);
        assert_eq!(tail_estimate(&[1.0, 2.0]), None);
        let t = tail_estimate(&[1.0, 0.1, 0.01]).unwrap();
        assert!((t - 0.01 * 0.1 / 0.9).abs() < 1e-15);
        assert_eq!(tail_estimate(&[1.0, 0.1, 0.0]), Some(0.0));
    }

    #[test]
    fn analytic_tail_shrinks_with_terms() {
        let a = analytic_tail(0.5, 1.0, 1.0, 2);
        let b = analytic_tail(0.5, 1.0, 1.0, 4);
        assert!(b < a && b > 0.0);
    }
}
