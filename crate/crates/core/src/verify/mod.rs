//! Verification harness: identities, Gaussian bounds, Hölder estimators,
//! strong-Lie residuals and a Monte Carlo oracle.
//!
//! Constants are fitted, never asserted. A check passes when its identity holds
//! to tolerance, or when its fitted scaling exponents match and its fitted
//! constants are stable under grid refinement.

mod checks;
mod holder;
mod mc;

pub use checks::{
    check_chapman_kolmogorov, check_expm_block_orders, check_gaussian_bounds, check_mass,
    check_residual, residual_along_y, BoundGrid, BoundLevel, ResidualInputs,
};
pub use holder::{
    blowup_check, holder_seminorm, HolderDomain, HolderEstimate, Jet, Observable, ScalarField,
    SeminormKind,
};
pub use mc::{mc_oracle, McOptions, McResult};

use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl Status {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

/// Outcome of one check with the constants it measured.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub check_name: String,
    pub status: Status,
    pub measured: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub samples: usize,
    pub notes: String,
}

impl VerificationReport {
    pub fn new(name: &str, status: Status, tolerance: f64, samples: usize) -> Self {
        VerificationReport {
            check_name: name.into(),
            status,
            measured: BTreeMap::new(),
            tolerance,
            samples,
            notes: String::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.measured.insert(key.into(), value);
        self
    }

    pub fn note(mut self, text: impl Into<String>) -> Self {
        self.notes = text.into();
        self
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

/// Least-squares slope of `ln y` against `ln x`; `None` for fewer than two
/// usable points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (u, v)| (a + u, b + v));
    let (mx, my) = (sx / m, sy / m);
    let sxx: f64 = pts.iter().map(|(u, _)| (u - mx) * (u - mx)).sum();
    let sxy: f64 = pts.iter().map(|(u, v)| (u - mx) * (v - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `count` dyadic scales `top, top/2, …`, ascending.
pub fn dyadic_scales(top: f64, count: usize) -> Vec<f64> {
    (0..count)
        .rev()
        .map(|k| top / f64::powi(2.0, k as i32))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = dyadic_scales(1.0, 5);
        assert_eq!(x[0], 1.0 / 16.0);
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v.powf(-1.5)).collect();
        assert!((loglog_slope(&x, &y).unwrap() + 1.5).abs() < 1e-12);
        assert_eq!(loglog_slope(&[1.0], &[2.0]), None);
    }

    #[test]
    fn report_serializes_with_lowercase_status() {
        let r = VerificationReport::new("mass", Status::Pass, 1e-4, 10).with("mass", 1.0);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["status"], "pass");
        assert_eq!(v["measured"]["mass"], 1.0);
    }
}
