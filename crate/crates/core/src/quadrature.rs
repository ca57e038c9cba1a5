//! Quadrature rules and interpolation nodes.
//!
//! Node generation is delegated to `gauss-quad`; this module adapts the rules to
//! the shapes the solvers need (unit interval, standard normal expectation,
//! tensor cubature) and adds the endpoint-singularity substitution.

use gauss_quad::{GaussHermite, GaussLegendre};

use crate::config::SpaceRule;
use crate::error::{KolmoError, Result};

/// A one-dimensional rule: `∫ f ≈ Σ w_i f(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Gauss–Legendre rule on `[0, 1]`, nodes ascending.
pub fn gauss_legendre_unit(n: usize) -> Result<Rule> {
    if n == 0 {
        return Err(KolmoError::InvalidInput(
            "Gauss-Legendre rule needs at least one node".into(),
        ));
    }
    if n == 1 {
        return Ok(Rule {
            nodes: vec![0.5],
            weights: vec![1.0],
        });
    }
    let gl = GaussLegendre::new(n).map_err(|e| KolmoError::Quadrature(e.to_string()))?;
    let mut pairs: Vec<(f64, f64)> = gl
        .iter()
        .map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    })
}

/// Gauss–Hermite rule for the standard normal: `E[f(Z)] ≈ Σ w_i f(z_i)`, `Σ w_i = 1`.
pub fn gauss_hermite_normal(n: usize) -> Result<Rule> {
    if n == 0 {
        return Err(KolmoError::InvalidInput(
            "Gauss-Hermite rule needs at least one node".into(),
        ));
    }
    if n == 1 {
        return Ok(Rule {
            nodes: vec![0.0],
            weights: vec![1.0],
        });
    }
    let gh = GaussHermite::new(n).map_err(|e| KolmoError::Quadrature(e.to_string()))?;
    let norm = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = gh
        .iter()
        .map(|&(x, w)| (x * std::f64::consts::SQRT_2, w / norm))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Renormalize so that constants integrate exactly.
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
    })
}

/// Tensor-product Gauss–Hermite cubature for the standard normal on `R^dim`.
#[derive(Debug, Clone)]
pub struct NormalCubature {
    pub dim: usize,
    /// Row-major `len × dim` node coordinates.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalCubature {
    pub fn new(dim: usize, order: usize) -> Result<Self> {
        let rule = gauss_hermite_normal(order)?;
        let count = order.pow(dim as u32);
        let mut points = Vec::with_capacity(count * dim);
        let mut weights = Vec::with_capacity(count);
        let mut idx = vec![0usize; dim];
        for _ in 0..count {
            let mut w = 1.0;
            for &i in &idx {
                points.push(rule.nodes[i]);
                w *= rule.weights[i];
            }
            weights.push(w);
            for slot in idx.iter_mut().rev() {
                *slot += 1;
                if *slot < order {
                    break;
                }
                *slot = 0;
            }
        }
        Ok(NormalCubature {
            dim,
            points,
            weights,
        })
    }

    /// Smolyak combination of Gauss–Hermite rules with `2i − 1` nodes at level `i`.
    ///
    /// Exact for polynomials of total degree up to `2·level − 1`. Points shared by
    /// several tensor rules are kept separately, so weights may be negative.
    pub fn sparse(dim: usize, level: usize) -> Result<Self> {
        if level == 0 || dim == 0 {
            return Err(KolmoError::Quadrature(
                "sparse grid needs dim >= 1 and level >= 1".into(),
            ));
        }
        let rules: Vec<Rule> = (1..=level)
            .map(|i| gauss_hermite_normal(2 * i - 1))
            .collect::<Result<_>>()?;
        let q = level + dim - 1;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut idx = vec![1usize; dim];
        loop {
            let total: usize = idx.iter().sum();
            if total + dim > q && total <= q {
                let k = q - total;
                let coef = if k.is_multiple_of(2) { 1.0 } else { -1.0 } * binomial(dim - 1, k);
                let sizes: Vec<usize> = idx.iter().map(|&i| rules[i - 1].len()).collect();
                let mut pos = vec![0usize; dim];
                'tensor: loop {
                    let mut w = coef;
                    for (a, &i) in idx.iter().enumerate() {
                        points.push(rules[i - 1].nodes[pos[a]]);
                        w *= rules[i - 1].weights[pos[a]];
                    }
                    weights.push(w);
                    for a in (0..dim).rev() {
                        pos[a] += 1;
                        if pos[a] < sizes[a] {
                            continue 'tensor;
                        }
                        pos[a] = 0;
                    }
                    break;
                }
            }
            let mut a = dim;
            loop {
                if a == 0 {
                    return Ok(NormalCubature {
                        dim,
                        points,
                        weights,
                    });
                }
                a -= 1;
                idx[a] += 1;
                if idx.iter().sum::<usize>() <= q {
                    break;
                }
                idx[a] = 1;
            }
        }
    }

    pub fn from_config(dim: usize, rule: SpaceRule) -> Result<Self> {
        match rule {
            SpaceRule::GaussHermite(n) => Self::new(dim, n),
            SpaceRule::SparseGrid(l) => Self::sparse(dim, l),
        }
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

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Rule on `(0, 1)` for integrands with `v^{γ-1}(1-v)^{γ-1}` endpoint behaviour.
///
/// Uses `v(u) = u^q / (u^q + (1-u)^q)` with `q = 1/γ`, which turns both endpoint
/// singularities into bounded integrands, followed by Gauss–Legendre in `u`.
pub fn endpoint_rule(n: usize, gamma: f64) -> Result<Rule> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(KolmoError::InvalidInput(format!(
            "singularity exponent must lie in (0, 1], got {gamma}"
        )));
    }
    let q = 1.0 / gamma;
    let base = gauss_legendre_unit(n)?;
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for (u, w) in base.iter() {
        let a = u.powf(q);
        let b = (1.0 - u).powf(q);
        let s = a + b;
        nodes.push(a / s);
        let dv = q * u.powf(q - 1.0) * (1.0 - u).powf(q - 1.0) / (s * s);
        weights.push(w * dv);
    }
    Ok(Rule { nodes, weights })
}

/// Chebyshev points of the second kind on `[-half, half]`, ascending.
pub fn chebyshev_points(n: usize, half: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|j| -half * (std::f64::consts::PI * j as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Barycentric interpolation weights for Chebyshev points of the second kind.
///
/// Writes into `out` the coefficients `ℓ_j(x)` so that `p(x) = Σ ℓ_j f_j`.
pub fn chebyshev_barycentric(points: &[f64], x: f64, out: &mut [f64]) {
    let n = points.len();
    if n == 1 {
        out[0] = 1.0;
        return;
    }
    let mut denom = 0.0;
    for j in 0..n {
        let diff = x - points[j];
        if diff == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            out[j] = 1.0;
            return;
        }
        let mut lam = if j % 2 == 0 { 1.0 } else { -1.0 };
        if j == 0 || j == n - 1 {
            lam *= 0.5;
        }
        out[j] = lam / diff;
        denom += out[j];
    }
    for v in out.iter_mut() {
        *v /= denom;
    }
}

/// Pairwise summation; the fixed recursion order makes reductions reproducible.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if values.len() <= LEAF {
        let mut s = 0.0;
        for v in values {
            s += v;
        }
        return s;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Adaptive Gauss–Legendre integration of a vector-valued integrand on `[a, b]`.
///
/// Splits an interval until the 64-node estimate and the sum over its two halves
/// agree to `tol` (relative to the running magnitude).
pub fn adaptive_legendre<F>(a: f64, b: f64, len: usize, tol: f64, f: &mut F) -> Result<Vec<f64>>
where
    F: FnMut(f64, &mut [f64]) -> Result<()>,
{
    let rule = gauss_legendre_unit(64)?;
    let mut buf = vec![0.0; len];
    let mut integrate = |lo: f64, hi: f64, out: &mut [f64]| -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        let h = hi - lo;
        for (x, w) in rule.iter() {
            f(lo + h * x, &mut buf)?;
            for (o, v) in out.iter_mut().zip(&buf) {
                *o += w * h * v;
            }
        }
        Ok(())
    };
    let mut total = vec![0.0; len];
    let mut stack = vec![(a, b, 0usize)];
    let mut whole = vec![0.0; len];
    let mut left = vec![0.0; len];
    let mut right = vec![0.0; len];
    while let Some((lo, hi, depth)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        integrate(lo, hi, &mut whole)?;
        integrate(lo, mid, &mut left)?;
        integrate(mid, hi, &mut right)?;
        let scale = whole.iter().map(|v| v.abs()).fold(1e-300, f64::max);
        let err = whole
            .iter()
            .zip(left.iter().zip(&right))
            .map(|(w, (l, r))| (w - l - r).abs())
            .fold(0.0, f64::max);
        if err <= tol * scale || depth >= 30 {
            if depth >= 30 && err > tol * scale {
                return Err(KolmoError::Quadrature(format!(
                    "adaptive Gauss-Legendre stalled on [{lo}, {hi}]"
                )));
            }
            for (t, (l, r)) in total.iter_mut().zip(left.iter().zip(&right)) {
                *t += l + r;
            }
        } else {
            stack.push((mid, hi, depth + 1));
            stack.push((lo, mid, depth + 1));
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials() {
        let r = gauss_legendre_unit(5).unwrap();
        let v: f64 = r.iter().map(|(x, w)| w * x.powi(9)).sum();
        assert!((v - 0.1).abs() < 1e-15);
    }

    #[test]
    fn hermite_moments_match_standard_normal() {
        let r = gauss_hermite_normal(10).unwrap();
        let m0: f64 = r.weights.iter().sum();
        let m2: f64 = r.iter().map(|(x, w)| w * x * x).sum();
        let m4: f64 = r.iter().map(|(x, w)| w * x.powi(4)).sum();
        assert!((m0 - 1.0).abs() < 1e-14);
        assert!((m2 - 1.0).abs() < 1e-12);
        assert!((m4 - 3.0).abs() < 1e-11);
    }

    #[test]
    fn sparse_grid_matches_normal_moments() {
        // E[x^4 y^2] = 3 and E[x^2 y^2 z^2] = 1 for a standard normal.
        let g = NormalCubature::sparse(2, 4).unwrap();
        let m: f64 = (0..g.len())
            .map(|k| g.weights[k] * g.point(k)[0].powi(4) * g.point(k)[1].powi(2))
            .sum();
        assert!((m - 3.0).abs() < 1e-10, "{m}");
        let g3 = NormalCubature::sparse(3, 4).unwrap();
        let m0: f64 = g3.weights.iter().sum();
        let m: f64 = (0..g3.len())
            .map(|k| g3.weights[k] * g3.point(k).iter().map(|x| x * x).product::<f64>())
            .sum();
        assert!(
            (m0 - 1.0).abs() < 1e-12 && (m - 1.0).abs() < 1e-10,
            "{m0} {m}"
        );
        assert!(g3.len() < NormalCubature::new(3, 7).unwrap().len());
    }

    #[test]
    fn endpoint_rule_handles_beta_singularity() {
        // ∫_0^1 v^{-1/2} (1-v)^{-1/2} dv = π
        let r = endpoint_rule(16, 0.5).unwrap();
        let v: f64 = r.iter().map(|(x, w)| w / (x * (1.0 - x)).sqrt()).sum();
        assert!((v - std::f64::consts::PI).abs() < 1e-10, "{v}");
    }

    #[test]
    fn chebyshev_interpolation_is_exact_for_low_degree() {
        let pts = chebyshev_points(7, 3.0);
        let vals: Vec<f64> = pts.iter().map(|x| x.powi(5) - 2.0 * x).collect();
        let mut w = vec![0.0; 7];
        chebyshev_barycentric(&pts, 1.3, &mut w);
        let p: f64 = w.iter().zip(&vals).map(|(a, b)| a * b).sum();
        assert!((p - (1.3f64.powi(5) - 2.6)).abs() < 1e-12);
    }

    #[test]
    fn pairwise_sum_matches_naive_for_small_inputs() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 4950.0);
    }
}
