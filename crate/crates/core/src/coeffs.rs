//! Coefficient fields `a_ij`, `a_i`, `a` of the operator
//! `𝒜 = ½ Σ a_ij ∂_{x_i x_j} + Σ a_i ∂_{x_i} + a` and their sampling validators.
//!
//! Every field is an [`Expr`] in `(t, x)`; built-in families are just
//! constructors producing expressions. Evaluation is pure, so fields can be
//! shared across worker threads.

use nalgebra::DMatrix;

use crate::error::{KolmoError, Result};
use crate::expr::{Dependence, Expr};
use crate::sampling::{Halton, PairSampler};
use crate::structure::BlockStructure;

/// Structural facts about a field that select the quadrature used for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoeffClass {
    /// Strongest `(t, x)` dependence among the `a_ij`.
    pub a2: Dependence,
    /// No `a_ij`, `a_i`, `a` is rough in `t`.
    pub time_smooth: bool,
    /// `a_i ≡ 0` and `a ≡ 0` syntactically.
    pub lower_order_zero: bool,
}

#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub n: usize,
    pub d: usize,
    /// Row-major `d × d`.
    a2: Vec<Expr>,
    a1: Vec<Expr>,
    a0: Expr,
    pub mu: f64,
    pub alpha: f64,
    pub t_bar: f64,
    /// Declared `L^∞(C_B^α)` bounds, in the order `a_ij (i ≤ j)`, `a_i`, `a`.
    pub holder_norms: Option<Vec<f64>>,
    class: CoeffClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HolderModulus {
    pub name: String,
    pub value: f64,
}

impl CoefficientField {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        d: usize,
        a2: Vec<Expr>,
        a1: Vec<Expr>,
        a0: Expr,
        mu: f64,
        alpha: f64,
        t_bar: f64,
    ) -> Result<Self> {
        if d == 0 || d > n {
            return Err(KolmoError::InvalidInput(format!(
                "d = {d} out of range 1..={n}"
            )));
        }
        if a2.len() != d * d {
            return Err(KolmoError::InvalidInput(format!(
                "a2 must have {d}x{d} entries, got {}",
                a2.len()
            )));
        }
        if a1.len() != d {
            return Err(KolmoError::InvalidInput(format!(
                "a1 must have {d} entries, got {}",
                a1.len()
            )));
        }
        if !(mu >= 1.0 && mu.is_finite()) {
            return Err(KolmoError::InvalidInput(format!(
                "mu must be a finite number >= 1, got {mu}"
            )));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(KolmoError::InvalidInput(format!(
                "alpha must lie in (0, 1], got {alpha}"
            )));
        }
        if !(t_bar > 0.0 && t_bar.is_finite()) {
            return Err(KolmoError::InvalidInput(format!(
                "T_bar must be positive, got {t_bar}"
            )));
        }
        let all = a2.iter().chain(a1.iter()).chain(std::iter::once(&a0));
        if let Some(e) = all.clone().find(|e| e.spatial_arity() > n) {
            return Err(KolmoError::InvalidInput(format!(
                "coefficient `{e}` references x{} but N = {n}",
                e.spatial_arity()
            )));
        }
        let class = CoeffClass {
            a2: a2
                .iter()
                .map(Expr::dependence)
                .max()
                .unwrap_or(Dependence::Constant),
            time_smooth: all.clone().all(Expr::is_time_smooth),
            lower_order_zero: a1
                .iter()
                .chain(std::iter::once(&a0))
                .all(|e| e.as_constant() == Some(0.0)),
        };
        Ok(CoefficientField {
            n,
            d,
            a2,
            a1,
            a0,
            mu,
            alpha,
            t_bar,
            holder_norms: None,
            class,
        })
    }

    /// Parses the `a2` grid, `a1` and `a0` from expression sources.
    #[allow(clippy::too_many_arguments)]
    pub fn from_sources(
        n: usize,
        d: usize,
        a2: &[Vec<String>],
        a1: &[String],
        a0: &str,
        mu: f64,
        alpha: f64,
        t_bar: f64,
    ) -> Result<Self> {
        if a2.len() != d || a2.iter().any(|row| row.len() != d) {
            return Err(KolmoError::InvalidInput(format!(
                "a2 must be a {d}x{d} grid of expressions"
            )));
        }
        let a2 = a2
            .iter()
            .flatten()
            .map(|s| Expr::parse(s))
            .collect::<Result<Vec<_>, _>>()?;
        let a1 = if a1.is_empty() {
            vec![Expr::Num(0.0); d]
        } else {
            a1.iter()
                .map(|s| Expr::parse(s))
                .collect::<Result<Vec<_>, _>>()?
        };
        Self::new(n, d, a2, a1, Expr::parse(a0)?, mu, alpha, t_bar)
    }

    /// Constant diffusion `A` with no lower-order terms.
    pub fn constant(n: usize, a: &DMatrix<f64>, mu: f64, t_bar: f64) -> Result<Self> {
        let d = a.nrows();
        let a2 = (0..d * d).map(|k| literal(a[(k / d, k % d)])).collect();
        Self::new(
            n,
            d,
            a2,
            vec![Expr::Num(0.0); d],
            Expr::Num(0.0),
            mu,
            1.0,
            t_bar,
        )
    }

    /// `δ I_d` with no lower-order terms.
    pub fn scalar(n: usize, d: usize, delta: f64, t_bar: f64) -> Result<Self> {
        let mu = delta.max(1.0 / delta);
        Self::constant(n, &(DMatrix::identity(d, d) * delta), mu, t_bar)
    }

    pub fn class(&self) -> CoeffClass {
        self.class
    }

    pub fn a2_expr(&self, i: usize, j: usize) -> &Expr {
        &self.a2[i * self.d + j]
    }

    pub fn a1_expr(&self, i: usize) -> &Expr {
        &self.a1[i]
    }

    pub fn a0_expr(&self) -> &Expr {
        &self.a0
    }

    /// Writes `a_ij(t, x)` row-major into `out` (length `d²`).
    /// Only the upper triangle is evaluated; the lower one is mirrored.
    pub fn a2_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.d;
        for i in 0..d {
            for j in i..d {
                let v = self.a2[i * d + j].eval(t, x)?;
                out[i * d + j] = v;
                out[j * d + i] = v;
            }
        }
        Ok(())
    }

    pub fn a2(&self, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.d, self.d);
        let mut buf = vec![0.0; self.d * self.d];
        self.a2_into(t, x, &mut buf)?;
        for k in 0..buf.len() {
            m[(k / self.d, k % self.d)] = buf[k];
        }
        Ok(m)
    }

    pub fn a1_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, e) in out.iter_mut().zip(&self.a1) {
            *o = e.eval(t, x)?;
        }
        Ok(())
    }

    pub fn a0(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.a0.eval(t, x)?)
    }

    /// Constant value of `a` when it has no `(t, x)` dependence.
    pub fn a0_constant(&self) -> Option<f64> {
        (self.a0.dependence() == Dependence::Constant)
            .then(|| self.a0.eval(0.0, &[]).ok())
            .flatten()
    }

    /// Splits off a constant, nonzero `a`: the field with `a ≡ 0` and the value `ā`.
    ///
    /// Since `𝒜 + ā` and `𝒜` differ by a multiple of the identity, their
    /// fundamental solutions satisfy `p_ā = e^{ā(T−t)} p_0`.
    pub fn split_constant_a0(&self) -> Option<(CoefficientField, f64)> {
        let abar = self.a0_constant().filter(|v| *v != 0.0)?;
        let mut field = CoefficientField::new(
            self.n,
            self.d,
            self.a2.clone(),
            self.a1.clone(),
            Expr::Num(0.0),
            self.mu,
            self.alpha,
            self.t_bar,
        )
        .ok()?;
        field.holder_norms = self.holder_norms.clone();
        Some((field, abar))
    }

    /// True if `a_ij` and `a_ji` are the same expression for every pair.
    fn textually_symmetric(&self) -> bool {
        let d = self.d;
        (0..d).all(|i| (0..i).all(|j| self.a2[i * d + j] == self.a2[j * d + i]))
    }

    /// Sampling check of `μ⁻¹|ξ|² ≤ ⟨a2 ξ, ξ⟩ ≤ μ|ξ|²` on `[0, T̄] × [−R, R]^N`.
    ///
    /// Returns whether the declared `μ` holds (slack `1e-12`) and the observed
    /// `max(λ_max, 1/λ_min)`. Fails on a non-symmetric `a2` sample.
    pub fn validate_ellipticity(
        &self,
        samples: usize,
        seed: u64,
        radius: f64,
    ) -> Result<(bool, f64)> {
        if samples == 0 {
            return Err(KolmoError::InvalidInput("need at least one sample".into()));
        }
        let textual = self.textually_symmetric();
        let d = self.d;
        let mut halton = Halton::new(self.n + 1, seed);
        let mut u = vec![0.0; self.n + 1];
        let mut x = vec![0.0; self.n];
        let mut ok = true;
        let mut observed: f64 = 1.0;
        for _ in 0..samples {
            halton.next_point(&mut u);
            let t = u[0] * self.t_bar;
            for k in 0..self.n {
                x[k] = radius * (2.0 * u[k + 1] - 1.0);
            }
            let mut m = DMatrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] = self.a2[i * d + j].eval(t, &x)?;
                }
            }
            if !textual {
                let asym = (&m - m.transpose()).amax();
                if asym > 1e-12 * m.amax().max(1.0) {
                    return Err(KolmoError::InvalidInput(format!(
                        "a2 is not symmetric at t = {t}, x = {x:?}"
                    )));
                }
            }
            let eig = m.symmetric_eigen().eigenvalues;
            let lo = eig.min();
            let hi = eig.max();
            if lo < 1.0 / self.mu - 1e-12 || hi > self.mu + 1e-12 {
                ok = false;
            }
            observed = if lo <= 0.0 {
                f64::INFINITY
            } else {
                observed.max(hi).max(1.0 / lo)
            };
        }
        Ok((ok, observed))
    }

    /// Sample-sup of `|a(t,x) − a(t,y)| / |x − y|_B^α` for each coefficient,
    /// a lower bound on the spatial Hölder semi-norm.
    pub fn estimate_holder_modulus(
        &self,
        structure: &BlockStructure,
        samples: usize,
        seed: u64,
        radius: f64,
    ) -> Result<Vec<HolderModulus>> {
        let d = self.d;
        let mut exprs: Vec<(String, &Expr)> = Vec::new();
        for i in 0..d {
            for j in i..d {
                exprs.push((format!("a{}{}", i + 1, j + 1), &self.a2[i * d + j]));
            }
        }
        for (i, e) in self.a1.iter().enumerate() {
            exprs.push((format!("a{}", i + 1), e));
        }
        exprs.push(("a".into(), &self.a0));
        let mut best = vec![0.0f64; exprs.len()];
        let mut sampler = PairSampler::new(structure, seed, (0.0, self.t_bar), radius);
        for _ in 0..samples {
            let pair = sampler.next_pair();
            let diff: Vec<f64> = pair.x.iter().zip(&pair.y).map(|(a, b)| a - b).collect();
            let dist = structure.anisotropic_norm(&diff);
            if dist == 0.0 {
                continue;
            }
            let denom = dist.powf(self.alpha);
            for (k, (_, e)) in exprs.iter().enumerate() {
                if e.dependence() != Dependence::SpaceTime {
                    continue;
                }
                let q = (e.eval(pair.t, &pair.x)? - e.eval(pair.t, &pair.y)?).abs() / denom;
                if q.is_finite() {
                    best[k] = best[k].max(q);
                }
            }
        }
        Ok(exprs
            .into_iter()
            .zip(best)
            .map(|((name, _), value)| HolderModulus { name, value })
            .collect())
    }
}

fn literal(v: f64) -> Expr {
    if v < 0.0 {
        Expr::Neg(Box::new(Expr::Num(-v)))
    } else {
        Expr::Num(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::block_decompose;

    fn langevin() -> BlockStructure {
        block_decompose(&DMatrix::from_row_slice(2, 2, &[0., 0., 1., 0.]), 1, 1e-10).unwrap()
    }

    fn field(a2: &str, mu: f64) -> CoefficientField {
        CoefficientField::from_sources(2, 1, &[vec![a2.into()]], &[], "0", mu, 1.0, 1.0).unwrap()
    }

    #[test]
    fn ellipticity_examples() {
        let c = CoefficientField::scalar(2, 1, 1.0, 1.0).unwrap();
        assert_eq!(c.validate_ellipticity(100, 1, 3.0).unwrap(), (true, 1.0));
        let (ok, mu) = field("1 + 0.5*sin(x2)", 2.0)
            .validate_ellipticity(2000, 1, 3.0)
            .unwrap();
        // λ ranges over [0.5, 1.5], so max(λ_max, 1/λ_min) approaches 2.
        assert!(ok && mu <= 2.0 + 1e-12 && mu > 1.95, "{mu}");
        let (ok, _) = field("x1", 2.0).validate_ellipticity(100, 1, 3.0).unwrap();
        assert!(!ok);
    }

    #[test]
    fn non_symmetric_a2_rejected() {
        let c = CoefficientField::from_sources(
            2,
            2,
            &[vec!["1".into(), "0.1".into()], vec!["0".into(), "1".into()]],
            &[],
            "0",
            2.0,
            1.0,
            1.0,
        )
        .unwrap();
        assert!(c.validate_ellipticity(10, 0, 1.0).is_err());
    }

    #[test]
    fn holder_modulus_examples() {
        let s = langevin();
        let c = CoefficientField::scalar(2, 1, 1.0, 1.0).unwrap();
        assert!(c
            .estimate_holder_modulus(&s, 1000, 3, 2.0)
            .unwrap()
            .iter()
            .all(|m| m.value == 0.0));
        let c = field("1 + step(t - 0.5)", 3.0);
        assert_eq!(
            c.estimate_holder_modulus(&s, 1000, 3, 2.0).unwrap()[0].value,
            0.0
        );
    }

    #[test]
    fn holder_modulus_of_intrinsic_power() {
        let s = langevin();
        let c = CoefficientField::from_sources(
            2,
            1,
            &[vec!["1 + powb(x2, 1/3)".into()]],
            &[],
            "0",
            3.0,
            1.0,
            1.0,
        )
        .unwrap();
        let m = c.estimate_holder_modulus(&s, 100_000, 11, 2.0).unwrap()[0].value;
        assert!((m - 1.0).abs() < 0.1, "{m}");
    }

    #[test]
    fn holder_modulus_monotone_in_samples() {
        let s = langevin();
        let c = field("1 + 0.25*sin(x2) + 0.1*powb(x1, 0.5)", 2.0);
        let mut prev = 0.0;
        for n in [10, 100, 1000, 5000] {
            let m = c.estimate_holder_modulus(&s, n, 5, 2.0).unwrap()[0].value;
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn classification() {
        assert_eq!(field("2", 2.0).class().a2, Dependence::Constant);
        let c = field("1 + 0.5*step(t-0.5)", 2.0);
        assert_eq!(c.class().a2, Dependence::TimeOnly);
        assert!(!c.class().time_smooth && c.class().lower_order_zero);
        let c = CoefficientField::from_sources(
            2,
            1,
            &[vec!["1".into()]],
            &["x1".into()],
            "0.5",
            2.0,
            1.0,
            1.0,
        )
        .unwrap();
        assert!(!c.class().lower_order_zero);
        assert_eq!(c.a0_constant(), Some(0.5));
    }

    #[test]
    fn rejects_out_of_range_variables() {
        assert!(CoefficientField::from_sources(
            2,
            1,
            &[vec!["x3".into()]],
            &[],
            "0",
            2.0,
            1.0,
            1.0
        )
        .is_err());
    }
}
