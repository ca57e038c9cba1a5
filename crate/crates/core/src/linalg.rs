//! Small dense linear algebra used throughout: matrix exponentials of the drift,
//! Cholesky factors of covariance matrices and spectral helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{KolmoError, Result};

/// Precomputed data for evaluating `e^{uB}` at many values of `u`.
///
/// Nilpotent drifts (the common case for Kolmogorov operators in canonical form)
/// get the terminating Taylor series, which is exact up to rounding.
#[derive(Debug, Clone)]
pub struct Flow {
    b: DMatrix<f64>,
    /// `B^k / k!` for `k < N`, present only when `B` is nilpotent.
    nilpotent_terms: Option<Vec<DMatrix<f64>>>,
}

impl Flow {
    pub fn new(b: &DMatrix<f64>) -> Result<Self> {
        if !b.is_square() {
            return Err(KolmoError::InvalidInput(format!(
                "drift matrix must be square, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(KolmoError::InvalidInput(
                "drift matrix has non-finite entries".into(),
            ));
        }
        let n = b.nrows();
        let scale = b.amax().max(1.0);
        let mut terms = Vec::with_capacity(n);
        let mut power = DMatrix::<f64>::identity(n, n);
        let mut fact = 1.0;
        for k in 0..n {
            if k > 0 {
                power = &power * b;
                fact *= k as f64;
            }
            terms.push(&power / fact);
        }
        let top = &power * b;
        let nilpotent = top.amax() <= 1e-13 * scale.powi(n as i32);
        Ok(Flow {
            b: b.clone(),
            nilpotent_terms: nilpotent.then_some(terms),
        })
    }

    pub fn dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn is_nilpotent(&self) -> bool {
        self.nilpotent_terms.is_some()
    }

    /// `e^{uB}`.
    pub fn exp(&self, u: f64) -> Result<DMatrix<f64>> {
        match &self.nilpotent_terms {
            Some(terms) => {
                // Horner in u over the stored B^k/k!.
                let mut acc = terms[terms.len() - 1].clone();
                for term in terms.iter().rev().skip(1) {
                    acc *= u;
                    acc += term;
                }
                Ok(acc)
            }
            None => {
                let scaled = &self.b * u;
                let e = scaled.clone().exp();
                if e.iter().all(|v| v.is_finite()) {
                    Ok(e)
                } else {
                    Err(KolmoError::Overflow {
                        norm: scaled.norm(),
                    })
                }
            }
        }
    }

    /// `e^{uB} v` without keeping the matrix around.
    pub fn apply(&self, u: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.exp(u)? * v)
    }
}

/// `e^{tB}` by the terminating series for nilpotent `B`, scaling-and-squaring Padé otherwise.
pub fn expm(b: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    Flow::new(b)?.exp(t)
}

/// Cholesky factor of a symmetric positive definite matrix with the pieces the
/// Gaussian kernels need.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    /// Lower triangular `L` with `M = L Lᵀ`.
    pub l: DMatrix<f64>,
    /// `M⁻¹`.
    pub inv: DMatrix<f64>,
    /// `ln det M`.
    pub logdet: f64,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>, context: &str) -> Result<Self> {
        let chol =
            nalgebra::Cholesky::new(m.clone()).ok_or_else(|| KolmoError::NotPositiveDefinite {
                context: context.to_string(),
            })?;
        let l = chol.l();
        let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !logdet.is_finite() {
            return Err(KolmoError::NotPositiveDefinite {
                context: context.to_string(),
            });
        }
        let inv = chol.inverse();
        Ok(SpdFactor { l, inv, logdet })
    }

    /// `⟨M⁻¹z, z⟩`.
    pub fn quad_form(&self, z: &DVector<f64>) -> f64 {
        let w = &self.inv * z;
        w.dot(z)
    }

    /// Solves `L u = z` (so that `|u|² = ⟨M⁻¹z,z⟩`).
    pub fn whiten(&self, z: &DVector<f64>) -> DVector<f64> {
        self.l
            .solve_lower_triangular(z)
            .expect("Cholesky factor has a positive diagonal")
    }
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Numerical rank: number of singular values above `tol * σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * smax).count()
}

/// Symmetrizes in place to remove rounding asymmetry from congruence products.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nilpotent_exp_is_exact_series() {
        let b = DMatrix::from_row_slice(3, 3, &[0., 0., 0., 1., 0., 0., 0., 1., 0.]);
        let flow = Flow::new(&b).unwrap();
        assert!(flow.is_nilpotent());
        let e = flow.exp(1.0).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[1., 0., 0., 1., 1., 0., 0.5, 1., 1.]);
        assert!((e - want).amax() < 1e-15);
    }

    #[test]
    fn general_exp_matches_rotation() {
        let b = DMatrix::from_row_slice(2, 2, &[0., -1., 1., 0.]);
        let flow = Flow::new(&b).unwrap();
        assert!(!flow.is_nilpotent());
        let t = 0.7_f64;
        let e = flow.exp(t).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        assert!((e - want).amax() < 1e-14);
    }

    #[test]
    fn exp_of_large_argument_overflows_cleanly() {
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(matches!(expm(&b, 1e4), Err(KolmoError::Overflow { .. })));
    }

    #[test]
    fn spd_factor_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1., 2., 2., 1.]);
        assert!(SpdFactor::new(&m, "test").is_err());
    }
}
