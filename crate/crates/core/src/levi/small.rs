//! Stack-allocated linear algebra for the Levi inner loops (`N ≤ 3`).
//!
//! Matrices are row-major `[f64; 9]` with stride `n`.

use nalgebra::DMatrix;

use crate::kernel::PoleKernel;

pub(crate) const MAXN: usize = 3;
pub(crate) type Vn = [f64; MAXN];
pub(crate) type Mn = [f64; MAXN * MAXN];

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `v · e^{log_factor}` through logarithms, so an underflowed `v` never meets an
/// overflowed factor.
pub(crate) fn rescale(v: f64, log_factor: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum() * (v.abs().ln() + log_factor).exp()
    }
}

pub(crate) fn from_dmatrix(m: &DMatrix<f64>) -> Mn {
    let n = m.nrows();
    let mut out = [0.0; MAXN * MAXN];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = m[(i, j)];
        }
    }
    out
}

pub(crate) fn mat_vec(n: usize, a: &Mn, x: &[f64]) -> Vn {
    let mut out = [0.0; MAXN];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..n {
            s += a[i * n + j] * x[j];
        }
        out[i] = s;
    }
    out
}

/// `a c aᵀ`.
pub(crate) fn congruence(n: usize, a: &Mn, c: &Mn) -> Mn {
    let mut ac = [0.0; MAXN * MAXN];
    for i in 0..n {
        for j in 0..n {
            ac[i * n + j] = (0..n).map(|k| a[i * n + k] * c[k * n + j]).sum();
        }
    }
    let mut out = [0.0; MAXN * MAXN];
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = (0..n).map(|k| ac[i * n + k] * a[j * n + k]).sum();
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

pub(crate) fn add(n: usize, a: &Mn, b: &Mn) -> Mn {
    let mut out = [0.0; MAXN * MAXN];
    for k in 0..n * n {
        out[k] = a[k] + b[k];
    }
    out
}

pub(crate) fn scale(n: usize, a: &Mn, s: f64) -> Mn {
    let mut out = [0.0; MAXN * MAXN];
    for k in 0..n * n {
        out[k] = a[k] * s;
    }
    out
}

/// Lower Cholesky factor and `log det`, or `None` if not positive definite.
pub(crate) fn cholesky(n: usize, a: &Mn) -> Option<(Mn, f64)> {
    let mut l = [0.0; MAXN * MAXN];
    let mut logdet = 0.0;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        logdet += 2.0 * ljj.ln();
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Some((l, logdet))
}

/// `L⁻¹ b` for lower-triangular `L`.
pub(crate) fn lower_solve(n: usize, l: &Mn, b: &[f64]) -> Vn {
    let mut x = [0.0; MAXN];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Inverse of a lower-triangular matrix.
pub(crate) fn lower_inverse(n: usize, l: &Mn) -> Mn {
    let mut out = [0.0; MAXN * MAXN];
    for j in 0..n {
        let mut e = [0.0; MAXN];
        e[j] = 1.0;
        let col = lower_solve(n, l, &e);
        for i in 0..n {
            out[i * n + j] = col[i];
        }
    }
    out
}

/// `(A⁻¹, chol A, log det A)`.
pub(crate) fn spd_inverse(n: usize, a: &Mn) -> Option<(Mn, Mn, f64)> {
    let (l, logdet) = cholesky(n, a)?;
    let li = lower_inverse(n, &l);
    let mut inv = [0.0; MAXN * MAXN];
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = (i.max(j)..n).map(|k| li[k * n + i] * li[k * n + j]).sum();
            inv[i * n + j] = v;
            inv[j * n + i] = v;
        }
    }
    Some((inv, l, logdet))
}

/// Normal density `N(·; mean, S)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Normal {
    pub n: usize,
    pub mean: Vn,
    pub cov: Mn,
    pub inv: Mn,
    pub chol: Mn,
    pub log_norm: f64,
}

impl Normal {
    pub fn new(n: usize, mean: Vn, cov: Mn) -> Option<Self> {
        let (inv, chol, logdet) = spd_inverse(n, &cov)?;
        Some(Normal {
            n,
            mean,
            cov,
            inv,
            chol,
            log_norm: -0.5 * (n as f64 * LN_2PI + logdet),
        })
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let mut z = [0.0; MAXN];
        for i in 0..n {
            z[i] = x[i] - self.mean[i];
        }
        let mut q = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += self.inv[i * n + j] * z[j];
            }
            q += s * z[i];
        }
        self.log_norm - 0.5 * q
    }

    /// `mean + chol · xi`.
    pub fn point(&self, xi: &[f64]) -> Vn {
        let n = self.n;
        let mut out = self.mean;
        for i in 0..n {
            for j in 0..=i {
                out[i] += self.chol[i * n + j] * xi[j];
            }
        }
        out
    }

    /// `N(·; m_a, S_a) N(·; m_b, S_b) = e^{log_k} N(·; m_c, S_c)`; returns `(N_c, log_k)`.
    pub fn product(&self, other: &Normal) -> Option<(Normal, f64)> {
        let n = self.n;
        let prec = add(n, &self.inv, &other.inv);
        let (cov, _, _) = spd_inverse(n, &prec)?;
        let a = mat_vec(n, &self.inv, &self.mean);
        let b = mat_vec(n, &other.inv, &other.mean);
        let mut rhs = [0.0; MAXN];
        for i in 0..n {
            rhs[i] = a[i] + b[i];
        }
        let mean = mat_vec(n, &cov, &rhs);
        let joint = Normal::new(n, other.mean, add(n, &self.cov, &other.cov))?;
        let log_k = joint.log_pdf(&self.mean);
        Some((Normal::new(n, mean, cov)?, log_k))
    }
}

/// Parametrix-type kernel `x ↦ g(C, y − e^{dt B}x)` held on the stack.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SmallKernel {
    n: usize,
    back: Mn,
    h_inv: Mn,
    log_norm: f64,
}

impl SmallKernel {
    /// `back = e^{−dt B}`, `cov = C`.
    pub fn new(n: usize, back: &Mn, cov: &Mn, trace: f64, dt: f64) -> Option<Self> {
        let h = congruence(n, back, cov);
        let (h_inv, _, logdet_h) = spd_inverse(n, &h)?;
        Some(SmallKernel {
            n,
            back: *back,
            h_inv,
            log_norm: -0.5 * (n as f64 * LN_2PI + logdet_h + 2.0 * dt * trace),
        })
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut w = [0.0; MAXN];
        self.whiten_into(x, y, &mut w[..self.n])
    }
}

impl PoleKernel for SmallKernel {
    fn dim(&self) -> usize {
        self.n
    }

    fn pullback(&self, y: &[f64], out: &mut [f64]) {
        let v = mat_vec(self.n, &self.back, y);
        out[..self.n].copy_from_slice(&v[..self.n]);
    }

    fn h_inv(&self) -> &[f64] {
        &self.h_inv[..self.n * self.n]
    }

    fn whiten_into(&self, x: &[f64], y: &[f64], w: &mut [f64]) -> f64 {
        let n = self.n;
        let mut zeta = mat_vec(n, &self.back, y);
        for i in 0..n {
            zeta[i] -= x[i];
        }
        let mut q = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += self.h_inv[i * n + j] * zeta[j];
            }
            w[i] = s;
            q += s * zeta[i];
        }
        (self.log_norm - 0.5 * q).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Drift, FrozenKernel};

    #[test]
    fn inverse_and_cholesky_agree_with_nalgebra() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let (inv, l, logdet) = spd_inverse(3, &from_dmatrix(&a)).unwrap();
        let want = a.clone().try_inverse().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((inv[i * 3 + j] - want[(i, j)]).abs() < 1e-14);
            }
        }
        assert!((logdet - a.determinant().ln()).abs() < 1e-14);
        let b = lower_solve(3, &l, &[1.0, 2.0, 3.0]);
        let back = mat_vec(3, &l, &b);
        assert!((back[2] - 3.0).abs() < 1e-14);
        assert!(cholesky(2, &[1.0, 2.0, 2.0, 1.0, 0., 0., 0., 0., 0.]).is_none());
    }

    #[test]
    fn gaussian_product_identity() {
        let a = Normal::new(
            2,
            [0.3, -0.2, 0.0],
            [1.0, 0.2, 0.2, 0.5, 0., 0., 0., 0., 0.],
        )
        .unwrap();
        let b = Normal::new(
            2,
            [-0.1, 0.4, 0.0],
            [0.7, -0.1, -0.1, 0.9, 0., 0., 0., 0., 0.],
        )
        .unwrap();
        let (c, log_k) = a.product(&b).unwrap();
        for x in [[0.0, 0.0], [1.0, -0.5], [-0.7, 0.2]] {
            let lhs = a.log_pdf(&x) + b.log_pdf(&x);
            let rhs = log_k + c.log_pdf(&x);
            assert!((lhs - rhs).abs() < 1e-13);
        }
    }

    #[test]
    fn small_kernel_matches_frozen_kernel() {
        let drift =
            Drift::new(&DMatrix::from_row_slice(2, 2, &[0., 0., 1., 0.]), 1, 1e-10).unwrap();
        let cov = drift.cov_identity(0.3).unwrap() * 1.3;
        let fk = FrozenKernel::new(&drift, cov.clone(), 0.3).unwrap();
        let sk = SmallKernel::new(
            2,
            &from_dmatrix(&drift.exp(-0.3).unwrap()),
            &from_dmatrix(&cov),
            0.0,
            0.3,
        )
        .unwrap();
        let (x, y) = ([0.2, -0.1], [0.5, 0.3]);
        assert!((fk.value(&x, &y) - sk.value(&x, &y)).abs() < 1e-13 * fk.value(&x, &y));
        let mut w1 = [0.0; 2];
        let mut w2 = [0.0; 2];
        fk.whiten_into(&x, &y, &mut w1);
        sk.whiten_into(&x, &y, &mut w2);
        assert!((w1[0] - w2[0]).abs() < 1e-12 && (w1[1] - w2[1]).abs() < 1e-12);
    }
}
