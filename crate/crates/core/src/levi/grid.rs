//! Storage of Volterra iterates on time levels.
//!
//! Level `l` sits at `s_l = (l h)²` (uniform in `u = √s`) and carries a tensor
//! Chebyshev grid in similarity coordinates `z = L⁻¹(η − c(s))`, where `c(s)` is
//! the transported anchor and `L Lᵀ` the reference covariance at `s`. Values are
//! stored divided by the envelope `e^{−|z|²/(2κ)}`, `κ = envelope_scale`, which
//! leaves a slowly varying, nearly polynomial profile on the box.

use nalgebra::DMatrix;

use super::small::{cholesky, from_dmatrix, lower_solve, mat_vec, Mn, Normal, Vn, MAXN};
use crate::error::{KolmoError, Result};
use crate::kernel::Drift;
use crate::quadrature::{chebyshev_barycentric, chebyshev_points};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    /// Anchor is the pole `y` at time `T`; `s = T − τ`.
    Backward,
    /// Anchor is the source `x` at time `t`; `s = τ − t`.
    Forward,
}

/// Similarity frame at one elapsed time `s`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Frame {
    pub n: usize,
    pub center: Vn,
    pub chol: Mn,
    pub det_l: f64,
}

impl Frame {
    pub fn z_of(&self, x: &[f64]) -> Vn {
        let mut r = [0.0; MAXN];
        for i in 0..self.n {
            r[i] = x[i] - self.center[i];
        }
        lower_solve(self.n, &self.chol, &r)
    }

    pub fn point(&self, z: &[f64]) -> Vn {
        let n = self.n;
        let mut out = self.center;
        for i in 0..n {
            for j in 0..=i {
                out[i] += self.chol[i * n + j] * z[j];
            }
        }
        out
    }

    /// `N(·; c, κ L Lᵀ)`.
    pub fn envelope(&self, kappa: f64) -> Result<Normal> {
        let n = self.n;
        let mut cov = [0.0; MAXN * MAXN];
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] = kappa
                    * (0..n)
                        .map(|k| self.chol[i * n + k] * self.chol[j * n + k])
                        .sum::<f64>();
            }
        }
        Normal::new(n, self.center, cov).ok_or_else(|| KolmoError::NotPositiveDefinite {
            context: "level envelope".into(),
        })
    }
}

/// Reference frames built from the constant diffusion frozen at the anchor.
#[derive(Debug, Clone)]
pub(crate) struct Frames {
    n: usize,
    dir: Direction,
    anchor: Vn,
    a_ref: DMatrix<f64>,
    drift: Drift,
}

impl Frames {
    pub fn new(drift: &Drift, dir: Direction, anchor: &[f64], a_ref: DMatrix<f64>) -> Self {
        let n = drift.n();
        let mut a = [0.0; MAXN];
        a[..n].copy_from_slice(&anchor[..n]);
        Frames {
            n,
            dir,
            anchor: a,
            a_ref,
            drift: drift.clone(),
        }
    }

    pub fn frame(&self, s: f64) -> Result<Frame> {
        let n = self.n;
        let c = from_dmatrix(&self.drift.cov_constant(&self.a_ref, s)?);
        let (center, cov) = match self.dir {
            Direction::Backward => {
                let e = from_dmatrix(&self.drift.exp(-s)?);
                (
                    mat_vec(n, &e, &self.anchor),
                    super::small::congruence(n, &e, &c),
                )
            }
            Direction::Forward => (
                mat_vec(n, &from_dmatrix(&self.drift.exp(s)?), &self.anchor),
                c,
            ),
        };
        let (chol, logdet) = cholesky(n, &cov).ok_or_else(|| KolmoError::NotPositiveDefinite {
            context: format!("reference covariance at s = {s}"),
        })?;
        Ok(Frame {
            n,
            center,
            chol,
            det_l: (0.5 * logdet).exp(),
        })
    }
}

/// Time interpolation stencil: level indices and weights (level 0 is the zero level).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub first: usize,
    pub len: usize,
    pub weights: [f64; 4],
}

/// Envelope-normalized values on all levels.
#[derive(Debug, Clone)]
pub(crate) struct LevelGrid {
    pub n: usize,
    pub m: usize,
    cheb: Vec<f64>,
    pub half: f64,
    pub h_u: f64,
    pub levels: usize,
    linear: bool,
    /// Level `l ≥ 1` occupies `values[(l − 1)·m^n .. l·m^n]`.
    pub values: Vec<f64>,
}

impl LevelGrid {
    pub fn new(n: usize, m: usize, half: f64, u_max: f64, levels: usize, linear: bool) -> Self {
        let per = m.pow(n as u32);
        LevelGrid {
            n,
            m,
            cheb: chebyshev_points(m, half),
            half,
            h_u: u_max / levels as f64,
            levels,
            linear: linear || levels < 3,
            values: vec![0.0; per * levels],
        }
    }

    pub fn per_level(&self) -> usize {
        self.m.pow(self.n as u32)
    }

    /// `s` of level `l ∈ 1..=levels`.
    pub fn s_level(&self, l: usize) -> f64 {
        let u = l as f64 * self.h_u;
        u * u
    }

    /// Node `i` of a level, last coordinate fastest.
    pub fn node_z(&self, mut i: usize) -> Vn {
        let mut z = [0.0; MAXN];
        for k in (0..self.n).rev() {
            z[k] = self.cheb[i % self.m];
            i /= self.m;
        }
        z
    }

    pub fn level(&self, l: usize) -> &[f64] {
        let per = self.per_level();
        &self.values[(l - 1) * per..l * per]
    }

    pub fn level_mut(&mut self, l: usize) -> &mut [f64] {
        let per = self.per_level();
        &mut self.values[(l - 1) * per..l * per]
    }

    pub fn stencil(&self, s: f64) -> Result<Stencil> {
        let u = s.max(0.0).sqrt();
        let top = self.levels as f64 * self.h_u;
        if u > top * (1.0 + 1e-9) {
            return Err(KolmoError::InvalidInput(format!(
                "elapsed time {s} beyond the stored range {}",
                top * top
            )));
        }
        let pos = u / self.h_u;
        let len = if self.linear { 2 } else { 4 };
        let lead = if self.linear { 0 } else { 1 };
        let first =
            (pos.floor() as isize - lead).clamp(0, (self.levels + 1 - len) as isize) as usize;
        let mut weights = [0.0; 4];
        for (k, w) in weights.iter_mut().enumerate().take(len) {
            let uk = (first + k) as f64;
            let mut p = 1.0;
            for j in 0..len {
                if j != k {
                    let uj = (first + j) as f64;
                    p *= (pos - uj) / (uk - uj);
                }
            }
            *w = p;
        }
        Ok(Stencil {
            first,
            len,
            weights,
        })
    }

    /// Per-dimension barycentric weights; `None` outside the box.
    fn spatial_weights(&self, z: &[f64], out: &mut [f64]) -> bool {
        let m = self.m;
        for k in 0..self.n {
            if z[k].abs() > self.half {
                return false;
            }
            chebyshev_barycentric(&self.cheb, z[k], &mut out[k * m..(k + 1) * m]);
        }
        true
    }

    fn contract(&self, w: &[f64], v: &[f64]) -> f64 {
        let m = self.m;
        match self.n {
            1 => w[..m].iter().zip(v).map(|(a, b)| a * b).sum(),
            2 => {
                let mut s = 0.0;
                for i in 0..m {
                    let row = &v[i * m..(i + 1) * m];
                    let inner: f64 = w[m..2 * m].iter().zip(row).map(|(a, b)| a * b).sum();
                    s += w[i] * inner;
                }
                s
            }
            _ => {
                let mut s = 0.0;
                for i in 0..m {
                    let mut si = 0.0;
                    for j in 0..m {
                        let row = &v[(i * m + j) * m..(i * m + j + 1) * m];
                        let inner: f64 = w[2 * m..3 * m].iter().zip(row).map(|(a, b)| a * b).sum();
                        si += w[m + j] * inner;
                    }
                    s += w[i] * si;
                }
                s
            }
        }
    }

    /// Interpolated value at elapsed time `s` and frame coordinates `z`.
    pub fn value(&self, st: &Stencil, z: &[f64]) -> f64 {
        let mut w = [0.0f64; 3 * 64];
        if !self.spatial_weights(z, &mut w) {
            return 0.0;
        }
        let mut total = 0.0;
        for k in 0..st.len {
            let l = st.first + k;
            if l == 0 || st.weights[k] == 0.0 {
                continue;
            }
            total += st.weights[k] * self.contract(&w, self.level(l));
        }
        total
    }

    /// `max |ψ| e^{−|z|²/(2κ)}` over all nodes.
    pub fn weighted_sup(&self, kappa: f64) -> f64 {
        let per = self.per_level();
        let env: Vec<f64> = (0..per)
            .map(|i| {
                let z = self.node_z(i);
                (-z[..self.n].iter().map(|v| v * v).sum::<f64>() / (2.0 * kappa)).exp()
            })
            .collect();
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| v.abs() * env[k % per])
            .fold(0.0, f64::max)
    }

    pub fn axpy(&mut self, a: f64, other: &LevelGrid) {
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }
}
