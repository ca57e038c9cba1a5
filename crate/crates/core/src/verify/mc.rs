//! Monte Carlo oracle for the transition density.
//!
//! Paths follow `dX = (BX + a_1(t,X)) dt + σ(t,X) dW` with `σσᵀ = diag(A, 0)`.
//! Each step freezes `A` at the left endpoint and draws the exact Gaussian
//! increment of the frozen linear system, `X ↦ e^{hB}X + h a_1 + N(0, C_A(h))`,
//! so constant-coefficient models are simulated without discretization bias.
//! Paths run in fixed chunks with one ChaCha stream each, which makes every
//! statistic independent of the thread count.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use super::{checks::BatchDensity, Status, VerificationReport};
use crate::config::Model;
use crate::error::{KolmoError, Result};
use crate::expr::Dependence;
use crate::quadrature::{gauss_legendre_unit, pairwise_sum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McOptions {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    /// Bins per dimension.
    pub bins: usize,
    /// Paths per random stream.
    pub chunk: usize,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            paths: 1_000_000,
            steps: 200,
            seed: 0,
            bins: 30,
            chunk: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McResult {
    pub paths: usize,
    pub steps: usize,
    pub bins: usize,
    /// Lower corner of the histogram box.
    pub lo: Vec<f64>,
    /// Bin width per dimension.
    pub width: Vec<f64>,
    /// Row-major counts, last coordinate fastest.
    pub counts: Vec<u64>,
    pub outside: u64,
    /// Probability of each bin under `p / e^{ā(T−t)}`.
    pub reference: Vec<f64>,
    pub reference_outside: f64,
    /// `½ Σ |P̂ − P|` over the bins and the outside bucket.
    pub distance: f64,
    /// `Σ |P̂ − P|`.
    pub l1: f64,
    /// `distance` from the first quarter of the paths.
    pub distance_quarter: f64,
    pub mean: Vec<f64>,
    /// Row-major sample covariance.
    pub cov: Vec<f64>,
    /// Exact moments, available for constant `A` and `a_1 ≡ 0`.
    pub expected_mean: Option<Vec<f64>>,
    pub expected_cov: Option<Vec<f64>>,
    /// Largest `|error| / standard error` among mean entries.
    pub mean_z: Option<f64>,
    /// Largest `|error| / standard error` among covariance entries.
    pub cov_z: Option<f64>,
}

impl McResult {
    /// Histogram distance within `tol` and, when exact moments exist, every
    /// moment within 3 standard errors.
    pub fn report(&self, tol: f64) -> VerificationReport {
        let moments = match (self.mean_z, self.cov_z) {
            (Some(m), Some(c)) => m <= 3.0 && c <= 3.0,
            _ => true,
        };
        let mut r = VerificationReport::new(
            "mc_oracle",
            Status::from_bool(self.distance <= tol && moments),
            tol,
            self.paths,
        )
        .with("distance", self.distance)
        .with("l1", self.l1)
        .with("distance_quarter_paths", self.distance_quarter);
        if let (Some(m), Some(c)) = (self.mean_z, self.cov_z) {
            r = r.with("mean_max_z", m).with("cov_max_z", c);
        }
        r.note(format!(
            "{} paths, {} steps, {}^N bins; distance is half the L1 norm including the outside bucket",
            self.paths, self.steps, self.bins
        ))
    }
}

fn cholesky(n: usize, a: &[f64], l: &mut [f64]) -> bool {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return false;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    true
}

/// Per-chunk statistics; moments are centered at `center`.
struct ChunkStats {
    sum: Vec<f64>,
    outer: Vec<f64>,
}

struct Simulator<'a> {
    model: &'a Model,
    t: f64,
    x: Vec<f64>,
    h: f64,
    steps: usize,
    e: Vec<f64>,
    /// `C_{E_ab}(h)` for `a ≤ b < d`, row-major.
    basis: Vec<(usize, usize, Vec<f64>)>,
    /// Fixed factor when `A` is constant.
    fixed: Option<Vec<f64>>,
    a1_zero: bool,
}

impl Simulator<'_> {
    fn factor(
        &self,
        tk: f64,
        x: &[f64],
        a: &mut [f64],
        c: &mut [f64],
        l: &mut [f64],
    ) -> Result<()> {
        let (n, d) = (self.model.n(), self.model.d());
        self.model.coeffs.a2_into(tk, x, a)?;
        c.iter_mut().for_each(|v| *v = 0.0);
        for (i, j, k) in &self.basis {
            let w = a[i * d + j];
            for (cv, kv) in c.iter_mut().zip(k) {
                *cv += w * kv;
            }
        }
        if !cholesky(n, c, l) {
            return Err(KolmoError::NotPositiveDefinite {
                context: format!("diffusion increment at t = {tk}, x = {x:?}"),
            });
        }
        Ok(())
    }

    /// Runs `count` paths and feeds every endpoint to `sink`.
    fn run(&self, rng: &mut ChaCha8Rng, count: usize, mut sink: impl FnMut(&[f64])) -> Result<()> {
        let (n, d) = (self.model.n(), self.model.d());
        let mut cur = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut z = vec![0.0; n];
        let (mut a, mut c) = (vec![0.0; d * d], vec![0.0; n * n]);
        let mut l = self.fixed.clone().unwrap_or_else(|| vec![0.0; n * n]);
        let mut a1 = vec![0.0; d];
        for _ in 0..count {
            cur.copy_from_slice(&self.x);
            for k in 0..self.steps {
                let tk = self.t + k as f64 * self.h;
                if self.fixed.is_none() {
                    self.factor(tk, &cur, &mut a, &mut c, &mut l)?;
                }
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(rng);
                }
                for i in 0..n {
                    let mut v = 0.0;
                    for j in 0..n {
                        v += self.e[i * n + j] * cur[j];
                    }
                    for j in 0..=i {
                        v += l[i * n + j] * z[j];
                    }
                    next[i] = v;
                }
                if !self.a1_zero {
                    self.model.coeffs.a1_into(tk, &cur, &mut a1)?;
                    for i in 0..d {
                        next[i] += self.h * a1[i];
                    }
                }
                std::mem::swap(&mut cur, &mut next);
            }
            sink(&cur);
        }
        Ok(())
    }
}

/// Simulates `X_T` from `X_t = x` and compares its histogram with `p(t,x;T,·)`.
///
/// `density` evaluates `p(t, x; T, y)` on a row-major list of `y`. A constant
/// zeroth-order coefficient `ā` is handled through the weight `e^{ā(T−t)}`.
pub fn mc_oracle(
    model: &Model,
    t: f64,
    x: &[f64],
    t_end: f64,
    opts: &McOptions,
    density: BatchDensity,
) -> Result<McResult> {
    let (n, d) = (model.n(), model.d());
    let coeffs = &model.coeffs;
    let abar = match coeffs.a0_expr().as_constant() {
        Some(v) => v,
        None => {
            return Err(KolmoError::InvalidInput(
                "Monte Carlo oracle needs a constant zeroth-order coefficient".into(),
            ))
        }
    };
    if x.len() != n
        || !(t_end > t)
        || opts.paths == 0
        || opts.steps == 0
        || opts.bins == 0
        || opts.chunk == 0
    {
        return Err(KolmoError::InvalidInput(
            "Monte Carlo oracle: bad source, horizon or budget".into(),
        ));
    }
    let cells = (opts.bins as f64).powi(n as i32);
    if cells > 1e7 {
        return Err(KolmoError::DimensionBudget(format!(
            "{}^{n} histogram bins",
            opts.bins
        )));
    }
    let dt = t_end - t;
    let h = dt / opts.steps as f64;
    let drift = &model.drift;
    let e = drift.exp(h)?;
    let row_major =
        |m: &DMatrix<f64>| -> Vec<f64> { (0..n * n).map(|k| m[(k / n, k % n)]).collect() };
    let mut basis = Vec::new();
    for i in 0..d {
        for j in i..d {
            let mut unit = DMatrix::zeros(d, d);
            unit[(i, j)] = 1.0;
            unit[(j, i)] = 1.0;
            basis.push((i, j, row_major(&drift.cov_constant(&unit, h)?)));
        }
    }
    let a2_constant = coeffs.class().a2 == Dependence::Constant;
    let a1_zero = (0..d).all(|i| coeffs.a1_expr(i).as_constant() == Some(0.0));
    let mut sim = Simulator {
        model,
        t,
        x: x.to_vec(),
        h,
        steps: opts.steps,
        e: row_major(&e),
        basis,
        fixed: None,
        a1_zero,
    };
    let a_src = coeffs.a2(t, x)?;
    if a2_constant {
        let mut l = vec![0.0; n * n];
        sim.factor(t, x, &mut vec![0.0; d * d], &mut vec![0.0; n * n], &mut l)?;
        sim.fixed = Some(l);
    }

    // Histogram box: centered on the transported source, half-widths from the
    // covariance of the frozen system at the source, so bins follow D(√(T−t)).
    let center = drift.exp(dt)? * DVector::from_column_slice(x);
    let lam = crate::linalg::sym_eig_range(&a_src).1;
    let cov_id = drift.cov_identity(dt)?;
    let half: Vec<f64> = (0..n)
        .map(|i| 4.5 * (cov_id[(i, i)] * lam).sqrt())
        .collect();
    let lo: Vec<f64> = (0..n).map(|i| center[i] - half[i]).collect();
    let width: Vec<f64> = (0..n).map(|i| 2.0 * half[i] / opts.bins as f64).collect();
    let total_cells = cells as usize;
    let bin_of = |y: &[f64]| -> Option<usize> {
        let mut idx = 0usize;
        for i in 0..n {
            let k = ((y[i] - lo[i]) / width[i]).floor();
            if !(k >= 0.0 && k < opts.bins as f64) {
                return None;
            }
            idx = idx * opts.bins + k as usize;
        }
        Some(idx)
    };

    let quarter = opts.paths / 4;
    let chunks = opts.paths.div_ceil(opts.chunk);
    let per_chunk = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<(Vec<u32>, Vec<u32>, ChunkStats)> {
            let start = c * opts.chunk;
            let count = opts.chunk.min(opts.paths - start);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(c as u64);
            let mut hist: Vec<(usize, bool)> = Vec::with_capacity(count);
            let mut stats = ChunkStats {
                sum: vec![0.0; n],
                outer: vec![0.0; n * n],
            };
            let mut k = start;
            sim.run(&mut rng, count, |y| {
                for i in 0..n {
                    let u = y[i] - center[i];
                    stats.sum[i] += u;
                    for j in 0..n {
                        stats.outer[i * n + j] += u * (y[j] - center[j]);
                    }
                }
                hist.push((bin_of(y).unwrap_or(total_cells), k < quarter));
                k += 1;
            })?;
            // Sparse encoding: (cell, in-quarter) pairs, expanded by the reducer.
            let cells: Vec<u32> = hist.iter().map(|(b, _)| *b as u32).collect();
            let flags: Vec<u32> = hist.iter().map(|(_, q)| *q as u32).collect();
            Ok((cells, flags, stats))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut counts = vec![0u64; total_cells + 1];
    let mut counts_q = vec![0u64; total_cells + 1];
    let mut sum = vec![0.0; n];
    let mut outer = vec![0.0; n * n];
    for (cells_c, flags, stats) in &per_chunk {
        for (b, q) in cells_c.iter().zip(flags) {
            counts[*b as usize] += 1;
            if *q == 1 {
                counts_q[*b as usize] += 1;
            }
        }
        sum.iter_mut().zip(&stats.sum).for_each(|(a, b)| *a += b);
        outer
            .iter_mut()
            .zip(&stats.outer)
            .for_each(|(a, b)| *a += b);
    }
    drop(per_chunk);

    let np = opts.paths as f64;
    let mean_off: Vec<f64> = sum.iter().map(|s| s / np).collect();
    let mean: Vec<f64> = (0..n).map(|i| center[i] + mean_off[i]).collect();
    let cov: Vec<f64> = (0..n * n)
        .map(|k| (outer[k] - np * mean_off[k / n] * mean_off[k % n]) / (np - 1.0))
        .collect();

    let weight = (abar * dt).exp();
    let reference = bin_probabilities(n, opts.bins, &lo, &width, density)?
        .into_iter()
        .map(|v| v / weight)
        .collect::<Vec<_>>();
    let reference_outside = 1.0 - pairwise_sum(&reference);
    let distance_of = |c: &[u64], total: f64| -> f64 {
        let mut diffs: Vec<f64> = (0..total_cells)
            .map(|b| (c[b] as f64 / total - reference[b]).abs())
            .collect();
        diffs.push((c[total_cells] as f64 / total - reference_outside).abs());
        pairwise_sum(&diffs)
    };
    let l1 = distance_of(&counts, np);
    let distance_quarter = if quarter > 0 {
        0.5 * distance_of(&counts_q, quarter as f64)
    } else {
        f64::NAN
    };

    let (mut expected_mean, mut expected_cov, mut mean_z, mut cov_z) = (None, None, None, None);
    if a2_constant && a1_zero {
        let c = drift.cov_constant(&a_src, dt)?;
        let em: Vec<f64> = center.iter().copied().collect();
        let ec: Vec<f64> = row_major(&c);
        mean_z = Some(
            (0..n)
                .map(|i| (mean[i] - em[i]).abs() / (c[(i, i)] / np).sqrt())
                .fold(0.0, f64::max),
        );
        cov_z = Some(
            (0..n * n)
                .map(|k| {
                    let (i, j) = (k / n, k % n);
                    let se = ((c[(i, i)] * c[(j, j)] + c[(i, j)] * c[(i, j)]) / np).sqrt();
                    (cov[k] - ec[k]).abs() / se
                })
                .fold(0.0, f64::max),
        );
        expected_mean = Some(em);
        expected_cov = Some(ec);
    }

    let outside = counts[total_cells];
    counts.truncate(total_cells);
    Ok(McResult {
        paths: opts.paths,
        steps: opts.steps,
        bins: opts.bins,
        lo,
        width,
        counts,
        outside,
        reference,
        reference_outside,
        distance: 0.5 * l1,
        l1,
        distance_quarter,
        mean,
        cov,
        expected_mean,
        expected_cov,
        mean_z,
        cov_z,
    })
}

/// `∫_bin p` for every bin by a 3-point Gauss–Legendre rule per dimension.
fn bin_probabilities(
    n: usize,
    bins: usize,
    lo: &[f64],
    width: &[f64],
    density: BatchDensity,
) -> Result<Vec<f64>> {
    let gl = gauss_legendre_unit(3)?;
    let q = gl.len();
    let per_bin = q.pow(n as u32);
    let total = bins.pow(n as u32);
    let volume: f64 = width.iter().product();
    let mut points = Vec::with_capacity(total * per_bin * n);
    let mut weights = Vec::with_capacity(total * per_bin);
    for b in 0..total {
        let mut idx = vec![0usize; n];
        let mut r = b;
        for i in (0..n).rev() {
            idx[i] = r % bins;
            r /= bins;
        }
        for node in 0..per_bin {
            let mut r = node;
            let mut w = volume;
            let mut pt = vec![0.0; n];
            for i in (0..n).rev() {
                let k = r % q;
                r /= q;
                pt[i] = lo[i] + (idx[i] as f64 + gl.nodes[k]) * width[i];
                w *= gl.weights[k];
            }
            points.extend(pt);
            weights.push(w);
        }
    }
    let values = density(&points)?;
    Ok((0..total)
        .map(|b| {
            let terms: Vec<f64> = (0..per_bin)
                .map(|k| weights[b * per_bin + k] * values[b * per_bin + k])
                .collect();
            pairwise_sum(&terms)
        })
        .collect())
}
