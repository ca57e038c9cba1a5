//! Seeded sample streams shared by the validators and the Hölder estimators.
//!
//! Every estimator consumes a prefix of one stream, so running with more
//! samples only ever adds points and sample-sup estimates are monotone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::structure::BlockStructure;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Randomly shifted Halton sequence on `[0,1)^dim` (dim ≤ 12).
pub struct Halton {
    dim: usize,
    index: u64,
    shift: Vec<f64>,
}

impl Halton {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(
            dim <= PRIMES.len(),
            "Halton sequence supports at most 12 dimensions"
        );
        let mut r = rng(seed);
        Halton {
            dim,
            index: 1,
            shift: (0..dim).map(|_| r.gen::<f64>()).collect(),
        }
    }

    pub fn next_point(&mut self, out: &mut [f64]) {
        for k in 0..self.dim {
            let base = PRIMES[k] as u64;
            let mut f = 1.0;
            let mut v = 0.0;
            let mut i = self.index;
            while i > 0 {
                f /= base as f64;
                v += f * (i % base) as f64;
                i /= base;
            }
            out[k] = (v + self.shift[k]).fract();
        }
        self.index += 1;
    }
}

/// A pair of space-time points for difference quotients.
#[derive(Debug, Clone)]
pub struct PointPair {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Pair sampler for intrinsic Hölder quotients `|f(t,x) − f(t,y)| / |x − y|_B^α`.
///
/// Coordinates are uniform on `[-radius, radius]` with an atom at `0` (so that
/// quotients of functions singular at the origin reach their sup), pairs differ
/// along one axis half of the time, and increments are log-uniform in the
/// intrinsic scale.
pub struct PairSampler<'a> {
    structure: &'a BlockStructure,
    rng: ChaCha8Rng,
    t_range: (f64, f64),
    radius: f64,
    scale: (f64, f64),
}

impl<'a> PairSampler<'a> {
    pub fn new(structure: &'a BlockStructure, seed: u64, t_range: (f64, f64), radius: f64) -> Self {
        PairSampler {
            structure,
            rng: rng(seed),
            t_range,
            radius,
            scale: (1e-4, radius),
        }
    }

    /// Restricts intrinsic increments to `[lo, hi]`.
    pub fn with_scale(mut self, lo: f64, hi: f64) -> Self {
        self.scale = (lo, hi);
        self
    }

    fn coordinate(&mut self) -> f64 {
        if self.rng.gen::<f64>() < 0.1 {
            0.0
        } else {
            self.radius * (2.0 * self.rng.gen::<f64>() - 1.0)
        }
    }

    fn intrinsic_step(&mut self) -> f64 {
        let (lo, hi) = self.scale;
        let h = (lo.ln() + (hi.ln() - lo.ln()) * self.rng.gen::<f64>()).exp();
        if self.rng.gen::<bool>() {
            h
        } else {
            -h
        }
    }

    pub fn next_pair(&mut self) -> PointPair {
        let n = self.structure.n;
        let (t0, t1) = self.t_range;
        let t = t0 + (t1 - t0) * self.rng.gen::<f64>();
        let x: Vec<f64> = (0..n).map(|_| self.coordinate()).collect();
        let mut y = x.clone();
        if self.rng.gen::<bool>() {
            let i = self.rng.gen_range(0..n);
            let w = (2 * self.structure.block_of(i) + 1) as i32;
            if self.rng.gen::<f64>() < 0.1 {
                y[i] = 0.0;
            } else {
                y[i] = x[i] + self.intrinsic_step().powi(w);
            }
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                let w = (2 * self.structure.block_of(i) + 1) as i32;
                *yi += self.intrinsic_step().powi(w);
            }
        }
        PointPair { t, x, y }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }
}
