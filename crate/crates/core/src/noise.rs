//! Counter-based Gaussian increments.
//!
//! Every normal draw is a pure function of `(seed, path, step, component)`:
//! the key is hashed with the SplitMix64 finalizer into two 53-bit uniforms
//! and a Box-Muller pair. Paths can therefore be generated in any order, on
//! any thread, or regenerated on demand without storing them.

use std::f64::consts::TAU;

use crate::exec::{for_each_row, Execution};
use crate::grid::TimeGrid;

#[inline(always)]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline(always)]
fn key(seed: u64, path: u64, pair: u64, component: u64) -> u64 {
    let k = mix64(seed ^ 0x5851_F42D_4C95_7F2D);
    let k = mix64(k ^ path);
    let k = mix64(k ^ pair.wrapping_mul(0x2545_F491_4F6C_DD1D));
    mix64(k ^ component.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Uniform in `(0, 1]` from the top 53 bits.
#[inline(always)]
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Counter-based source of independent standard normals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterNormal {
    seed: u64,
}

impl CounterNormal {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Standard normal keyed by `(path, index, component)`.
    /// Consecutive even/odd indices share one Box-Muller pair.
    #[inline]
    pub fn normal(&self, path: u64, index: u64, component: u64) -> f64 {
        let k = key(self.seed, path, index >> 1, component);
        let u1 = open_unit(mix64(k));
        let u2 = open_unit(mix64(k ^ 0xA076_1D64_78BD_642F));
        let r = (-2.0 * u1.ln()).sqrt();
        if index & 1 == 0 {
            r * (TAU * u2).cos()
        } else {
            r * (TAU * u2).sin()
        }
    }

    /// Uniform in `(0, 1]` keyed by `(stream, index)`; used for subsampling.
    #[inline]
    pub fn uniform(&self, stream: u64, index: u64) -> f64 {
        open_unit(mix64(key(self.seed, stream, index, u64::MAX)))
    }
}

/// Brownian increments `[paths x steps x d]` with variance `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    seed: u64,
    paths: usize,
    steps: usize,
    dim: usize,
    dt: f64,
    increments: Vec<f64>,
}

impl NoiseBatch {
    pub fn generate(seed: u64, paths: usize, grid: &TimeGrid, dim: usize, exec: Execution) -> Self {
        let steps = grid.steps();
        let dt = grid.dt();
        let sq = dt.sqrt();
        let gen = CounterNormal::new(seed);
        let mut increments = vec![0.0; paths * steps * dim];
        for_each_row(exec, &mut increments, steps * dim, |p, row| {
            for i in 0..steps {
                for j in 0..dim {
                    row[i * dim + j] = sq * gen.normal(p as u64, i as u64, j as u64);
                }
            }
        });
        Self {
            seed,
            paths,
            steps,
            dim,
            dt,
            increments,
        }
    }

    /// Single increment computed without the stored table.
    #[inline]
    pub fn increment_on_demand(seed: u64, dt: f64, path: usize, step: usize, comp: usize) -> f64 {
        dt.sqrt() * CounterNormal::new(seed).normal(path as u64, step as u64, comp as u64)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn paths(&self) -> usize {
        self.paths
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Increment vector `ΔW` for one path and step.
    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.steps + step) * self.dim;
        &self.increments[o..o + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.increments
    }
}
