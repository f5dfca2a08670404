//! Counter-based Brownian increments.
//!
//! The standard normal used for fine step `s` and channel `k` of path `p` is a
//! pure function of `(seed, p, s, k)`: a ChaCha8 stream keyed by `seed`, with
//! stream id `p`, read at word offset `4 * (s * channels + k)`. Paths can
//! therefore be generated in any order or in parallel, and a coarse grid whose
//! step is an integer multiple of a fine one sees exactly the summed fine
//! increments.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS_PER_DRAW: u128 = 4;

fn unit_open(bits: u64) -> f64 {
    // (0, 1]: never zero, so the logarithm below is finite
    ((bits >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> f64 {
    let u1 = unit_open(a);
    let u2 = unit_open(b);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sequential reader over the normals of one path.
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn new(seed: u64, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        Self { rng }
    }

    /// Positions the stream at draw index `index` (= `step * channels + channel`).
    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(index as u128 * WORDS_PER_DRAW);
    }

    pub fn next_normal(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        box_muller(a, b)
    }
}

/// Random-access standard normal keyed by `(seed, path, step, channel)`.
pub fn keyed_normal(seed: u64, path: u64, step: u64, channel: u64, channels: u64) -> f64 {
    let mut s = NormalStream::new(seed, path);
    s.seek(step * channels + channel);
    s.next_normal()
}

/// Brownian increments for one path on a uniform grid, stored step-major.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    pub dt: f64,
    pub channels: usize,
    pub steps: usize,
    increments: Vec<f64>,
}

impl BrownianPath {
    /// Increments over `steps` steps of size `dt`, each the sum of `substeps`
    /// fine increments of size `dt / substeps`.
    pub fn generate(seed: u64, path: u64, channels: usize, steps: usize, dt: f64, substeps: usize) -> Self {
        let substeps = substeps.max(1);
        let mut increments = vec![0.0; steps * channels];
        if channels > 0 {
            let mut stream = NormalStream::new(seed, path);
            let fine_sd = (dt / substeps as f64).sqrt();
            for s in 0..steps {
                for _ in 0..substeps {
                    for k in 0..channels {
                        increments[s * channels + k] += fine_sd * stream.next_normal();
                    }
                }
            }
        }
        Self { dt, channels, steps, increments }
    }

    pub fn step(&self, s: usize) -> &[f64] {
        &self.increments[s * self.channels..(s + 1) * self.channels]
    }

    /// Piecewise-linear interpolation on blocks of `factor` steps: every step
    /// of a block receives the block increment divided evenly.
    pub fn smoothed(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        let mut out = self.clone();
        let mut start = 0;
        while start < self.steps {
            let end = (start + factor).min(self.steps);
            let len = (end - start) as f64;
            for k in 0..self.channels {
                let total: f64 = (start..end).map(|s| self.increments[s * self.channels + k]).sum();
                for s in start..end {
                    out.increments[s * self.channels + k] = total / len;
                }
            }
            start = end;
        }
        out
    }

    /// `β_k(t_s)` at every grid node, `s = 0..=steps`.
    pub fn cumulative(&self, channel: usize) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.steps + 1);
        out.push(0.0);
        for s in 0..self.steps {
            acc += self.increments[s * self.channels + channel];
            out.push(acc);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_keyed_agree() {
        let path = BrownianPath::generate(7, 3, 2, 50, 1.0, 1);
        for s in [0usize, 1, 17, 49] {
            for k in 0..2 {
                let z = keyed_normal(7, 3, s as u64, k as u64, 2);
                assert_eq!(path.step(s)[k], z);
            }
        }
    }

    #[test]
    fn coarse_grid_sums_fine_grid() {
        let fine = BrownianPath::generate(11, 0, 3, 40, 0.01, 1);
        let coarse = BrownianPath::generate(11, 0, 3, 20, 0.02, 2);
        for s in 0..20 {
            for k in 0..3 {
                let sum = fine.step(2 * s)[k] + fine.step(2 * s + 1)[k];
                assert!((coarse.step(s)[k] - sum).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn moments_are_standard() {
        let p = BrownianPath::generate(1, 0, 1, 200_000, 1.0, 1);
        let xs: Vec<f64> = (0..p.steps).map(|s| p.step(s)[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn paths_differ_and_reproduce() {
        let a = BrownianPath::generate(5, 0, 1, 10, 1.0, 1);
        let b = BrownianPath::generate(5, 1, 1, 10, 1.0, 1);
        let a2 = BrownianPath::generate(5, 0, 1, 10, 1.0, 1);
        assert_ne!(a.step(0)[0], b.step(0)[0]);
        assert_eq!(a.step(9)[0], a2.step(9)[0]);
    }

    #[test]
    fn smoothing_preserves_block_sums() {
        let p = BrownianPath::generate(2, 0, 2, 12, 0.1, 1);
        let s = p.smoothed(4);
        let cp = p.cumulative(1);
        let cs = s.cumulative(1);
        for node in [0usize, 4, 8, 12] {
            assert!((cp[node] - cs[node]).abs() < 1e-14);
        }
    }
}
