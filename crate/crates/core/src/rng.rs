//! Counter-addressed Gaussian increments.
//!
//! Every standard-normal vector `xi_n^k` is a pure function of
//! `(master_seed, level, path_index, n, k)`. The keystream is ChaCha8 keyed by
//! the master seed, with the stream id packing `(level, path_index)`. The
//! increment at flat fine index `j = n * M + k` occupies a fixed block of words
//! in that keystream, so sequential reads and random access agree exactly and
//! results never depend on which worker simulated which path.
//!
//! Normals come from the Box-Muller transform of two 53-bit uniforms in
//! `(0, 1)`. `libm` supplies `ln`/`sin`/`cos` so the bits do not depend on the
//! platform's math library.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

const PATH_BITS: u32 = 48;
const MAX_PATH: u64 = (1 << PATH_BITS) - 1;

/// SplitMix64 finalizer. Used to derive independent master seeds for
/// auxiliary streams (e.g. the uncoupled comparison paths).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Identifies one path's noise: `coarse_steps` intervals, each split into
/// `refinement` fine increments of dimension `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    master_seed: u64,
    level: u32,
    path_index: u64,
    dim: usize,
    coarse_steps: usize,
    refinement: usize,
}

impl NoiseStream {
    pub fn new(master_seed: u64, level: u32, path_index: u64, dim: usize) -> Self {
        assert!(path_index <= MAX_PATH, "path index exceeds 2^48 - 1");
        assert!(level < (1 << (64 - PATH_BITS)), "level exceeds 2^16 - 1");
        assert!(dim > 0, "noise dimension must be positive");
        NoiseStream {
            master_seed,
            level,
            path_index,
            dim,
            coarse_steps: usize::MAX,
            refinement: 1,
        }
    }

    /// Restricts the stream to `coarse_steps` intervals of `refinement` substeps.
    pub fn with_grid(mut self, coarse_steps: usize, refinement: usize) -> Self {
        assert!(refinement >= 1, "refinement must be at least 1");
        self.coarse_steps = coarse_steps;
        self.refinement = refinement;
        self
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn refinement(&self) -> usize {
        self.refinement
    }

    pub fn coarse_steps(&self) -> usize {
        self.coarse_steps
    }

    fn pairs(&self) -> usize {
        self.dim.div_ceil(2)
    }

    fn keystream(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(((self.level as u64) << PATH_BITS) | self.path_index);
        rng
    }

    fn flat_index(&self, n: usize, k: usize) -> Result<usize> {
        if k >= self.refinement || n >= self.coarse_steps {
            return Err(Error::OutOfRange(format!(
                "increment (n={n}, k={k}) outside grid of {} steps x {} substeps",
                self.coarse_steps, self.refinement
            )));
        }
        Ok(n * self.refinement + k)
    }

    /// `xi_n^k`, addressed directly.
    pub fn gaussian_increment(&self, n: usize, k: usize) -> Result<Vec<f64>> {
        let j = self.flat_index(n, k)?;
        let mut rng = self.keystream();
        rng.set_word_pos((j * self.pairs() * 4) as u128);
        let mut out = vec![0.0; self.dim];
        fill_normals(&mut rng, &mut out);
        Ok(out)
    }

    /// `sum_{k < block} xi_n^k`: the fine increments of coarse step `n`
    /// aggregated, not a fresh draw.
    pub fn coarse_increment(&self, n: usize, block: usize) -> Result<Vec<f64>> {
        if block == 0 || block > self.refinement {
            return Err(Error::OutOfRange(format!(
                "block {block} must lie in 1..={}",
                self.refinement
            )));
        }
        let mut sum = self.gaussian_increment(n, 0)?;
        for k in 1..block {
            let xi = self.gaussian_increment(n, k)?;
            sum.iter_mut().zip(&xi).for_each(|(s, x)| *s += x);
        }
        Ok(sum)
    }

    /// Sequential reader starting at `(0, 0)`.
    pub fn cursor(&self) -> NoiseCursor {
        NoiseCursor {
            rng: self.keystream(),
            next: 0,
            limit: self.coarse_steps.saturating_mul(self.refinement),
        }
    }
}

/// Reads `xi` in flat index order `j = n * M + k`. Produces the same values as
/// [`NoiseStream::gaussian_increment`] without re-seeking the keystream.
#[derive(Debug, Clone)]
pub struct NoiseCursor {
    rng: ChaCha8Rng,
    next: usize,
    limit: usize,
}

impl NoiseCursor {
    /// Flat index of the next increment.
    pub fn position(&self) -> usize {
        self.next
    }

    pub fn next_into(&mut self, out: &mut [f64]) -> Result<()> {
        if self.next >= self.limit {
            return Err(Error::OutOfRange(format!(
                "noise stream exhausted after {} increments",
                self.limit
            )));
        }
        fill_normals(&mut self.rng, out);
        self.next += 1;
        Ok(())
    }
}

#[inline]
fn uniform_open(word: u64) -> f64 {
    ((word >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn fill_normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for chunk in out.chunks_mut(2) {
        let u1 = uniform_open(rng.next_u64());
        let u2 = uniform_open(rng.next_u64());
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = 2.0 * std::f64::consts::PI * u2;
        chunk[0] = radius * libm::cos(angle);
        if let Some(second) = chunk.get_mut(1) {
            *second = radius * libm::sin(angle);
        }
    }
}
