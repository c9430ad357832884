//! Reproducible Brownian increments.
//!
//! Each sample owns a ChaCha stream keyed by `(seed, stream, sample)`; the
//! `stream` is the training iteration or an evaluation domain. Draw `n` of a
//! sample is the `n`-th block of `m` standard normals on that stream, so the
//! value never depends on how samples are chunked or scheduled.

use crate::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream id reserved for evaluation rollouts.
pub const EVAL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseSource {
    Seeded { seed: u64, stream: u64 },
    /// All increments forced to zero.
    Zero,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_key(seed: u64, stream: u64, sample: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ sample)
}

impl NoiseSource {
    /// Standard-normal draws for one sample: `steps` vectors of length `dim`.
    pub fn sample_draws(&self, sample: usize, steps: usize, dim: usize) -> Vec<Vec<f64>> {
        match *self {
            NoiseSource::Zero => vec![vec![0.0; dim]; steps],
            NoiseSource::Seeded { seed, stream } => {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_key(seed, stream, sample as u64));
                (0..steps)
                    .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect()
            }
        }
    }

    /// Draws for a contiguous block of samples, one `dim × len` matrix per
    /// step.
    pub fn block(&self, samples: std::ops::Range<usize>, steps: usize, dim: usize) -> Vec<Matrix> {
        let cols = samples.len();
        let mut out = vec![Matrix::zeros(dim, cols); steps];
        if matches!(self, NoiseSource::Zero) {
            return out;
        }
        for (j, s) in samples.enumerate() {
            for (n, draw) in self.sample_draws(s, steps, dim).into_iter().enumerate() {
                out[n].set_col(j, &draw);
            }
        }
        out
    }
}
