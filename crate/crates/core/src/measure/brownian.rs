use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::erf::erfc_inv;

use crate::reduce::CHUNK;

/// Standard normal quantile of a uniform in (0, 1).
pub fn standard_normal(u: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

fn open_uniform(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Keyed counter-based stream: the ChaCha key is (seed, domain), the nonce
/// is the stream index and the block counter the position, so any draw is a
/// pure function of (seed, domain, stream, position).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub domain: u64,
}

impl StreamKey {
    pub const BROWNIAN: u64 = 1;
    pub const INITIAL_LAW: u64 = 2;
    pub const VALUE_PATHS: u64 = 3;
    pub const SLICED_W2: u64 = 4;
    pub const MONOTONICITY: u64 = 5;

    pub fn new(seed: u64, domain: u64) -> Self {
        StreamKey { seed, domain }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.domain.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        rng
    }

    /// Fill `out` with the standard normals of block `block` (block size
    /// `out.len()`) of stream `stream`.
    pub fn normals(&self, stream: u64, block: u64, out: &mut [f64]) {
        let mut rng = self.rng(stream);
        rng.set_word_pos(u128::from(block) * out.len() as u128 * 2);
        for z in out.iter_mut() {
            *z = standard_normal(open_uniform(rng.next_u64()));
        }
    }

    /// Consecutive blocks 0.. of one stream, written contiguously.
    pub fn normals_sequential(&self, stream: u64, out: &mut [f64]) {
        let mut rng = self.rng(stream);
        for z in out.iter_mut() {
            *z = standard_normal(open_uniform(rng.next_u64()));
        }
    }

    pub fn uniform(&self, stream: u64, index: u64) -> f64 {
        let mut rng = self.rng(stream);
        rng.set_word_pos(u128::from(index) * 2);
        open_uniform(rng.next_u64())
    }
}

const _: () = assert!(CHUNK % 2 == 0, "antithetic pairs must not straddle chunks");

/// Brownian increments ΔW for `n_particles` × `n_steps` × `dim`, each
/// component N(0, dt). Particle 2i+1 receives the negated increments of
/// particle 2i (antithetic pairs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrownianDriver {
    pub seed: u64,
    pub n_particles: usize,
    pub n_steps: usize,
    pub dim: usize,
    pub dt: f64,
}

impl BrownianDriver {
    pub fn new(seed: u64, n_particles: usize, n_steps: usize, dim: usize, dt: f64) -> Self {
        BrownianDriver {
            seed,
            n_particles,
            n_steps,
            dim,
            dt,
        }
    }

    fn key(&self) -> StreamKey {
        StreamKey::new(self.seed, StreamKey::BROWNIAN)
    }

    /// ΔW of one particle at one step.
    pub fn increment(&self, particle: usize, step: usize, out: &mut [f64]) {
        self.key().normals((particle / 2) as u64, step as u64, out);
        let scale = self.dt.sqrt() * if particle % 2 == 0 { 1.0 } else { -1.0 };
        out.iter_mut().for_each(|x| *x *= scale);
    }

    /// All increments, step-major: `[step][particle][component]`.
    pub fn generate(&self) -> Vec<f64> {
        let (n, k, d) = (self.n_particles, self.n_steps, self.dim);
        let key = self.key();
        let scale = self.dt.sqrt();
        let per_particle = k * d;
        let chunks: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = ((c + 1) * CHUNK).min(n);
                let mut buf = vec![0.0; (hi - lo) * per_particle];
                for i in lo..hi {
                    let off = (i - lo) * per_particle;
                    if i % 2 == 1 {
                        let (prev, cur) = buf[off - per_particle..off + per_particle].split_at_mut(per_particle);
                        for (a, b) in cur.iter_mut().zip(prev.iter()) {
                            *a = -*b;
                        }
                        continue;
                    }
                    let row = &mut buf[off..off + per_particle];
                    key.normals_sequential((i / 2) as u64, row);
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                buf
            })
            .collect();
        let mut out = vec![0.0; n * per_particle];
        out.par_chunks_mut(n * d).enumerate().for_each(|(step, dst)| {
            for (c, buf) in chunks.iter().enumerate() {
                let lo = c * CHUNK;
                let count = buf.len() / per_particle;
                for local in 0..count {
                    let src = &buf[local * per_particle + step * d..local * per_particle + (step + 1) * d];
                    dst[(lo + local) * d..(lo + local + 1) * d].copy_from_slice(src);
                }
            }
        });
        out
    }
}
