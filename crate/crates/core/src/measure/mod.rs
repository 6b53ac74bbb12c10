//! Particle representation of population laws.

mod brownian;
mod wasserstein;

pub use brownian::{standard_normal, BrownianDriver, StreamKey};
pub use wasserstein::{hungarian, w2_distance, W2Distance};

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::MeasureSummary;
use crate::reduce::{add_vecs, chunked_reduce};

/// N particles in ℝᵈ, stored particle-major (`states[i*d..(i+1)*d]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    states: Vec<f64>,
    pub seed_tag: String,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, states: Vec<f64>, seed_tag: impl Into<String>) -> Result<Self> {
        if dim == 0 || states.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if states.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                what: "ensemble storage length".into(),
                expected: dim * (states.len() / dim + 1),
                found: states.len(),
            });
        }
        if states.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("ensemble states".into()));
        }
        Ok(ParticleEnsemble {
            dim,
            states,
            seed_tag: seed_tag.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).ok_or(Error::EmptyEnsemble)?;
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                what: "ensemble row".into(),
                expected: dim,
                found: bad.len(),
            });
        }
        Self::new(dim, rows.concat(), "explicit")
    }

    /// N(mean, std²·I) sample with antithetic pairs (particle 2i+1 mirrors
    /// 2i about the mean), so an even-sized ensemble has the exact mean.
    pub fn gaussian(mean: &[f64], std: f64, n: usize, seed: u64) -> Result<Self> {
        let d = mean.len();
        if n == 0 || d == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let key = StreamKey::new(seed, StreamKey::INITIAL_LAW);
        let mut states = vec![0.0; n * d];
        let mut z = vec![0.0; d];
        for i in 0..n {
            key.normals(i as u64 / 2, 0, &mut z);
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            for j in 0..d {
                states[i * d + j] = mean[j] + sign * std * z[j];
            }
        }
        Self::new(d, states, format!("gaussian(seed={seed}, n={n}, std={std})"))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// CSV with header `particle,x1,...,xd`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("particle");
        for j in 1..=self.dim {
            let _ = write!(out, ",x{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{i}");
            for x in self.particle(i) {
                let _ = write!(out, ",{x:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Moments of `n = states.len()/d` particles: mean, population covariance
/// (1/N) and average squared norm. Reductions use fixed chunks, so the
/// result does not depend on the worker count.
pub fn moments(states: &[f64], d: usize) -> Result<MeasureSummary> {
    if d == 0 || states.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let n = states.len() / d;
    let sums = chunked_reduce(
        n,
        |range| {
            let mut acc = vec![0.0; d + 1];
            for i in range {
                let y = &states[i * d..(i + 1) * d];
                for j in 0..d {
                    acc[j] += y[j];
                    acc[d] += y[j] * y[j];
                }
            }
            acc
        },
        add_vecs,
    )
    .ok_or(Error::EmptyEnsemble)?;
    let inv_n = 1.0 / n as f64;
    let mean: Vec<f64> = sums[..d].iter().map(|s| s * inv_n).collect();
    let mean_ref = &mean;
    let centered = chunked_reduce(
        n,
        |range| {
            let mut acc = vec![0.0; d * d];
            for i in range {
                let y = &states[i * d..(i + 1) * d];
                for a in 0..d {
                    let ya = y[a] - mean_ref[a];
                    for b in a..d {
                        acc[a * d + b] += ya * (y[b] - mean_ref[b]);
                    }
                }
            }
            acc
        },
        add_vecs,
    )
    .ok_or(Error::EmptyEnsemble)?;
    let mut covariance = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = centered[a * d + b] * inv_n;
            covariance[(a, b)] = v;
            covariance[(b, a)] = v;
        }
    }
    let summary = MeasureSummary {
        mean,
        covariance,
        second_moment: sums[d] * inv_n,
    };
    if summary.second_moment.is_finite() && summary.mean.iter().all(|x| x.is_finite()) {
        Ok(summary)
    } else {
        Err(Error::NonFinite("ensemble moments".into()))
    }
}

/// (mean, covariance, second moment) of an ensemble.
pub fn empirical_moments(ensemble: &ParticleEnsemble) -> Result<MeasureSummary> {
    moments(&ensemble.states, ensemble.dim)
}

/// Law summaries on a time grid plus optional full ensembles at checkpoints.
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    pub grid: Vec<f64>,
    pub summaries: Vec<MeasureSummary>,
    pub checkpoints: Vec<(f64, ParticleEnsemble)>,
}

impl MeasureFlow {
    pub fn dim(&self) -> usize {
        self.summaries.first().map(|s| s.mean.len()).unwrap_or(0)
    }

    /// Index of the grid node nearest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        let n = self.grid.len();
        if n < 2 {
            return 0;
        }
        let t0 = self.grid[0];
        let h = (self.grid[n - 1] - t0) / (n - 1) as f64;
        (((t - t0) / h).round().max(0.0) as usize).min(n - 1)
    }

    /// CSV with header `s,mean_1..mean_d,second_moment`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("s");
        for j in 1..=d {
            let _ = write!(out, ",mean_{j}");
        }
        out.push_str(",second_moment\n");
        for (s, m) in self.grid.iter().zip(&self.summaries) {
            let _ = write!(out, "{s:.16e}");
            for x in &m.mean {
                let _ = write!(out, ",{x:.16e}");
            }
            let _ = writeln!(out, ",{:.16e}", m.second_moment);
        }
        out
    }
}
