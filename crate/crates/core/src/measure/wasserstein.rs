use serde::Serialize;

use super::brownian::StreamKey;
use super::ParticleEnsemble;
use crate::error::{Error, Result};

/// Largest ensemble for which d > 1 uses the exact assignment solver.
pub const EXACT_ASSIGNMENT_MAX: usize = 512;
const SLICED_DIRECTIONS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct W2Distance {
    pub value: f64,
    pub approximate: bool,
}

/// 2-Wasserstein distance between two equally weighted ensembles of equal
/// size: sorted matching in d = 1, optimal assignment for N ≤ 512, otherwise
/// a sliced estimate over 64 fixed directions (flagged approximate).
pub fn w2_distance(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<W2Distance> {
    if a.len() != b.len() {
        return Err(Error::UnequalCounts {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            what: "ensemble dimension".into(),
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let n = a.len();
    let d = a.dim();
    if d == 1 {
        return Ok(W2Distance {
            value: sorted_w2_sq(a.states().to_vec(), b.states().to_vec()).sqrt(),
            approximate: false,
        });
    }
    if n <= EXACT_ASSIGNMENT_MAX {
        let cost: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| sq_dist(a.particle(i), b.particle(j)))
            .collect();
        let assignment = hungarian(&cost, n);
        let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        return Ok(W2Distance {
            value: (total / n as f64).sqrt(),
            approximate: false,
        });
    }
    // Sliced estimate; the factor d makes E_θ[(θ·x)²] = |x|²/d consistent
    // with the exact metric on translations.
    let key = StreamKey::new(0x5eed, StreamKey::SLICED_W2);
    let mut theta = vec![0.0; d];
    let mut acc = 0.0;
    for k in 0..SLICED_DIRECTIONS {
        key.normals(k as u64, 0, &mut theta);
        let norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
        theta.iter_mut().for_each(|x| *x /= norm);
        let project = |e: &ParticleEnsemble| -> Vec<f64> {
            (0..n).map(|i| e.particle(i).iter().zip(&theta).map(|(x, t)| x * t).sum()).collect()
        };
        acc += sorted_w2_sq(project(a), project(b));
    }
    Ok(W2Distance {
        value: (d as f64 * acc / SLICED_DIRECTIONS as f64).sqrt(),
        approximate: true,
    })
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn sorted_w2_sq(mut x: Vec<f64>, mut y: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

/// Minimum-cost perfect assignment for an n×n row-major cost matrix
/// (shortest augmenting paths with potentials, O(n³)). Returns the column
/// assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}
