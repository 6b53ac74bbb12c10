//! Monte-Carlo value function under a frozen flow and the HJB residual.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::{MeasureFlow, StreamKey};
use crate::model::{hamiltonian, CostModel};
use crate::reduce::{add_vecs, chunked_reduce};
use crate::solver::{DecouplingField, EvalBuf};

/// Fewest paths accepted by [`value_function`].
pub const MIN_PATHS: usize = 100;
/// Finite-difference step of the gradient estimate.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub value: f64,
    /// Central differences with step [`FD_STEP`] on common random numbers.
    pub grad_fd: Vec<f64>,
    /// Standard error of `value` over independent antithetic pairs.
    pub std_error: f64,
    pub n_paths: usize,
}

fn check_cover(flow: &MeasureFlow, field: &DecouplingField, d: usize) -> Result<()> {
    if flow.grid.len() != field.len() + 1 || field.times.first() != flow.grid.first() {
        return Err(Error::InvalidConfig("flow and field grids do not match".into()));
    }
    if flow.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "measure flow".into(),
            expected: d,
            found: flow.dim(),
        });
    }
    Ok(())
}

/// Cost of one path from `x` at step `k0` with increments `dw` (step-major
/// `[k][j]`), minus two mean-zero control variates: Σ p_k·ξ_k cancels the
/// leading martingale part of the cost and ½ Σ ∇p_k : (ξ_kξ_kᵀ − ηηᵀΔt) the
/// second-order Itô part, where ξ_k = η ΔW_k. The second one keeps the noise
/// of time differences between neighbouring start steps bounded as Δt → 0.
#[allow(clippy::too_many_arguments)]
fn path_cost<M: CostModel + ?Sized>(
    model: &M,
    flow: &MeasureFlow,
    field: &DecouplingField,
    x: &[f64],
    k0: usize,
    dw: &[f64],
    sign: f64,
    buf: &mut EvalBuf,
) -> Result<f64> {
    let d = x.len();
    let eta = model.diffusion();
    let k_end = field.len();
    let mut y = x.to_vec();
    let mut p = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut grad = vec![0.0; d * d];
    let mut xi = vec![0.0; d];
    let gram = eta * eta.transpose();
    let mut cost = 0.0;
    let mut cv = 0.0;
    for k in k0..k_end {
        let dt = flow.grid[k + 1] - flow.grid[k];
        let slice = &field.slices[k];
        slice.eval_into(&y, &y, buf, &mut p);
        slice.gradient_into(&y, buf, &mut grad);
        model.feedback_into(&y, &p, &mut u)?;
        cost += dt * (model.g1(&y, &u).value + model.g2(&y, &flow.summaries[k]).value);
        let w = &dw[(k - k0) * d..(k - k0 + 1) * d];
        for (j, x) in xi.iter_mut().enumerate() {
            *x = (0..d).map(|l| eta[(j, l)] * sign * w[l]).sum();
        }
        for j in 0..d {
            cv += p[j] * xi[j];
            for l in 0..d {
                cv += 0.5 * grad[j * d + l] * (xi[j] * xi[l] - dt * gram[(j, l)]);
            }
            y[j] += dt * u[j] + xi[j];
        }
    }
    cost += model.h1(&y).value + model.h2(&flow.summaries[k_end]);
    if !cost.is_finite() {
        return Err(Error::NonFinite("value path cost".into()));
    }
    Ok(cost - cv)
}

/// V(x, t) by Monte-Carlo of the running and terminal cost along the field's
/// feedback under the frozen flow, with its finite-difference gradient.
/// `t` is rounded to the nearest grid time.
pub fn value_function<M: CostModel + ?Sized>(
    model: &M,
    flow: &MeasureFlow,
    field: &DecouplingField,
    x: &[f64],
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    estimate(model, flow, field, x, t, n_paths, seed, true)
}

/// Shared estimator. Pair `m` draws its step-k increment from block k of
/// stream m whatever the start step, so estimates at different (x, t) use
/// common random numbers.
#[allow(clippy::too_many_arguments)]
fn estimate<M: CostModel + ?Sized>(
    model: &M,
    flow: &MeasureFlow,
    field: &DecouplingField,
    x: &[f64],
    t: f64,
    n_paths: usize,
    seed: u64,
    with_grad: bool,
) -> Result<ValueEstimate> {
    let d = model.dim();
    if n_paths < MIN_PATHS {
        return Err(Error::InsufficientPaths {
            requested: n_paths,
            minimum: MIN_PATHS,
        });
    }
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            what: "value-function point".into(),
            expected: d,
            found: x.len(),
        });
    }
    check_cover(flow, field, d)?;
    let k0 = flow.index_of(t);
    let steps = field.len() - k0;
    let key = StreamKey::new(seed, StreamKey::VALUE_PATHS);
    let n_pairs = n_paths.div_ceil(2);
    // Per pair: [mean V, mean V², then mean V(x ± h e_j) for each j].
    let width = if with_grad { 2 + 2 * d } else { 2 };
    let sums = chunked_reduce(
        n_pairs,
        |range| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; width];
            let mut dw = vec![0.0; steps * d];
            let mut buf = EvalBuf::default();
            let mut shifted = x.to_vec();
            for pair in range {
                for (s, w) in dw.chunks_mut(d).enumerate() {
                    let k = k0 + s;
                    key.normals(pair as u64, k as u64, w);
                    let sqrt_dt = (flow.grid[k + 1] - flow.grid[k]).sqrt();
                    w.iter_mut().for_each(|z| *z *= sqrt_dt);
                }
                let members: &[f64] = if 2 * pair + 1 < n_paths { &[1.0, -1.0] } else { &[1.0] };
                let share = 1.0 / members.len() as f64;
                let mut v = 0.0;
                for &sign in members {
                    v += share * path_cost(model, flow, field, x, k0, &dw, sign, &mut buf)?;
                    if !with_grad {
                        continue;
                    }
                    for j in 0..d {
                        for (slot, h) in [(2 + 2 * j, FD_STEP), (3 + 2 * j, -FD_STEP)] {
                            shifted[j] = x[j] + h;
                            acc[slot] += share * path_cost(model, flow, field, &shifted, k0, &dw, sign, &mut buf)?;
                            shifted[j] = x[j];
                        }
                    }
                }
                acc[0] += v;
                acc[1] += v * v;
            }
            Ok(acc)
        },
        |a, b| Ok(add_vecs(a?, b?)),
    )
    .ok_or(Error::EmptyEnsemble)??;
    let m = n_pairs as f64;
    let mean = sums[0] / m;
    let var = (sums[1] / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
    let grad_fd = if with_grad {
        (0..d).map(|j| (sums[2 + 2 * j] - sums[3 + 2 * j]) / m / (2.0 * FD_STEP)).collect()
    } else {
        Vec::new()
    };
    Ok(ValueEstimate {
        value: mean,
        grad_fd,
        std_error: (var / m).sqrt(),
        n_paths,
    })
}

/// Space–time lattice x_min + i·dx (i < nx), t_min + n·dt (n < nt).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lattice {
    pub x_min: f64,
    pub dx: f64,
    pub nx: usize,
    pub t_min: f64,
    pub dt: f64,
    pub nt: usize,
}

impl Lattice {
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    pub fn t(&self, n: usize) -> f64 {
        self.t_min + n as f64 * self.dt
    }
}

/// ∂ₜV + ½ηη ∂ₓₓV + H(x, 𝕃(t), ∂ₓV) at the interior lattice nodes.
#[derive(Debug, Clone, Serialize)]
pub struct HjbResidual {
    pub lattice: Lattice,
    /// `values[n][i]` = V(x_i, t_n).
    pub values: Vec<Vec<f64>>,
    /// `(t, x, residual)` for 0 < n < nt−1, 0 < i < nx−1.
    pub residual: Vec<(f64, f64, f64)>,
    pub max_abs: f64,
}

impl HjbResidual {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,residual\n");
        for (t, x, r) in &self.residual {
            let _ = writeln!(out, "{t:.16e},{x:.16e},{r:.16e}");
        }
        out
    }
}

/// Tabulate V on the lattice (common random numbers across nodes) and form
/// the HJB residual by centred differences. One-dimensional models only.
pub fn hjb_residual<M: CostModel + ?Sized>(
    model: &M,
    flow: &MeasureFlow,
    lattice: &Lattice,
    field: &DecouplingField,
    n_paths: usize,
    seed: u64,
) -> Result<HjbResidual> {
    if model.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            expected: 1,
            found: model.dim(),
        });
    }
    if lattice.nx < 3 || lattice.nt < 3 || !(lattice.dx > 0.0 && lattice.dt > 0.0) {
        return Err(Error::InvalidConfig("HJB lattice needs at least 3×3 nodes and positive steps".into()));
    }
    check_cover(flow, field, 1)?;
    let horizon = *flow.grid.last().unwrap();
    if lattice.t(lattice.nt - 1) > horizon + 1e-12 || lattice.t_min < flow.grid[0] - 1e-12 {
        return Err(Error::InvalidConfig("HJB lattice extends beyond the flow".into()));
    }
    let nodes: Vec<(usize, usize)> = (0..lattice.nt).flat_map(|n| (0..lattice.nx).map(move |i| (n, i))).collect();
    let flat: Vec<f64> = nodes
        .par_iter()
        .map(|&(n, i)| estimate(model, flow, field, &[lattice.x(i)], lattice.t(n), n_paths, seed, false).map(|v| v.value))
        .collect::<Result<_>>()?;
    let values: Vec<Vec<f64>> = flat.chunks(lattice.nx).map(|r| r.to_vec()).collect();
    let eta = model.diffusion()[(0, 0)];
    let (dx, dt) = (lattice.dx, lattice.dt);
    let mut residual = Vec::new();
    let mut max_abs: f64 = 0.0;
    for n in 1..lattice.nt - 1 {
        let law = &flow.summaries[flow.index_of(lattice.t(n))];
        for i in 1..lattice.nx - 1 {
            let v = &values;
            let vt = (v[n + 1][i] - v[n - 1][i]) / (2.0 * dt);
            let vx = (v[n][i + 1] - v[n][i - 1]) / (2.0 * dx);
            let vxx = (v[n][i + 1] - 2.0 * v[n][i] + v[n][i - 1]) / (dx * dx);
            let h = hamiltonian(model, &[lattice.x(i)], law, &[vx])?;
            let r = vt + 0.5 * eta * eta * vxx + h;
            max_abs = max_abs.max(r.abs());
            residual.push((lattice.t(n), lattice.x(i), r));
        }
    }
    Ok(HjbResidual {
        lattice: *lattice,
        values,
        residual,
        max_abs,
    })
}
