//! Sub-interval Picard iteration and backward concatenation, generic over
//! the forward–backward system being solved.

use rayon::prelude::*;
use serde::Serialize;

use super::regression::{least_squares, EvalBuf, FieldSlice};
use crate::error::{Error, Result};
use crate::reduce::{nan_max, CHUNK};

/// Distances beyond this (or non-finite) abort the Picard loop as divergent.
pub const DIVERGENCE_BOUND: f64 = 1e8;
/// Particles sampled for the proxy Lipschitz estimate.
const LIPSCHITZ_SAMPLE: usize = 128;

/// A forward–backward system discretised on a uniform grid of `n_steps`
/// steps: forward state x (dimension `state_dim`) per particle, backward
/// value p (dimension `out_dim`) represented by regression slices.
pub(crate) trait SweepSystem: Sync {
    type Law: Send + Sync;

    fn n_particles(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn n_steps(&self) -> usize;
    fn dt(&self) -> f64;
    fn time(&self, k: usize) -> f64;
    fn n_controls(&self) -> usize;

    fn initial(&self, i: usize, out: &mut [f64]);
    /// Point at which the slice basis is evaluated for particle i at step k.
    fn anchor<'a>(&'a self, k: usize, i: usize, x: &'a [f64]) -> &'a [f64];
    /// Feature layout (zero coefficients) fitted to the step-k states.
    fn layout(&self, k: usize, states: &[f64]) -> Result<FieldSlice>;
    /// Unpenalised control-variate columns for step k (mean zero given x_k).
    fn controls(&self, k: usize, i: usize, out: &mut [f64]);
    fn forward_step(&self, k: usize, i: usize, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()>;
    fn law(&self, k: usize, states: &[f64]) -> Result<Self::Law>;
    /// Backward driver F with p_k = E_k[p_{k+1} + dt·F(k+1, ...)].
    fn driver(&self, k: usize, i: usize, x: &[f64], p: &[f64], law: &Self::Law, out: &mut [f64]) -> Result<()>;
    fn terminal(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()>;
    fn zero_slice(&self) -> FieldSlice;
    /// Part of p known in closed form, added to the regression slice at
    /// steps k < n_steps; the slice then fits only the remainder.
    fn add_known(&self, _k: usize, _i: usize, _x: &[f64], _sign: f64, _out: &mut [f64]) {}
}

/// Picard iterations of one local solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardRecord {
    pub iterations: usize,
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    pub converged: bool,
}

impl PicardRecord {
    fn from_distances(distances: Vec<f64>, converged: bool) -> Self {
        let ratios = distances.windows(2).map(|w| w[1] / w[0]).collect();
        PicardRecord {
            iterations: distances.len(),
            distances,
            ratios,
            converged,
        }
    }
}

pub(crate) struct Engine<'s, S: SweepSystem> {
    pub sys: &'s S,
    n: usize,
    nx: usize,
    np: usize,
    k_steps: usize,
    /// Step-major paths: `[k][i][j]`.
    pub paths: Vec<f64>,
    pub field: Vec<FieldSlice>,
}

impl<'s, S: SweepSystem> Engine<'s, S> {
    pub fn new(sys: &'s S) -> Self {
        let (n, nx, np, k_steps) = (sys.n_particles(), sys.state_dim(), sys.out_dim(), sys.n_steps());
        Engine {
            sys,
            n,
            nx,
            np,
            k_steps,
            paths: vec![0.0; n * (k_steps + 1) * nx],
            field: vec![sys.zero_slice(); k_steps],
        }
    }

    pub fn with_field(sys: &'s S, field: Vec<FieldSlice>) -> Self {
        let mut e = Self::new(sys);
        e.field = field;
        e
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let off = (k * self.n + i) * self.nx;
        &self.paths[off..off + self.nx]
    }

    /// Step-k states of every particle, contiguous.
    pub fn step(&self, k: usize) -> &[f64] {
        &self.paths[k * self.n * self.nx..(k + 1) * self.n * self.nx]
    }

    pub fn gather(&self, k: usize) -> Vec<f64> {
        self.step(k).to_vec()
    }

    /// Propagate steps a..b with the current field, starting from the stored
    /// step-a states (or the initial law when `from_initial`). Returns the
    /// field values used, `[k − a][i][c]`.
    pub fn forward(&mut self, a: usize, b: usize, from_initial: bool) -> Result<Vec<f64>> {
        let (n, nx, np, span) = (self.n, self.nx, self.np, b - a);
        let sys = self.sys;
        let mut used = vec![0.0; n * span * np];
        if from_initial {
            let first = &mut self.paths[a * n * nx..(a + 1) * n * nx];
            for (i, x) in first.chunks_mut(nx).enumerate() {
                sys.initial(i, x);
            }
        }
        for k in a..b {
            let (head, tail) = self.paths.split_at_mut((k + 1) * n * nx);
            let cur = &head[k * n * nx..];
            let next = &mut tail[..n * nx];
            let field = &self.field[k];
            next.par_chunks_mut(CHUNK * nx)
                .zip(used[(k - a) * n * np..(k - a + 1) * n * np].par_chunks_mut(CHUNK * np))
                .enumerate()
                .try_for_each(|(c, (next, used))| -> Result<()> {
                    let mut buf = EvalBuf::default();
                    for local in 0..next.len() / nx {
                        let i = c * CHUNK + local;
                        let x = &cur[i * nx..(i + 1) * nx];
                        let p = &mut used[local * np..(local + 1) * np];
                        field.eval_into(sys.anchor(k, i, x), x, &mut buf, p);
                        sys.add_known(k, i, x, 1.0, p);
                        let out = &mut next[local * nx..(local + 1) * nx];
                        sys.forward_step(k, i, x, p, out)?;
                        if out.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFinite(format!("forward state at t = {}", sys.time(k + 1))));
                        }
                    }
                    Ok(())
                })?;
        }
        Ok(used)
    }

    /// Value of the terminal proxy at step b for every particle.
    fn proxy_values(&self, b: usize) -> Result<Vec<f64>> {
        let np = self.np;
        let mut out = vec![0.0; self.n * np];
        out.par_chunks_mut(CHUNK * np).enumerate().try_for_each(|(c, chunk)| -> Result<()> {
            let mut buf = EvalBuf::default();
            for local in 0..chunk.len() / np {
                let i = c * CHUNK + local;
                self.proxy_at(b, i, self.state(i, b), &mut buf, &mut chunk[local * np..(local + 1) * np])?;
            }
            Ok(())
        })?;
        Ok(out)
    }

    fn proxy_at(&self, b: usize, i: usize, x: &[f64], buf: &mut EvalBuf, out: &mut [f64]) -> Result<()> {
        if b == self.k_steps {
            self.sys.terminal(i, x, out)
        } else {
            self.field[b].eval_into(self.sys.anchor(b, i, x), x, buf, out);
            self.sys.add_known(b, i, x, 1.0, out);
            Ok(())
        }
    }

    /// Largest difference quotient of the step-b proxy over pairs from a
    /// fixed subsample of particles.
    pub fn proxy_lipschitz(&self, b: usize) -> Result<f64> {
        let m = self.n.min(LIPSCHITZ_SAMPLE);
        let stride = self.n / m;
        let idx: Vec<usize> = (0..m).map(|j| j * stride).collect();
        let mut buf = EvalBuf::default();
        let mut vals = vec![0.0; m * self.np];
        for (j, &i) in idx.iter().enumerate() {
            self.proxy_at(b, i, self.state(i, b), &mut buf, &mut vals[j * self.np..(j + 1) * self.np])?;
        }
        let mut best: f64 = 0.0;
        for a in 0..m {
            for c in a + 1..m {
                let dx = dist(self.state(idx[a], b), self.state(idx[c], b));
                if dx > 1e-12 {
                    let dp = dist(&vals[a * self.np..(a + 1) * self.np], &vals[c * self.np..(c + 1) * self.np]);
                    best = best.max(dp / dx);
                }
            }
        }
        Ok(best)
    }

    /// Picard iteration of the local forward–backward map on steps [a, b]
    /// with the terminal proxy at b held fixed.
    pub fn local_solve(&mut self, a: usize, b: usize, max_picard: usize, tol: f64) -> (PicardRecord, Option<Error>) {
        let mut distances = Vec::new();
        for _ in 0..max_picard {
            match self.picard_step(a, b) {
                Ok(d) => distances.push(d),
                Err(e) => return (PicardRecord::from_distances(distances, false), Some(e)),
            }
            let d = *distances.last().unwrap();
            if !d.is_finite() || d > DIVERGENCE_BOUND {
                return self.diverged(a, b, distances);
            }
            if d <= tol {
                return (PicardRecord::from_distances(distances, true), None);
            }
        }
        let record = PicardRecord::from_distances(distances.clone(), false);
        let last_ratio = record.ratios.last().copied().unwrap_or(f64::NAN);
        let (t_start, t_end) = (self.sys.time(a), self.sys.time(b));
        let err = if last_ratio >= 1.0 {
            Error::NonContraction {
                t_start,
                t_end,
                iterations: distances.len(),
                last_ratio,
                distances,
            }
        } else {
            Error::NotConverged {
                t_start,
                t_end,
                iterations: distances.len(),
                last_distance: *distances.last().unwrap(),
                distances,
            }
        };
        (record, Some(err))
    }

    fn diverged(&self, a: usize, b: usize, distances: Vec<f64>) -> (PicardRecord, Option<Error>) {
        let record = PicardRecord::from_distances(distances.clone(), false);
        let last_ratio = record.ratios.last().copied().unwrap_or(f64::INFINITY);
        let err = Error::NonContraction {
            t_start: self.sys.time(a),
            t_end: self.sys.time(b),
            iterations: distances.len(),
            last_ratio,
            distances,
        };
        (record, Some(err))
    }

    /// One application of the local map; returns the sup distance between
    /// the old and new field values along the new forward paths.
    fn picard_step(&mut self, a: usize, b: usize) -> Result<f64> {
        let used = self.forward(a, b, false)?;
        let (n, np, span, dt) = (self.n, self.np, b - a, self.sys.dt());
        let sys = self.sys;
        let laws: Vec<S::Law> = (a + 1..=b).map(|k| sys.law(k, self.step(k))).collect::<Result<_>>()?;
        let mut p_next = self.proxy_values(b)?;
        let mut new_slices = Vec::with_capacity(span);
        let mut sup: f64 = 0.0;
        let n_ctrl = sys.n_controls();
        for k in (a..b).rev() {
            let law = &laws[k - a];
            let mut targets = vec![0.0; n * np];
            targets.par_chunks_mut(CHUNK * np).enumerate().try_for_each(|(c, chunk)| -> Result<()> {
                let mut drv = vec![0.0; np];
                for local in 0..chunk.len() / np {
                    let i = c * CHUNK + local;
                    let p1 = &p_next[i * np..(i + 1) * np];
                    sys.driver(k + 1, i, self.state(i, k + 1), p1, law, &mut drv)?;
                    let t = &mut chunk[local * np..(local + 1) * np];
                    for ((t, p), f) in t.iter_mut().zip(p1).zip(&drv) {
                        *t = p + dt * f;
                    }
                    sys.add_known(k, i, self.state(i, k), -1.0, t);
                }
                Ok(())
            })?;
            let mut slice = sys.layout(k, self.step(k))?;
            let nf = slice.n_features();
            let mut penalized = slice.penalized();
            penalized.extend(std::iter::repeat_n(false, n_ctrl));
            let layout = &slice;
            let this = &*self;
            let coef = least_squares(n, &penalized, np, |i, row, target, buf| {
                let x = this.state(i, k);
                layout.features_into(sys.anchor(k, i, x), x, buf, &mut row[..nf]);
                sys.controls(k, i, &mut row[nf..]);
                target.copy_from_slice(&targets[i * np..(i + 1) * np]);
            })?;
            slice.coef = coef.rows(0, nf).into_owned();
            let slice_ref = &slice;
            let mut p_cur = vec![0.0; n * np];
            let step_sup = p_cur
                .par_chunks_mut(CHUNK * np)
                .enumerate()
                .map(|(c, chunk)| {
                    let mut buf = EvalBuf::default();
                    let mut worst: f64 = 0.0;
                    for local in 0..chunk.len() / np {
                        let i = c * CHUNK + local;
                        let x = this.state(i, k);
                        let p = &mut chunk[local * np..(local + 1) * np];
                        slice_ref.eval_into(sys.anchor(k, i, x), x, &mut buf, p);
                        sys.add_known(k, i, x, 1.0, p);
                        let old = &used[((k - a) * n + i) * np..((k - a) * n + i + 1) * np];
                        worst = nan_max(worst, dist(p, old));
                    }
                    worst
                })
                .collect::<Vec<f64>>()
                .into_iter()
                .fold(0.0, nan_max);
            sup = nan_max(sup, step_sup);
            p_next = p_cur;
            new_slices.push(slice);
        }
        new_slices.reverse();
        for (k, s) in (a..b).zip(new_slices) {
            self.field[k] = s;
        }
        Ok(sup)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One sub-interval of a concatenation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubintervalRecord {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
    /// Lipschitz estimate of the terminal proxy when the partition was built
    /// (absent when the partition was supplied).
    pub c_q: Option<f64>,
    pub delta_loc: Option<f64>,
    /// Picard record of every sweep, in sweep order.
    pub sweeps: Vec<PicardRecord>,
}

impl SubintervalRecord {
    pub fn max_ratio(&self) -> Option<f64> {
        self.sweeps.iter().flat_map(|s| s.ratios.iter().copied()).reduce(nan_max)
    }
}

pub(crate) struct SweepOutcome {
    pub records: Vec<SubintervalRecord>,
    pub partition: Vec<usize>,
    pub sweeps: usize,
    pub converged: bool,
    pub failure: Option<Error>,
}

/// Width chooser used while the partition is built: (c_q) ↦ (steps, δ).
pub(crate) type WidthRule<'a> = dyn Fn(f64) -> Result<(usize, f64)> + 'a;

/// Backward concatenation sweeps until a sweep leaves every local field
/// unchanged to within `tol`. With `partition = None` the partition is built
/// from the end during the first sweep using `width`.
pub(crate) fn run_sweeps<S: SweepSystem>(
    engine: &mut Engine<'_, S>,
    partition: Option<Vec<usize>>,
    width: &WidthRule<'_>,
    max_picard: usize,
    tol: f64,
    max_sweeps: usize,
) -> Result<SweepOutcome> {
    let k_steps = engine.k_steps;
    engine.forward(0, k_steps, true)?;
    let mut bounds = partition;
    let mut records: Vec<SubintervalRecord> = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    let mut failure = None;
    'outer: for sweep in 0..max_sweeps {
        sweeps = sweep + 1;
        let mut quiet = true;
        let mut b = k_steps;
        let mut idx = 0;
        let mut built = vec![k_steps];
        while b > 0 {
            let (a, c_q, delta) = match &bounds {
                Some(p) => (p[p.len() - 2 - idx], None, None),
                None => {
                    let c_q = engine.proxy_lipschitz(b)?;
                    let (steps, delta) = width(c_q)?;
                    let a = b.saturating_sub(steps.max(1));
                    built.push(a);
                    (a, Some(c_q), Some(delta))
                }
            };
            if records.len() == idx {
                records.push(SubintervalRecord {
                    t_start: engine.sys.time(a),
                    t_end: engine.sys.time(b),
                    steps: b - a,
                    c_q,
                    delta_loc: delta,
                    sweeps: Vec::new(),
                });
            }
            let (record, err) = engine.local_solve(a, b, max_picard, tol);
            if record.distances.first().is_none_or(|d| *d > tol) {
                quiet = false;
            }
            records[idx].sweeps.push(record);
            if let Some(e) = err {
                failure = Some(e);
                break 'outer;
            }
            b = a;
            idx += 1;
        }
        if bounds.is_none() {
            built.reverse();
            bounds = Some(built);
        }
        engine.forward(0, k_steps, true)?;
        if quiet {
            converged = true;
            break;
        }
    }
    let partition = bounds.unwrap_or_default();
    // Records were pushed from the end; present them in time order.
    records.reverse();
    Ok(SweepOutcome {
        records,
        partition,
        sweeps,
        converged,
        failure,
    })
}
