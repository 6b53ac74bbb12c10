//! The mean-field-game FBSDE as a [`SweepSystem`].

use nalgebra::DMatrix;

use super::engine::SweepSystem;
use super::regression::{standardization, FeatureKind, FieldSlice};
use super::MonomialBasis;
use crate::error::Result;
use crate::measure::moments;
use crate::model::{CostModel, MeasureSummary};

/// Largest dimension handled with stack scratch buffers.
const STACK_DIM: usize = 16;

pub(crate) fn with_buf<R>(d: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    if d <= STACK_DIM {
        let mut a = [0.0; STACK_DIM];
        f(&mut a[..d])
    } else {
        f(&mut vec![0.0; d])
    }
}

pub(crate) struct MfgSystem<'a, M: CostModel + ?Sized> {
    pub model: &'a M,
    pub init: &'a [f64],
    /// Step-major Brownian increments `[k][i][j]`.
    pub increments: Vec<f64>,
    pub eta: DMatrix<f64>,
    pub n: usize,
    pub d: usize,
    pub k_steps: usize,
    pub dt: f64,
    pub t0: f64,
    pub degree: usize,
    /// Replaces ∇_y h₁ as the terminal condition when present.
    pub terminal_slice: Option<FieldSlice>,
}

impl<M: CostModel + ?Sized> MfgSystem<'_, M> {
    fn increment(&self, k: usize, i: usize) -> &[f64] {
        let off = (k * self.n + i) * self.d;
        &self.increments[off..off + self.d]
    }
}

impl<M: CostModel + ?Sized> SweepSystem for MfgSystem<'_, M> {
    type Law = MeasureSummary;

    fn n_particles(&self) -> usize {
        self.n
    }

    fn state_dim(&self) -> usize {
        self.d
    }

    fn out_dim(&self) -> usize {
        self.d
    }

    fn n_steps(&self) -> usize {
        self.k_steps
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    fn n_controls(&self) -> usize {
        self.d
    }

    fn initial(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.init[i * self.d..(i + 1) * self.d]);
    }

    fn anchor<'b>(&'b self, _k: usize, _i: usize, x: &'b [f64]) -> &'b [f64] {
        x
    }

    fn layout(&self, _k: usize, states: &[f64]) -> Result<FieldSlice> {
        let m = moments(states, self.d)?;
        let variances: Vec<f64> = (0..self.d).map(|j| m.covariance[(j, j)]).collect();
        let (center, scale, degree) = standardization(&m.mean, &variances, self.degree);
        let basis = MonomialBasis::new(self.d, degree);
        let nb = basis.len();
        Ok(FieldSlice {
            kind: FeatureKind::Monomial,
            basis,
            center,
            scale,
            linear_dim: 0,
            coef: DMatrix::zeros(nb, self.d),
        })
    }

    fn controls(&self, k: usize, i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.increment(k, i));
    }

    fn forward_step(&self, k: usize, i: usize, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        let dw = self.increment(k, i);
        with_buf(self.d, |u| {
            self.model.feedback_into(x, p, u)?;
            for j in 0..self.d {
                let noise: f64 = (0..self.d).map(|l| self.eta[(j, l)] * dw[l]).sum();
                out[j] = x[j] + self.dt * u[j] + noise;
            }
            Ok(())
        })
    }

    fn law(&self, _k: usize, states: &[f64]) -> Result<MeasureSummary> {
        moments(states, self.d)
    }

    fn driver(&self, _k: usize, _i: usize, x: &[f64], p: &[f64], law: &MeasureSummary, out: &mut [f64]) -> Result<()> {
        with_buf(2 * self.d, |buf| {
            let (u, g2) = buf.split_at_mut(self.d);
            self.model.feedback_into(x, p, u)?;
            self.model.grad_y_g1_into(x, u, out);
            self.model.grad_y_g2_into(x, law, g2);
            for (o, g) in out.iter_mut().zip(g2.iter()) {
                *o += g;
            }
            Ok(())
        })
    }

    fn terminal(&self, _i: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.terminal_slice {
            Some(s) => {
                out.copy_from_slice(&s.eval(x));
            }
            None => self.model.grad_h1_into(x, out),
        }
        Ok(())
    }

    fn zero_slice(&self) -> FieldSlice {
        FieldSlice::zero(FeatureKind::Monomial, self.d, 0, self.d)
    }
}
