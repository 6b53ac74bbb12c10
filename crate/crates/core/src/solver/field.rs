use std::fmt::Write as _;

use nalgebra::DMatrix;

use super::regression::FieldSlice;

/// Regression map y ↦ p at every step time t_k, k < K. The terminal time is
/// covered by ∇_y h₁ and has no slice.
#[derive(Debug, Clone)]
pub struct DecouplingField {
    pub times: Vec<f64>,
    pub slices: Vec<FieldSlice>,
}

impl DecouplingField {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Index of the slice whose time is nearest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        let n = self.times.len();
        if n < 2 {
            return 0;
        }
        let h = self.times[1] - self.times[0];
        (((t - self.times[0]) / h).round().max(0.0) as usize).min(n - 1)
    }

    pub fn eval(&self, k: usize, y: &[f64]) -> Vec<f64> {
        self.slices[k].eval(y)
    }

    /// ∂p/∂y at step k; for an affine field this is the slope matrix.
    pub fn slope(&self, k: usize, y: &[f64]) -> DMatrix<f64> {
        self.slices[k].gradient(y)
    }

    /// Diagnostic estimate of the martingale integrand, q ≈ (∂p/∂y)·η.
    pub fn martingale_integrand(&self, k: usize, y: &[f64], eta: &DMatrix<f64>) -> DMatrix<f64> {
        self.slope(k, y) * eta
    }

    /// CSV `t,coeff_index,value` with raw monomial coefficients; the index
    /// is basis_index·out_dim + component.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,coeff_index,value\n");
        for (t, slice) in self.times.iter().zip(&self.slices) {
            let raw = slice.raw_coefficients();
            let n_out = raw.ncols();
            for m in 0..raw.nrows() {
                for c in 0..n_out {
                    let _ = writeln!(out, "{t:.16e},{},{:.16e}", m * n_out + c, raw[(m, c)]);
                }
            }
        }
        out
    }
}
