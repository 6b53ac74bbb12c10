//! Least-squares fits of the backward process on polynomial features.

use nalgebra::DMatrix;

use super::basis::{binomial, MonomialBasis};
use crate::error::{Error, Result};
use crate::reduce::{add_vecs, chunked_reduce};

/// Relative ridge applied to the penalised feature block.
pub const RIDGE: f64 = 1e-10;
/// Ensembles whose covariance trace falls below this are fitted by a constant.
pub const COLLAPSE_TRACE: f64 = 1e-14;

/// How a slice turns (anchor, state) into features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// φ = basis(z(x)); the anchor is the state itself.
    Monomial,
    /// φ = [x_j · basis(z(anchor))]_{j,m} followed by a constant 1: fields
    /// linear in x with anchor-dependent coefficients plus an offset.
    Linear,
}

/// One time slice of a regression field. Features are monomials in the
/// standardised anchor z = (anchor − center) / scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSlice {
    pub kind: FeatureKind,
    pub basis: MonomialBasis,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// Input dimension of the linear factor (`Linear` only; 0 otherwise).
    pub linear_dim: usize,
    /// n_features × out_dim.
    pub coef: DMatrix<f64>,
}

/// Scratch buffers for slice evaluation.
#[derive(Debug, Clone, Default)]
pub struct EvalBuf {
    z: Vec<f64>,
    phi: Vec<f64>,
    feat: Vec<f64>,
}

impl FieldSlice {
    pub fn n_features(&self) -> usize {
        match self.kind {
            FeatureKind::Monomial => self.basis.len(),
            FeatureKind::Linear => self.linear_dim * self.basis.len() + 1,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.coef.ncols()
    }

    /// A slice that evaluates to zero everywhere.
    pub fn zero(kind: FeatureKind, anchor_dim: usize, linear_dim: usize, out_dim: usize) -> Self {
        let mut s = FieldSlice {
            kind,
            basis: MonomialBasis::new(anchor_dim, 0),
            center: vec![0.0; anchor_dim],
            scale: vec![1.0; anchor_dim],
            linear_dim,
            coef: DMatrix::zeros(0, 0),
        };
        s.coef = DMatrix::zeros(s.n_features(), out_dim);
        s
    }

    /// Penalisation mask: constants are left unpenalised.
    pub fn penalized(&self) -> Vec<bool> {
        match self.kind {
            FeatureKind::Monomial => (0..self.basis.len()).map(|m| m != 0).collect(),
            FeatureKind::Linear => (0..self.n_features()).map(|f| f + 1 != self.n_features()).collect(),
        }
    }

    pub fn features_into(&self, anchor: &[f64], x: &[f64], buf: &mut EvalBuf, out: &mut [f64]) {
        let d = self.center.len();
        buf.z.resize(d, 0.0);
        buf.phi.resize(self.basis.len(), 0.0);
        for j in 0..d {
            buf.z[j] = (anchor[j] - self.center[j]) / self.scale[j];
        }
        match self.kind {
            FeatureKind::Monomial => self.basis.eval_into(&buf.z, out),
            FeatureKind::Linear => {
                self.basis.eval_into(&buf.z, &mut buf.phi);
                let nb = self.basis.len();
                for j in 0..self.linear_dim {
                    for m in 0..nb {
                        out[j * nb + m] = x[j] * buf.phi[m];
                    }
                }
                out[self.linear_dim * nb] = 1.0;
            }
        }
    }

    /// p = coefᵀ φ(anchor, x).
    pub fn eval_into(&self, anchor: &[f64], x: &[f64], buf: &mut EvalBuf, out: &mut [f64]) {
        if self.kind == FeatureKind::Monomial && self.basis.degree() <= 1 {
            // Affine fast path; same summation order as the general one.
            let d = self.center.len();
            let affine = self.basis.degree() == 1;
            for (c, o) in out.iter_mut().enumerate() {
                let mut acc = self.coef[(0, c)];
                if affine {
                    for j in 0..d {
                        acc += (anchor[j] - self.center[j]) / self.scale[j] * self.coef[(1 + j, c)];
                    }
                }
                *o = acc;
            }
            return;
        }
        let nf = self.n_features();
        let mut feat = std::mem::take(&mut buf.feat);
        feat.resize(nf, 0.0);
        self.features_into(anchor, x, buf, &mut feat);
        for (c, o) in out.iter_mut().enumerate() {
            let col = self.coef.column(c);
            *o = feat.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
        }
        buf.feat = feat;
    }

    /// Evaluate a `Monomial` slice at y.
    pub fn eval(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim()];
        self.eval_into(y, y, &mut EvalBuf::default(), &mut out);
        out
    }

    /// ∂p/∂y of a `Monomial` slice at y (out_dim × d).
    pub fn gradient(&self, y: &[f64]) -> DMatrix<f64> {
        let d = self.center.len();
        let z: Vec<f64> = (0..d).map(|j| (y[j] - self.center[j]) / self.scale[j]).collect();
        let mut g = vec![0.0; self.basis.len() * d];
        self.basis.gradient_into(&z, &mut g);
        DMatrix::from_fn(self.out_dim(), d, |c, j| {
            (0..self.basis.len()).map(|m| self.coef[(m, c)] * g[m * d + j]).sum::<f64>() / self.scale[j]
        })
    }

    /// Row-major ∂p/∂y of a `Monomial` slice at y into `out` (out_dim × d).
    pub fn gradient_into(&self, y: &[f64], buf: &mut EvalBuf, out: &mut [f64]) {
        let d = self.center.len();
        let nb = self.basis.len();
        buf.z.resize(d, 0.0);
        for j in 0..d {
            buf.z[j] = (y[j] - self.center[j]) / self.scale[j];
        }
        let mut g = std::mem::take(&mut buf.feat);
        g.resize(nb * d, 0.0);
        self.basis.gradient_into(&buf.z, &mut g);
        for c in 0..self.out_dim() {
            for j in 0..d {
                out[c * d + j] = (0..nb).map(|m| self.coef[(m, c)] * g[m * d + j]).sum::<f64>() / self.scale[j];
            }
        }
        buf.feat = g;
    }

    /// Coefficients of a `Monomial` slice in the raw (unstandardised)
    /// monomial basis of the same degree, same ordering.
    pub fn raw_coefficients(&self) -> DMatrix<f64> {
        let nb = self.basis.len();
        let mut raw = DMatrix::zeros(nb, self.out_dim());
        for (m, alpha) in self.basis.exponents().iter().enumerate() {
            // Π_j ((y_j − c_j)/s_j)^{α_j} = Σ_{β ≤ α} Π_j C(α_j, β_j) y_j^{β_j} (−c_j)^{α_j−β_j} / s_j^{α_j}
            let mut beta = vec![0u32; alpha.len()];
            loop {
                let weight: f64 = alpha
                    .iter()
                    .zip(&beta)
                    .enumerate()
                    .map(|(j, (&a, &b))| binomial(a, b) * (-self.center[j]).powi((a - b) as i32) / self.scale[j].powi(a as i32))
                    .product();
                let target = self.basis.index_of(&beta).expect("sub-multi-index lies in the basis");
                for c in 0..self.out_dim() {
                    raw[(target, c)] += weight * self.coef[(m, c)];
                }
                // Odometer over β ≤ α.
                let mut j = 0;
                while j < beta.len() && beta[j] == alpha[j] {
                    beta[j] = 0;
                    j += 1;
                }
                if j == beta.len() {
                    break;
                }
                beta[j] += 1;
            }
        }
        raw
    }
}

/// Ensemble centring and scaling for the anchor coordinates, with the
/// effective degree (0 when the ensemble has collapsed).
pub fn standardization(center: &[f64], variances: &[f64], degree: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let trace: f64 = variances.iter().sum();
    if trace < COLLAPSE_TRACE {
        return (center.to_vec(), vec![1.0; center.len()], 0);
    }
    let scale = variances
        .iter()
        .zip(center)
        .map(|(v, c)| {
            let s = v.max(0.0).sqrt();
            if s > 1e-7 * (1.0 + c.abs()) {
                s
            } else {
                1.0
            }
        })
        .collect();
    (center.to_vec(), scale, degree)
}

/// Ridge least squares on the design [features | unpenalised extra columns].
///
/// `fill(i, row, target, scratch)` writes the design row and target of
/// sample `i`. Only columns flagged in `penalized` receive the ridge
/// 1e−10·trace/count of that block. Returns the n_cols × n_out coefficients.
pub fn least_squares<F>(n: usize, penalized: &[bool], n_out: usize, fill: F) -> Result<DMatrix<f64>>
where
    F: Fn(usize, &mut [f64], &mut [f64], &mut EvalBuf) + Sync + Send,
{
    let p = penalized.len();
    if n < p {
        return Err(Error::RankDeficient(format!("{n} samples for {p} regression columns")));
    }
    let sums = chunked_reduce(
        n,
        |range| {
            let mut acc = vec![0.0; p * p + p * n_out];
            let mut row = vec![0.0; p];
            let mut target = vec![0.0; n_out];
            let mut buf = EvalBuf::default();
            for i in range {
                fill(i, &mut row, &mut target, &mut buf);
                for a in 0..p {
                    let ra = row[a];
                    if ra == 0.0 {
                        continue;
                    }
                    for b in a..p {
                        acc[a * p + b] += ra * row[b];
                    }
                    for c in 0..n_out {
                        acc[p * p + a * n_out + c] += ra * target[c];
                    }
                }
            }
            acc
        },
        add_vecs,
    )
    .ok_or(Error::EmptyEnsemble)?;
    let inv_n = 1.0 / n as f64;
    let mut gram = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let v = sums[a * p + b] * inv_n;
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let rhs = DMatrix::from_fn(p, n_out, |a, c| sums[p * p + a * n_out + c] * inv_n);
    if gram.iter().chain(rhs.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("regression normal equations".into()));
    }
    let n_pen = penalized.iter().filter(|x| **x).count();
    if n_pen > 0 {
        let trace: f64 = (0..p).filter(|&a| penalized[a]).map(|a| gram[(a, a)]).sum();
        let mut ridge = RIDGE * trace / n_pen as f64;
        if ridge <= 0.0 {
            ridge = RIDGE;
        }
        for a in 0..p {
            if penalized[a] {
                gram[(a, a)] += ridge;
            }
        }
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("regression Gram matrix is not positive definite".into()))?;
    Ok(chol.solve(&rhs))
}

/// Fit p ≈ field(y) over the monomial basis of `degree` from samples
/// `ys` (N × d, particle-major) and `targets` (N × out_dim).
pub fn regress_field(ys: &[f64], targets: &[f64], dim: usize, out_dim: usize, degree: usize) -> Result<FieldSlice> {
    if dim == 0 || ys.len() % dim != 0 || targets.len() != ys.len() / dim * out_dim {
        return Err(Error::DimensionMismatch {
            what: "regression samples".into(),
            expected: ys.len() / dim.max(1) * out_dim,
            found: targets.len(),
        });
    }
    let n = ys.len() / dim;
    let m = crate::measure::moments(ys, dim)?;
    let variances: Vec<f64> = (0..dim).map(|j| m.covariance[(j, j)]).collect();
    let (center, scale, eff) = standardization(&m.mean, &variances, degree);
    let mut slice = FieldSlice {
        kind: FeatureKind::Monomial,
        basis: MonomialBasis::new(dim, eff),
        center,
        scale,
        linear_dim: 0,
        coef: DMatrix::zeros(0, 0),
    };
    let template = &slice;
    let coef = least_squares(n, &slice.penalized(), out_dim, |i, row, target, buf| {
        let y = &ys[i * dim..(i + 1) * dim];
        template.features_into(y, y, buf, row);
        target.copy_from_slice(&targets[i * out_dim..(i + 1) * out_dim]);
    })?;
    slice.coef = coef;
    Ok(slice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::ParticleEnsemble;

    fn sample(n: usize, d: usize) -> Vec<f64> {
        ParticleEnsemble::gaussian(&vec![0.5; d], 1.3, n, 17).unwrap().states().to_vec()
    }

    #[test]
    fn affine_targets_recovered() {
        let ys = sample(500, 2);
        let targets: Vec<f64> = ys.chunks(2).map(|y| 0.3 - 1.5 * y[0] + 2.0 * y[1]).collect();
        let slice = regress_field(&ys, &targets, 2, 1, 1).unwrap();
        let raw = slice.raw_coefficients();
        assert!((raw[(0, 0)] - 0.3).abs() < 1e-8);
        assert!((raw[(1, 0)] + 1.5).abs() < 1e-8);
        assert!((raw[(2, 0)] - 2.0).abs() < 1e-8);
        let g = slice.gradient(&[4.0, -2.0]);
        assert!((g[(0, 0)] + 1.5).abs() < 1e-8 && (g[(0, 1)] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn constant_targets() {
        let ys = sample(300, 1);
        let slice = regress_field(&ys, &vec![2.5; 300], 1, 1, 1).unwrap();
        let raw = slice.raw_coefficients();
        assert!((raw[(0, 0)] - 2.5).abs() < 1e-9);
        assert!(raw[(1, 0)].abs() < 1e-9);
    }

    #[test]
    fn quadratic_targets_give_l2_projection() {
        let ys = sample(400, 1);
        let targets: Vec<f64> = ys.iter().map(|y| y * y).collect();
        let slice = regress_field(&ys, &targets, 1, 1, 1).unwrap();
        // Direct projection with the raw Gram matrix of [1, y].
        let n = ys.len() as f64;
        let (s1, s2) = (ys.iter().sum::<f64>() / n, ys.iter().map(|y| y * y).sum::<f64>() / n);
        let s3 = ys.iter().map(|y| y.powi(3)).sum::<f64>() / n;
        let gram = nalgebra::Matrix2::new(1.0, s1, s1, s2);
        let coef = gram.try_inverse().unwrap() * nalgebra::Vector2::new(s2, s3);
        let raw = slice.raw_coefficients();
        assert!((raw[(0, 0)] - coef[0]).abs() < 1e-7);
        assert!((raw[(1, 0)] - coef[1]).abs() < 1e-7);
    }

    #[test]
    fn raw_coefficients_reproduce_quadratic_field() {
        let ys = sample(600, 2);
        let f = |y: &[f64]| 1.0 + y[0] - 2.0 * y[1] + 0.5 * y[0] * y[0] - y[0] * y[1] + 3.0 * y[1] * y[1];
        let targets: Vec<f64> = ys.chunks(2).map(f).collect();
        let slice = regress_field(&ys, &targets, 2, 1, 2).unwrap();
        let raw = slice.raw_coefficients();
        let expected = [1.0, 1.0, -2.0, 0.5, -1.0, 3.0];
        for (m, e) in expected.iter().enumerate() {
            assert!((raw[(m, 0)] - e).abs() < 1e-7, "{m}: {}", raw[(m, 0)]);
        }
        assert!((slice.eval(&[0.3, -0.4])[0] - f(&[0.3, -0.4])).abs() < 1e-8);
    }

    #[test]
    fn collapsed_ensemble_uses_constant_fit() {
        let ys = vec![1.0; 50];
        let slice = regress_field(&ys, &vec![4.0; 50], 1, 1, 2).unwrap();
        assert_eq!(slice.basis.degree(), 0);
        assert!((slice.eval(&[1.0])[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_rejected() {
        let r = regress_field(&[0.0, 1.0], &[0.0, 1.0], 1, 1, 3);
        assert!(matches!(r, Err(Error::RankDeficient(_))));
    }

    #[test]
    fn linear_slices_are_homogeneous() {
        let slice = FieldSlice {
            kind: FeatureKind::Linear,
            basis: MonomialBasis::new(1, 1),
            center: vec![0.0],
            scale: vec![1.0],
            linear_dim: 1,
            coef: DMatrix::from_column_slice(3, 1, &[2.0, 0.5, 0.0]),
        };
        let mut out = [0.0];
        slice.eval_into(&[3.0], &[1.5], &mut EvalBuf::default(), &mut out);
        assert_eq!(out[0], 1.5 * (2.0 + 0.5 * 3.0));
    }
}
