//! Closed-form linear-quadratic machinery.
//!
//! Taking expectations in the LQ FBSDE gives the linear mean-path system
//! d/ds (ȳ, p̄) = Π (ȳ, p̄) with p̄(T) = G ȳ(T), G = ½(Q_T + Q_Tᵀ). Its
//! propagator Φ(s) = exp(Πs) decides solvability through the block
//! Φ₂₂ − GΦ₁₂; the individual deviation from the mean is decoupled by the
//! Riccati matrix P(s).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::analysis::{ci_margin, cii_margin, lifespan};
use crate::error::{Error, Result};
use crate::linalg::{expm, inverse, solve, symmetrize};
use crate::model::{assumption_constants, counterexample_model, AssumptionConstants, LqModel};

/// Overflow guard for Riccati entries.
pub const RICCATI_GUARD: f64 = 1e12;
const BISECTION_WIDTH: f64 = 1e-8;

/// Π = [[0, −2(R+Rᵀ)⁻¹], [−½(Q+Qᵀ) − ½(Q̄+Q̄ᵀ)(I−S), 0]].
pub fn build_pi(model: &LqModel) -> Result<DMatrix<f64>> {
    model.validate()?;
    let d = model.dim;
    let rr = &model.r + model.r.transpose();
    let top = -2.0 * inverse(&rr, "R + Rᵀ")?;
    let ident = DMatrix::<f64>::identity(d, d);
    let bottom = -symmetrize(&model.q) - symmetrize(&model.qbar) * (&ident - &model.s);
    let mut pi = DMatrix::zeros(2 * d, 2 * d);
    pi.view_mut((0, d), (d, d)).copy_from(&top);
    pi.view_mut((d, 0), (d, d)).copy_from(&bottom);
    Ok(pi)
}

/// Φ(s) = exp(Πs) split into d×d blocks.
#[derive(Debug, Clone)]
pub struct FundamentalMatrix {
    pub s: f64,
    pub phi11: DMatrix<f64>,
    pub phi12: DMatrix<f64>,
    pub phi21: DMatrix<f64>,
    pub phi22: DMatrix<f64>,
}

impl FundamentalMatrix {
    pub fn new(pi: &DMatrix<f64>, s: f64) -> Result<Self> {
        let d = pi.nrows() / 2;
        let phi = expm(&(pi * s))?;
        let block = |r: usize, c: usize| phi.view((r * d, c * d), (d, d)).into_owned();
        Ok(FundamentalMatrix {
            s,
            phi11: block(0, 0),
            phi12: block(0, 1),
            phi21: block(1, 0),
            phi22: block(1, 1),
        })
    }

    pub fn assembled(&self) -> DMatrix<f64> {
        let d = self.phi11.nrows();
        let mut m = DMatrix::zeros(2 * d, 2 * d);
        m.view_mut((0, 0), (d, d)).copy_from(&self.phi11);
        m.view_mut((0, d), (d, d)).copy_from(&self.phi12);
        m.view_mut((d, 0), (d, d)).copy_from(&self.phi21);
        m.view_mut((d, d), (d, d)).copy_from(&self.phi22);
        m
    }

    /// Φ₂₂ − GΦ₁₂, the matrix multiplying p̄(0) in the terminal relation.
    pub fn terminal_block(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        &self.phi22 - g * &self.phi12
    }
}

/// det(Φ₂₂(s) − GΦ₁₂(s)).
pub fn terminal_det(pi: &DMatrix<f64>, g: &DMatrix<f64>, s: f64) -> Result<f64> {
    Ok(FundamentalMatrix::new(pi, s)?.terminal_block(g).determinant())
}

/// Threshold below which |det(M)| is treated as singular.
pub fn singularity_threshold(m: &DMatrix<f64>) -> f64 {
    1e-10 * (1.0 + m.norm())
}

/// Solution of the mean-path boundary problem; the path is evaluated exactly
/// through the propagator.
#[derive(Debug, Clone)]
pub struct MeanPath {
    pub horizon: f64,
    pub ybar0: DVector<f64>,
    pub pbar0: DVector<f64>,
    pi: DMatrix<f64>,
}

impl MeanPath {
    /// (ȳ(s), p̄(s)).
    pub fn at(&self, s: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let d = self.ybar0.len();
        let mut z0 = DVector::zeros(2 * d);
        z0.rows_mut(0, d).copy_from(&self.ybar0);
        z0.rows_mut(d, d).copy_from(&self.pbar0);
        let z = expm(&(&self.pi * s))? * z0;
        Ok((z.rows(0, d).into_owned(), z.rows(d, d).into_owned()))
    }

    /// Samples on `n + 1` uniform points of [0, T].
    pub fn sample(&self, n: usize) -> Result<Vec<(f64, DVector<f64>, DVector<f64>)>> {
        let n = n.max(1);
        (0..=n)
            .map(|k| {
                let s = self.horizon * k as f64 / n as f64;
                let (y, p) = self.at(s)?;
                Ok((s, y, p))
            })
            .collect()
    }

    pub fn pi(&self) -> &DMatrix<f64> {
        &self.pi
    }
}

/// Solve (Φ₂₂(T) − GΦ₁₂(T)) p̄(0) = (GΦ₁₁(T) − Φ₂₁(T)) ȳ(0).
pub fn solve_mean_bvp(model: &LqModel, ybar0: &[f64]) -> Result<MeanPath> {
    if ybar0.len() != model.dim {
        return Err(Error::DimensionMismatch {
            what: "initial mean".into(),
            expected: model.dim,
            found: ybar0.len(),
        });
    }
    let pi = build_pi(model)?;
    let g = model.terminal_hessian();
    let phi = FundamentalMatrix::new(&pi, model.horizon)?;
    let lhs = phi.terminal_block(&g);
    let det = lhs.determinant();
    let threshold = singularity_threshold(&lhs);
    if !(det.abs() >= threshold) {
        return Err(Error::SingularSystem {
            horizon: model.horizon,
            det,
            threshold,
        });
    }
    let y0 = DVector::from_column_slice(ybar0);
    let rhs = (&g * &phi.phi11 - &phi.phi21) * &y0;
    let p0 = solve(&lhs, &DMatrix::from_column_slice(model.dim, 1, rhs.as_slice()), "mean-path system")?;
    Ok(MeanPath {
        horizon: model.horizon,
        ybar0: y0,
        pbar0: p0.column(0).into_owned(),
        pi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlowupRoot {
    pub t0: f64,
    pub bracket: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlowupReport {
    pub interval: [f64; 2],
    pub det_samples: Vec<(f64, f64)>,
    pub root: Option<BlowupRoot>,
}

impl BlowupReport {
    /// Two-column `s,det` CSV of the scan.
    pub fn det_csv(&self) -> String {
        let mut out = String::from("s,det\n");
        for (s, d) in &self.det_samples {
            out.push_str(&format!("{s:.16e},{d:.16e}\n"));
        }
        out
    }

    /// Determinant at the scan point closest to `s`.
    pub fn det_near(&self, s: f64) -> Option<f64> {
        self.det_samples
            .iter()
            .min_by(|a, b| (a.0 - s).abs().total_cmp(&(b.0 - s).abs()))
            .map(|x| x.1)
    }
}

/// Scan det(Φ₂₂(s) − GΦ₁₂(s)) on `samples` uniform points of [t_lo, t_hi];
/// the first sign change is bisected to width 1e−8 and finished with one
/// secant step.
pub fn detect_blowup(model: &LqModel, t_lo: f64, t_hi: f64, samples: usize) -> Result<BlowupReport> {
    if !(t_lo >= 0.0 && t_hi > t_lo && t_hi.is_finite()) {
        return Err(Error::InvalidConfig(format!("invalid scan interval [{t_lo}, {t_hi}]")));
    }
    if samples < 2 {
        return Err(Error::InvalidConfig("blow-up scan needs at least 2 samples".into()));
    }
    let pi = build_pi(model)?;
    let g = model.terminal_hessian();
    let f = |s: f64| terminal_det(&pi, &g, s);
    let mut det_samples = Vec::with_capacity(samples);
    for k in 0..samples {
        let s = if k + 1 == samples {
            t_hi
        } else {
            t_lo + (t_hi - t_lo) * k as f64 / (samples - 1) as f64
        };
        det_samples.push((s, f(s)?));
    }
    let mut root = None;
    for (k, w) in det_samples.windows(2).enumerate() {
        let ((a, fa), (b, fb)) = (w[0], w[1]);
        if fa == 0.0 {
            let lo = if k == 0 { a } else { det_samples[k - 1].0 };
            root = Some(BlowupRoot { t0: a, bracket: [lo, b] });
            break;
        }
        if fa.signum() != fb.signum() {
            root = Some(refine_root(&f, a, fa, b, fb)?);
            break;
        }
    }
    if root.is_none() {
        if let Some(&(s, v)) = det_samples.last() {
            if v == 0.0 {
                let lo = det_samples[det_samples.len() - 2].0;
                root = Some(BlowupRoot { t0: s, bracket: [lo, s] });
            }
        }
    }
    Ok(BlowupReport {
        interval: [t_lo, t_hi],
        det_samples,
        root,
    })
}

fn refine_root(f: &dyn Fn(f64) -> Result<f64>, mut a: f64, mut fa: f64, mut b: f64, mut fb: f64) -> Result<BlowupRoot> {
    while b - a > BISECTION_WIDTH {
        let m = 0.5 * (a + b);
        let fm = f(m)?;
        if fm == 0.0 {
            return Ok(BlowupRoot { t0: m, bracket: [a, b] });
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
            fb = fm;
        }
    }
    let secant = a - fa * (b - a) / (fb - fa);
    let t0 = if secant > a && secant < b { secant } else { 0.5 * (a + b) };
    Ok(BlowupRoot { t0, bracket: [a, b] })
}

/// Riccati matrices on an ascending grid ending at T.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: Vec<f64>,
    pub p: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    /// P at the grid node nearest to `t`.
    pub fn nearest(&self, t: f64) -> &DMatrix<f64> {
        let idx = self
            .grid
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|x| x.0)
            .unwrap_or(0);
        &self.p[idx]
    }
}

/// Integrate P' = P R_sym⁻¹ P − Q_sym − Q̄_sym backward from P(T) = G with
/// classical RK4 on each grid interval.
pub fn riccati_solve(model: &LqModel, grid: &[f64]) -> Result<RiccatiSolution> {
    model.validate()?;
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidConfig("Riccati grid must be strictly ascending with ≥ 2 points".into()));
    }
    let last = grid[grid.len() - 1];
    if (last - model.horizon).abs() > 1e-12 * model.horizon.max(1.0) {
        return Err(Error::InvalidConfig(format!("Riccati grid ends at {last}, horizon is {}", model.horizon)));
    }
    let r_inv = inverse(&model.r_sym(), "symmetrized R")?;
    let qq = symmetrize(&model.q) + symmetrize(&model.qbar);
    let rhs = |p: &DMatrix<f64>| p * &r_inv * p - &qq;
    let mut p = vec![DMatrix::zeros(model.dim, model.dim); grid.len()];
    let n = grid.len() - 1;
    p[n] = model.terminal_hessian();
    for k in (0..n).rev() {
        let h = grid[k + 1] - grid[k];
        let cur = &p[k + 1];
        // Backward in time: dP/d(−s) = −rhs.
        let k1 = rhs(cur);
        let k2 = rhs(&(cur - &k1 * (0.5 * h)));
        let k3 = rhs(&(cur - &k2 * (0.5 * h)));
        let k4 = rhs(&(cur - &k3 * h));
        let next = symmetrize(&(cur - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)));
        if next.iter().any(|x| !x.is_finite() || x.abs() > RICCATI_GUARD) {
            return Err(Error::RiccatiBlowup { time: grid[k] });
        }
        p[k] = next;
    }
    Ok(RiccatiSolution { grid: grid.to_vec(), p })
}

/// Uniform grid of `steps` intervals on [0, T].
pub fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|k| if k == steps { horizon } else { horizon * k as f64 / steps as f64 })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleReport {
    pub blowup: BlowupReport,
    pub constants: AssumptionConstants,
    pub det_at_0_10: f64,
    pub det_at_0_11: f64,
    pub ci_margin_t0_11: f64,
    pub cii_margin_t0_10: f64,
    pub lifespan: Option<f64>,
}

/// Blow-up scan on [0.05, 0.15], constants and margins of the counterexample.
pub fn counterexample_report() -> Result<CounterexampleReport> {
    let model = counterexample_model(0.1);
    let blowup = detect_blowup(&model, 0.05, 0.15, 101)?;
    let constants = assumption_constants(&model)?;
    let pi = build_pi(&model)?;
    let g = model.terminal_hessian();
    Ok(CounterexampleReport {
        det_at_0_10: terminal_det(&pi, &g, 0.1)?,
        det_at_0_11: terminal_det(&pi, &g, 0.11)?,
        blowup,
        ci_margin_t0_11: ci_margin(&constants, 0.11),
        cii_margin_t0_10: cii_margin(&constants, 0.1),
        lifespan: lifespan(&constants),
        constants,
    })
}
