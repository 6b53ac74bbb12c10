//! Monomial bases in graded order: degree 0, then degree 1 (y₁..y_d), then
//! degree 2 with exponents in descending lexicographic order, and so on.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonomialBasis {
    dim: usize,
    degree: usize,
    exponents: Vec<Vec<u32>>,
}

fn push_exponents(dim: usize, total: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() + 1 == dim {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first);
        push_exponents(dim, total - first, prefix, out);
        prefix.pop();
    }
}

impl MonomialBasis {
    pub fn new(dim: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        for total in 0..=degree as u32 {
            push_exponents(dim, total, &mut Vec::with_capacity(dim), &mut exponents);
        }
        MonomialBasis { dim, degree, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    pub fn index_of(&self, exps: &[u32]) -> Option<usize> {
        self.exponents.iter().position(|e| e.as_slice() == exps)
    }

    /// Evaluate every monomial at `z` into `out` (length `len()`).
    pub fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        match self.degree {
            0 => out[0] = 1.0,
            1 => {
                out[0] = 1.0;
                out[1..=self.dim].copy_from_slice(z);
            }
            _ => {
                for (o, e) in out.iter_mut().zip(&self.exponents) {
                    *o = e.iter().zip(z).map(|(&k, &x)| x.powi(k as i32)).product();
                }
            }
        }
    }

    /// ∂/∂z_j of every monomial at `z`, row-major (`len()` × `dim`).
    pub fn gradient_into(&self, z: &[f64], out: &mut [f64]) {
        for (m, e) in self.exponents.iter().enumerate() {
            for j in 0..self.dim {
                out[m * self.dim + j] = if e[j] == 0 {
                    0.0
                } else {
                    f64::from(e[j])
                        * e.iter()
                            .zip(z)
                            .enumerate()
                            .map(|(l, (&k, &x))| if l == j { x.powi(k as i32 - 1) } else { x.powi(k as i32) })
                            .product::<f64>()
                };
            }
        }
    }
}

/// Binomial coefficient for small arguments.
pub(crate) fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}
