//! Dense symmetric eigendecomposition by cyclic Jacobi rotations.

use crate::error::{bail, Result};

/// Row-major square matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            bail!(Dimension, "{} values do not form a {n}x{n} matrix", data.len());
        }
        Ok(Self { n, data })
    }

    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = v;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            bail!(Dimension, "matrix sizes {} and {} differ", self.n, other.n);
        }
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.data[i * n + j];
            }
        }
        out
    }

    /// (A + Aᵀ) / 2
    pub fn symmetrized(&self) -> Self {
        let n = self.n;
        let mut out = self.clone();
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = 0.5 * (self.get(i, j) + self.get(j, i));
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Self {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self { n: self.n, data }
    }
}

/// Eigenvalues and column eigenvectors (`vectors.get(i, k)` is component i of vector k).
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: SquareMatrix,
}

/// Eigendecomposition of a symmetric matrix; the input is symmetrised first.
pub fn symmetric_eigen(a: &SquareMatrix) -> Result<Eigen> {
    let n = a.n;
    let mut m = a.symmetrized();
    let mut v = SquareMatrix::identity(n);
    let scale = m.frobenius().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        if off.sqrt() <= 1e-14 * scale {
            let values = (0..n).map(|i| m.get(i, i)).collect();
            return Ok(Eigen { values, vectors: v });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let (app, aqq) = (m.get(p, p), m.get(q, q));
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    bail!(Numeric, "Jacobi eigendecomposition did not converge for a {n}x{n} matrix")
}

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues in (−1e-6·max(1, |λ|max), 0) are treated as zero; anything
/// more negative is an error.
pub fn matrix_sqrt_psd(a: &SquareMatrix) -> Result<SquareMatrix> {
    let eig = symmetric_eigen(a)?;
    let biggest = eig.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut roots = Vec::with_capacity(a.n);
    for &l in &eig.values {
        if l < -1e-6 * biggest {
            bail!(Numeric, "matrix is not positive semi-definite (eigenvalue {l:e})");
        }
        roots.push(l.max(0.0).sqrt());
    }
    let n = a.n;
    let mut out = SquareMatrix::zeros(n);
    for k in 0..n {
        if roots[k] == 0.0 {
            continue;
        }
        for i in 0..n {
            let vi = eig.vectors.get(i, k) * roots[k];
            for j in 0..n {
                out.data[i * n + j] += vi * eig.vectors.get(j, k);
            }
        }
    }
    Ok(out.symmetrized())
}
