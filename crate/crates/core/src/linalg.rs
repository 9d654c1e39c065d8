//! Small dense linear algebra for the invertible 1×1 convolution:
//! LU factorization with partial pivoting, determinant, solves, and
//! random rotation matrices for initialization.

use crate::error::{FlowError, Result};
use crate::tensor::Scalar;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// LU factors of a square matrix: P·A = L·U with unit-diagonal L.
pub struct LuFactors<T> {
    n: usize,
    lu: Vec<T>,
    /// `piv[i]` is the source row of A feeding row i of P·A.
    piv: Vec<usize>,
    det: T,
}

impl<T: Scalar> LuFactors<T> {
    /// Factors a row-major n×n matrix. Fails when a pivot vanishes.
    pub fn factor(a: &[T], n: usize, context: &str) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut piv: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        for col in 0..n {
            // Partial pivoting on the largest remaining entry in this column.
            let mut best = col;
            let mut best_abs = lu[col * n + col].abs();
            for row in col + 1..n {
                let v = lu[row * n + col].abs();
                if v > best_abs {
                    best = row;
                    best_abs = v;
                }
            }
            if best_abs == T::zero() {
                return Err(FlowError::Singular {
                    context: context.to_string(),
                });
            }
            if best != col {
                for j in 0..n {
                    lu.swap(col * n + j, best * n + j);
                }
                piv.swap(col, best);
                sign = -sign;
            }
            let pivot = lu[col * n + col];
            for row in col + 1..n {
                let factor = lu[row * n + col] / pivot;
                lu[row * n + col] = factor;
                for j in col + 1..n {
                    let sub = factor * lu[col * n + j];
                    lu[row * n + j] -= sub;
                }
            }
        }
        let mut det = sign;
        for i in 0..n {
            det *= lu[i * n + i];
        }
        Ok(LuFactors { n, lu, piv, det })
    }

    pub fn det(&self) -> T {
        self.det
    }

    /// Solves A·x = b.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        // Ly = Pb (unit lower), then Ux = y.
        let mut x: Vec<T> = (0..n).map(|i| b[self.piv[i]]).collect();
        for i in 1..n {
            let mut acc = x[i];
            for j in 0..i {
                acc = acc - self.lu[i * n + j] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..n {
                acc = acc - self.lu[i * n + j] * x[j];
            }
            x[i] = acc / self.lu[i * n + i];
        }
        x
    }

    /// Solves Aᵀ·x = b.
    pub fn solve_transposed(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀz = b, Lᵀw = z, then x = Pᵀw.
        let mut w = b.to_vec();
        for i in 0..n {
            let mut acc = w[i];
            for j in 0..i {
                acc = acc - self.lu[j * n + i] * w[j];
            }
            w[i] = acc / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let mut acc = w[i];
            for j in i + 1..n {
                acc = acc - self.lu[j * n + i] * w[j];
            }
            w[i] = acc;
        }
        let mut x = vec![T::zero(); n];
        for i in 0..n {
            x[self.piv[i]] = w[i];
        }
        x
    }

    /// Dense inverse, column by column.
    pub fn inverse(&self) -> Vec<T> {
        let n = self.n;
        let mut inv = vec![T::zero(); n * n];
        let mut e = vec![T::zero(); n];
        for col in 0..n {
            e[col] = T::one();
            let x = self.solve(&e);
            for row in 0..n {
                inv[row * n + col] = x[row];
            }
            e[col] = T::zero();
        }
        inv
    }
}

/// Determinant of a row-major n×n matrix; zero if exactly singular.
pub fn det<T: Scalar>(a: &[T], n: usize) -> T {
    match LuFactors::factor(a, n, "det") {
        Ok(f) => f.det(),
        Err(_) => T::zero(),
    }
}

/// Random rotation (orthogonal, det +1) via Gram–Schmidt on a Gaussian matrix.
pub fn random_rotation<T: Scalar, R: Rng>(n: usize, rng: &mut R) -> Vec<T> {
    loop {
        let mut m: Vec<f64> = (0..n * n)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        if let Some(q) = gram_schmidt(&mut m, n) {
            return q.into_iter().map(T::from_f64).collect();
        }
    }
}

fn gram_schmidt(m: &mut [f64], n: usize) -> Option<Vec<f64>> {
    // Orthonormalizes columns; retries caller-side on near-degeneracy.
    for col in 0..n {
        for prev in 0..col {
            let mut dot = 0.0;
            for row in 0..n {
                dot += m[row * n + col] * m[row * n + prev];
            }
            for row in 0..n {
                m[row * n + col] -= dot * m[row * n + prev];
            }
        }
        let mut norm = 0.0;
        for row in 0..n {
            norm += m[row * n + col] * m[row * n + col];
        }
        let norm = norm.sqrt();
        if norm < 1e-8 {
            return None;
        }
        for row in 0..n {
            m[row * n + col] /= norm;
        }
    }
    if det(m, n) < 0.0 {
        // Flip one column to land in SO(n).
        for row in 0..n {
            m[row * n] = -m[row * n];
        }
    }
    Some(m.to_vec())
}
