// SPDX-License-Identifier: Apache-2.0

//! Upper-triangular Cholesky factor `A = UᵀU` with in-place rank-one updates.
//!
//! Rows of `U` are stored contiguously, so both the update sweep and the
//! forward substitution walk memory in order.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("matrix is not positive definite (pivot {pivot} = {value})")]
pub struct NotPositiveDefinite {
    pub pivot: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    upper: Vec<f64>,
}

impl CholeskyFactor {
    /// Factor of `diag · I`.
    pub fn scaled_identity(dim: usize, diag: f64) -> Self {
        let mut upper = vec![0.0; dim * dim];
        let d = diag.sqrt();
        for i in 0..dim {
            upper[i * dim + i] = d;
        }
        Self { dim, upper }
    }

    /// Factor a dense symmetric row-major matrix.
    pub fn from_matrix(a: &[f64], dim: usize) -> Result<Self, NotPositiveDefinite> {
        assert_eq!(a.len(), dim * dim, "matrix size mismatch");
        let mut upper = vec![0.0; dim * dim];
        for j in 0..dim {
            let mut diag = a[j * dim + j];
            for k in 0..j {
                let u = upper[k * dim + j];
                diag -= u * u;
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(NotPositiveDefinite {
                    pivot: j,
                    value: diag,
                });
            }
            let ujj = diag.sqrt();
            upper[j * dim + j] = ujj;
            for i in j + 1..dim {
                let mut s = a[j * dim + i];
                for k in 0..j {
                    s -= upper[k * dim + j] * upper[k * dim + i];
                }
                upper[j * dim + i] = s / ujj;
            }
        }
        Ok(Self { dim, upper })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `A ← A + weight · x xᵀ` for `weight >= 0`, in O(dim²).
    ///
    /// On failure the factor is left in an unspecified state; callers keep a
    /// copy if they need to recover.
    pub fn rank_one_update(&mut self, x: &[f64], weight: f64) -> Result<(), NotPositiveDefinite> {
        let n = self.dim;
        debug_assert_eq!(x.len(), n);
        debug_assert!(weight >= 0.0);
        let scale = weight.sqrt();
        let mut v: Vec<f64> = x.iter().map(|xi| xi * scale).collect();
        for k in 0..n {
            let vk = v[k];
            if vk == 0.0 {
                continue;
            }
            let row = &mut self.upper[k * n..(k + 1) * n];
            let ukk = row[k];
            let r = ukk.hypot(vk);
            if !(r > 0.0) || !r.is_finite() || !(ukk > 0.0) {
                return Err(NotPositiveDefinite { pivot: k, value: r });
            }
            let c = r / ukk;
            let s = vk / ukk;
            row[k] = r;
            for i in k + 1..n {
                let u = (row[i] + s * v[i]) / c;
                v[i] = c * v[i] - s * u;
                row[i] = u;
            }
        }
        Ok(())
    }

    /// Solves `Uᵀ z = b` in place.
    pub fn forward_solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        debug_assert_eq!(b.len(), n);
        for k in 0..n {
            let row = &self.upper[k * n..(k + 1) * n];
            let zk = b[k] / row[k];
            b[k] = zk;
            if zk != 0.0 {
                for i in k + 1..n {
                    b[i] -= row[i] * zk;
                }
            }
        }
    }

    /// Solves `U x = b` in place.
    pub fn backward_solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        debug_assert_eq!(b.len(), n);
        for k in (0..n).rev() {
            let row = &self.upper[k * n..(k + 1) * n];
            let mut s = b[k];
            for i in k + 1..n {
                s -= row[i] * b[i];
            }
            b[k] = s / row[k];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_solve_in_place(&mut x);
        self.backward_solve_in_place(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.upper[i * self.dim + i].ln())
            .sum::<f64>()
            * 2.0
    }

    /// Reconstructs `A = UᵀU` (row-major).
    pub fn matrix(&self) -> Vec<f64> {
        let n = self.dim;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for k in 0..=i {
                    s += self.upper[k * n + i] * self.upper[k * n + j];
                }
                a[i * n + j] = s;
                a[j * n + i] = s;
            }
        }
        a
    }

    /// Explicit `A⁻¹` (row-major), by solving against the identity.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.dim;
        let mut inv = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.iter_mut().for_each(|c| *c = 0.0);
            col[j] = 1.0;
            self.forward_solve_in_place(&mut col);
            self.backward_solve_in_place(&mut col);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }

    pub fn trace_of_matrix(&self) -> f64 {
        let n = self.dim;
        let mut tr = 0.0;
        for k in 0..n {
            for i in k..n {
                let u = self.upper[k * n + i];
                tr += u * u;
            }
        }
        tr
    }
}
