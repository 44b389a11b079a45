//! Exact-tolerance linear algebra on the cone of positive semidefinite
//! matrices. The design envelope is small dimension (D <= 4), so everything
//! is dense and eigendecompositions use a cyclic Jacobi sweep, which is
//! deterministic and accurate to close to machine precision at these sizes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::num;
use crate::PSD_TOL;

/// Dense symmetric matrix stored row-major.
///
/// Construction symmetrizes the input; all operations preserve symmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat {
    dim: usize,
    a: Vec<f64>,
}

impl SymMat {
    pub fn zeros(dim: usize) -> Self {
        SymMat { dim, a: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = SymMat::zeros(dim);
        for i in 0..dim {
            m.a[i * dim + i] = 1.0;
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = SymMat::zeros(entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m.a[i * entries.len() + i] = v;
        }
        m
    }

    /// 1x1 matrix, the scalar case.
    pub fn scalar(v: f64) -> Self {
        SymMat { dim: 1, a: vec![v] }
    }

    /// Builds from a row-major slice, symmetrizing as (a + a^T)/2.
    pub fn from_row_major(dim: usize, data: &[f64]) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(CoreError::DimensionMismatch { expected: dim * dim, got: data.len() });
        }
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                a[i * dim + j] = 0.5 * (data[i * dim + j] + data[j * dim + i]);
            }
        }
        Ok(SymMat { dim, a })
    }

    /// Rank-one matrix v v^T.
    pub fn outer(v: &[f64]) -> Self {
        let dim = v.len();
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                a[i * dim + j] = v[i] * v[j];
            }
        }
        SymMat { dim, a }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.dim + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.dim + j] = v;
        self.a[j * self.dim + i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.a
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.a[i * self.dim + i]).sum()
    }

    /// Entrywise scalar product a . b = tr(a b^T).
    pub fn dot(&self, other: &SymMat) -> f64 {
        debug_assert_eq!(self.dim, other.dim);
        self.a.iter().zip(other.a.iter()).map(|(x, y)| x * y).sum()
    }

    /// Frobenius norm |a| = (a . a)^{1/2}.
    pub fn norm(&self) -> f64 {
        num::sqrt(self.dot(self))
    }

    pub fn add(&self, other: &SymMat) -> SymMat {
        debug_assert_eq!(self.dim, other.dim);
        let a = self.a.iter().zip(other.a.iter()).map(|(x, y)| x + y).collect();
        SymMat { dim: self.dim, a }
    }

    pub fn sub(&self, other: &SymMat) -> SymMat {
        debug_assert_eq!(self.dim, other.dim);
        let a = self.a.iter().zip(other.a.iter()).map(|(x, y)| x - y).collect();
        SymMat { dim: self.dim, a }
    }

    pub fn scale(&self, c: f64) -> SymMat {
        SymMat { dim: self.dim, a: self.a.iter().map(|x| c * x).collect() }
    }

    /// Linear interpolation (1 - w) self + w other.
    pub fn lerp(&self, other: &SymMat, w: f64) -> SymMat {
        debug_assert_eq!(self.dim, other.dim);
        let a = self
            .a
            .iter()
            .zip(other.a.iter())
            .map(|(x, y)| (1.0 - w) * x + w * y)
            .collect();
        SymMat { dim: self.dim, a }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.dim, v.len());
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let mut s = 0.0;
            for j in 0..self.dim {
                s += self.a[i * self.dim + j] * v[j];
            }
            out[i] = s;
        }
        out
    }

    /// Quadratic form v^T a v.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let av = self.matvec(v);
        av.iter().zip(v.iter()).map(|(x, y)| x * y).sum()
    }

    /// Congruence b^T a b for square b given row-major (b need not be symmetric).
    pub fn congruence(&self, b_row_major: &[f64]) -> SymMat {
        let d = self.dim;
        debug_assert_eq!(b_row_major.len(), d * d);
        // tmp = a * b
        let mut tmp = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += self.a[i * d + k] * b_row_major[k * d + j];
                }
                tmp[i * d + j] = s;
            }
        }
        // out = b^T * tmp, then symmetrize against roundoff
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += b_row_major[k * d + i] * tmp[k * d + j];
                }
                out[i * d + j] = s;
            }
        }
        for i in 0..d {
            for j in (i + 1)..d {
                let v = 0.5 * (out[i * d + j] + out[j * d + i]);
                out[i * d + j] = v;
                out[j * d + i] = v;
            }
        }
        SymMat { dim: self.dim, a: out }
    }

    /// Eigendecomposition by cyclic Jacobi rotations.
    ///
    /// Returns eigenvalues in descending order together with the matching
    /// eigenvectors as columns of a row-major `dim x dim` array. Ordering and
    /// eigenvector signs are normalized so the output is reproducible.
    pub fn eigh(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let mut a = self.a.clone();
        // v starts as the identity and accumulates rotations.
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        if d > 1 {
            let scale: f64 = self.a.iter().map(|x| x * x).sum::<f64>();
            let tol = 1e-30 * scale.max(f64::MIN_POSITIVE);
            for _sweep in 0..64 {
                let mut off = 0.0;
                for p in 0..d {
                    for q in (p + 1)..d {
                        off += a[p * d + q] * a[p * d + q];
                    }
                }
                if off <= tol {
                    break;
                }
                for p in 0..d {
                    for q in (p + 1)..d {
                        let apq = a[p * d + q];
                        if apq == 0.0 {
                            continue;
                        }
                        let app = a[p * d + p];
                        let aqq = a[q * d + q];
                        let theta = (aqq - app) / (2.0 * apq);
                        let t = if theta >= 0.0 {
                            1.0 / (theta + num::hypot(1.0, theta))
                        } else {
                            -1.0 / (-theta + num::hypot(1.0, theta))
                        };
                        let c = 1.0 / num::hypot(1.0, t);
                        let s = t * c;
                        for k in 0..d {
                            let akp = a[k * d + p];
                            let akq = a[k * d + q];
                            a[k * d + p] = c * akp - s * akq;
                            a[k * d + q] = s * akp + c * akq;
                        }
                        for k in 0..d {
                            let apk = a[p * d + k];
                            let aqk = a[q * d + k];
                            a[p * d + k] = c * apk - s * aqk;
                            a[q * d + k] = s * apk + c * aqk;
                        }
                        for k in 0..d {
                            let vkp = v[k * d + p];
                            let vkq = v[k * d + q];
                            v[k * d + p] = c * vkp - s * vkq;
                            v[k * d + q] = s * vkp + c * vkq;
                        }
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..d).collect();
        // Descending eigenvalues; ties broken by original column index.
        order.sort_by(|&i, &j| {
            a[j * d + j].partial_cmp(&a[i * d + i]).unwrap_or(core::cmp::Ordering::Equal)
        });
        let mut vals = vec![0.0; d];
        let mut vecs = vec![0.0; d * d];
        for (new_col, &old_col) in order.iter().enumerate() {
            vals[new_col] = a[old_col * d + old_col];
            // Sign normalization: first component with largest magnitude positive.
            let mut pivot = 0usize;
            let mut best = 0.0f64;
            for k in 0..d {
                let m = v[k * d + old_col].abs();
                if m > best {
                    best = m;
                    pivot = k;
                }
            }
            let sgn = if v[pivot * d + old_col] < 0.0 { -1.0 } else { 1.0 };
            for k in 0..d {
                vecs[k * d + new_col] = sgn * v[k * d + old_col];
            }
        }
        (vals, vecs)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let (vals, _) = self.eigh();
        *vals.last().unwrap()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let (vals, _) = self.eigh();
        vals[0]
    }

    /// Cone membership within `tol`.
    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol
    }

    /// Applies `f` to the spectrum: Q f(Lambda) Q^T.
    fn spectral_map(&self, f: impl Fn(f64) -> f64) -> SymMat {
        let d = self.dim;
        let (vals, vecs) = self.eigh();
        let mut out = vec![0.0; d * d];
        for (c, &lam) in vals.iter().enumerate() {
            let fl = f(lam);
            if fl == 0.0 {
                continue;
            }
            for i in 0..d {
                for j in i..d {
                    let add = fl * vecs[i * d + c] * vecs[j * d + c];
                    out[i * d + j] += add;
                    if i != j {
                        out[j * d + i] += add;
                    }
                }
            }
        }
        SymMat { dim: d, a: out }
    }
}

/// Loewner order test: true iff the smallest eigenvalue of b - a is >= -tol.
pub fn loewner_leq(a: &SymMat, b: &SymMat, tol: f64) -> Result<bool> {
    if a.dim() != b.dim() {
        return Err(CoreError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    Ok(b.sub(a).min_eigenvalue() >= -tol)
}

/// Symmetric PSD square root by the spectral method.
///
/// Eigenvalues in [-PSD_TOL, 0) are clamped to zero before rooting; anything
/// below -PSD_TOL signals invalid input.
pub fn sqrt_psd(a: &SymMat) -> Result<SymMat> {
    let min = a.min_eigenvalue();
    if min < -PSD_TOL {
        return Err(CoreError::NotPsd { min_eigenvalue: min });
    }
    Ok(a.spectral_map(|lam| if lam > 0.0 { num::sqrt(lam) } else { 0.0 }))
}

/// Nearest PSD matrix in Frobenius norm, via eigenvalue clamping.
pub fn project_psd(a: &SymMat) -> SymMat {
    a.spectral_map(|lam| lam.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_sym(dim: usize, rng: &mut CounterRng) -> SymMat {
        let mut m = SymMat::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                m.set(i, j, rng.standard_normal());
            }
        }
        m
    }

    pub(crate) fn random_psd(dim: usize, rng: &mut CounterRng) -> SymMat {
        // G G^T with standard normal G.
        let mut g = vec![0.0; dim * dim];
        for v in g.iter_mut() {
            *v = rng.standard_normal();
        }
        let mut m = SymMat::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let mut s = 0.0;
                for k in 0..dim {
                    s += g[i * dim + k] * g[j * dim + k];
                }
                m.set(i, j, s);
            }
        }
        m
    }

    #[test]
    fn loewner_examples() {
        let zero = SymMat::zeros(2);
        let id = SymMat::identity(2);
        assert!(loewner_leq(&zero, &id, 1e-10).unwrap());
        assert!(loewner_leq(&id, &id, 1e-10).unwrap());
        let a = SymMat::diag(&[1.0, 0.0]);
        let b = SymMat::diag(&[0.0, 1.0]);
        assert!(!loewner_leq(&a, &b, 1e-10).unwrap());
        assert!(loewner_leq(&a, &SymMat::scalar(1.0), 1e-10).is_err());
    }

    #[test]
    fn sqrt_examples() {
        let id = SymMat::identity(3);
        assert!(sqrt_psd(&id).unwrap().sub(&id).norm() < 1e-12);
        let a = SymMat::diag(&[4.0, 9.0]);
        let r = sqrt_psd(&a).unwrap();
        assert!(r.sub(&SymMat::diag(&[2.0, 3.0])).norm() < 1e-12);
        let z = SymMat::zeros(2);
        assert!(sqrt_psd(&z).unwrap().norm() == 0.0);
        assert!(sqrt_psd(&SymMat::diag(&[1.0, -1.0])).is_err());
    }

    #[test]
    fn project_examples() {
        let a = SymMat::diag(&[1.0, -1.0]);
        let p = project_psd(&a);
        assert!(p.sub(&SymMat::diag(&[1.0, 0.0])).norm() < 1e-12);
        let neg = SymMat::identity(3).scale(-1.0);
        assert!(project_psd(&neg).norm() < 1e-12);
        let mut rng = CounterRng::new(7, 0);
        for _ in 0..50 {
            let m = random_psd(3, &mut rng);
            assert!(project_psd(&m).sub(&m).norm() < 1e-10 * (1.0 + m.norm()));
        }
    }

    #[test]
    fn sqrt_squares_back_on_random_psd() {
        let mut rng = CounterRng::new(42, 0);
        for k in 0..1000 {
            let dim = 1 + (k % 4);
            let m = random_psd(dim, &mut rng);
            let r = sqrt_psd(&m).unwrap();
            let sq = SymMat::identity(dim).congruence(r.as_slice());
            assert!(
                sq.sub(&m).norm() <= 1e-9 * (1.0 + m.norm()),
                "dim {dim}: |r^2 - m| = {}",
                sq.sub(&m).norm()
            );
        }
    }

    #[test]
    fn projection_idempotent_and_in_cone() {
        let mut rng = CounterRng::new(3, 0);
        for k in 0..200 {
            let dim = 1 + (k % 4);
            let m = random_sym(dim, &mut rng);
            let p = project_psd(&m);
            assert!(loewner_leq(&SymMat::zeros(dim), &p, 1e-10).unwrap());
            let pp = project_psd(&p);
            assert!(pp.sub(&p).norm() < 1e-10 * (1.0 + p.norm()));
        }
    }

    #[test]
    fn trace_norm_equivalence_on_cone() {
        // D^{-1/2} tr(a) <= |a| <= D^{1/2} tr(a) for PSD a.
        let mut rng = CounterRng::new(11, 0);
        for k in 0..200 {
            let dim = 1 + (k % 4);
            let m = random_psd(dim, &mut rng);
            let d = dim as f64;
            let tr = m.trace();
            let n = m.norm();
            assert!(tr / d.sqrt() <= n + 1e-12);
            assert!(n <= d.sqrt() * tr + 1e-12);
        }
    }

    #[test]
    fn eigh_recovers_diagonal_and_orders_descending() {
        let a = SymMat::diag(&[-1.0, 5.0, 2.0]);
        let (vals, vecs) = a.eigh();
        assert!((vals[0] - 5.0).abs() < 1e-13);
        assert!((vals[1] - 2.0).abs() < 1e-13);
        assert!((vals[2] + 1.0).abs() < 1e-13);
        // Orthonormal columns.
        for c1 in 0..3 {
            for c2 in 0..3 {
                let dot: f64 = (0..3).map(|k| vecs[k * 3 + c1] * vecs[k * 3 + c2]).sum();
                let expect = if c1 == c2 { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }
}
