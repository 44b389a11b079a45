//! Gauss-Hermite quadrature via Golub-Welsch.
//!
//! Nodes and weights come from the symmetric tridiagonal companion matrix of
//! the Hermite recurrence (off-diagonal sqrt(k/2)), diagonalized with the same
//! Jacobi solver used elsewhere, so the table is deterministic.

use alloc::vec;
use alloc::vec::Vec;

use crate::num;
use crate::psd::SymMat;

/// Quadrature rule integrating e^{-u^2} f(u) du over the real line.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        let mut companion = SymMat::zeros(n);
        for k in 1..n {
            companion.set(k - 1, k, num::sqrt(k as f64 / 2.0));
        }
        let (vals, vecs) = companion.eigh();
        let sqrt_pi = num::sqrt(core::f64::consts::PI);
        // eigh orders descending; flip to ascending nodes.
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for c in 0..n {
            nodes[n - 1 - c] = vals[c];
            let v0 = vecs[c]; // first row, column c
            weights[n - 1 - c] = sqrt_pi * v0 * v0;
        }
        GaussHermite { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// E[f(Z)] for standard normal Z.
    pub fn expect_standard_normal(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        let inv_sqrt_pi = 1.0 / num::sqrt(core::f64::consts::PI);
        let sqrt2 = num::sqrt(2.0);
        self.nodes
            .iter()
            .zip(self.weights.iter())
            .map(|(&u, &w)| w * inv_sqrt_pi * f(sqrt2 * u))
            .sum()
    }

    /// Points (z, omega) with sum(omega) = 1 such that E[f(Z)] ~ sum omega f(z).
    pub fn normal_points(&self) -> Vec<(f64, f64)> {
        let inv_sqrt_pi = 1.0 / num::sqrt(core::f64::consts::PI);
        let sqrt2 = num::sqrt(2.0);
        self.nodes
            .iter()
            .zip(self.weights.iter())
            .map(|(&u, &w)| (sqrt2 * u, w * inv_sqrt_pi))
            .collect()
    }
}

/// Gauss-Legendre rule on [0, 1], used for low-order auxiliary integrals.
#[derive(Debug, Clone)]
pub struct GaussLegendre01 {
    /// (node, weight) pairs on [0, 1]; weights sum to 1.
    pub points: Vec<(f64, f64)>,
}

impl GaussLegendre01 {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        // Jacobi matrix for Legendre polynomials on [-1, 1].
        let mut companion = SymMat::zeros(n);
        for k in 1..n {
            let kf = k as f64;
            companion.set(k - 1, k, kf / num::sqrt(4.0 * kf * kf - 1.0));
        }
        let (vals, vecs) = companion.eigh();
        let mut points: Vec<(f64, f64)> = (0..n)
            .map(|c| {
                let x = vals[c];
                let w = 2.0 * vecs[c] * vecs[c];
                (0.5 * (x + 1.0), 0.5 * w)
            })
            .collect();
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        GaussLegendre01 { points }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gh_even_moments() {
        let gh = GaussHermite::new(24);
        // E[Z^2] = 1, E[Z^4] = 3, E[Z^6] = 15.
        assert!((gh.expect_standard_normal(|z| z * z) - 1.0).abs() < 1e-12);
        assert!((gh.expect_standard_normal(|z| z.powi(4)) - 3.0).abs() < 1e-11);
        assert!((gh.expect_standard_normal(|z| z.powi(6)) - 15.0).abs() < 1e-10);
        assert!(gh.expect_standard_normal(|z| z.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn gh_known_three_point_rule() {
        let gh = GaussHermite::new(3);
        let sqrt_pi = core::f64::consts::PI.sqrt();
        assert!((gh.nodes()[0] + (1.5f64).sqrt()).abs() < 1e-13);
        assert!(gh.nodes()[1].abs() < 1e-13);
        assert!((gh.nodes()[2] - (1.5f64).sqrt()).abs() < 1e-13);
        assert!((gh.weights()[1] - 2.0 * sqrt_pi / 3.0).abs() < 1e-13);
    }

    #[test]
    fn gh_gaussian_cosh_identity() {
        // E cosh(a Z + x) = e^{a^2/2} cosh(x).
        let gh = GaussHermite::new(40);
        let (a, x) = (1.3, -0.7);
        let lhs = gh.expect_standard_normal(|z| (a * z + x).cosh());
        let rhs = (a * a / 2.0f64).exp() * x.cosh();
        assert!((lhs - rhs).abs() < 1e-10 * rhs.abs());
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let gl = GaussLegendre01::new(8);
        let int_x3: f64 = gl.points.iter().map(|&(x, w)| w * x * x * x).sum();
        assert!((int_x3 - 0.25).abs() < 1e-13);
        let total: f64 = gl.points.iter().map(|&(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-13);
    }
}
