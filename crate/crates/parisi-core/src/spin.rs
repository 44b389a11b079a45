//! Single-spin measures and polynomial covariance functions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::psd::SymMat;
use crate::rng::CounterRng;

/// Finite discrete measure on compactly supported atoms in R^D.
///
/// The total mass need not be 1; routines that assume a probability measure
/// say so in their contract.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinMeasure {
    dim: usize,
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl SpinMeasure {
    pub fn new(dim: usize, atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(CoreError::Invalid(String::from(
                "measure needs matching non-empty atoms and weights",
            )));
        }
        for a in &atoms {
            if a.len() != dim {
                return Err(CoreError::DimensionMismatch { expected: dim, got: a.len() });
            }
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(CoreError::Invalid(String::from("weights must be positive and finite")));
        }
        Ok(SpinMeasure { dim, atoms, weights })
    }

    /// The symmetric Ising measure (delta_{-1} + delta_{+1}) / 2 in D = 1.
    pub fn ising() -> Self {
        SpinMeasure::new(1, vec![vec![-1.0], vec![1.0]], vec![0.5, 0.5]).unwrap()
    }

    /// Biased Ising measure w delta_{+1} + (1 - w) delta_{-1}.
    pub fn biased_ising(w_plus: f64) -> Self {
        SpinMeasure::new(1, vec![vec![1.0], vec![-1.0]], vec![w_plus, 1.0 - w_plus]).unwrap()
    }

    /// Product of D symmetric Ising measures: atoms on the hypercube corners.
    pub fn ising_product(dim: usize) -> Self {
        let n = 1usize << dim;
        let mut atoms = Vec::with_capacity(n);
        for mask in 0..n {
            atoms.push((0..dim).map(|d| if mask >> d & 1 == 1 { 1.0 } else { -1.0 }).collect());
        }
        SpinMeasure::new(dim, atoms, vec![1.0 / n as f64; n]).unwrap()
    }

    pub fn dirac(atom: Vec<f64>) -> Self {
        let dim = atom.len();
        SpinMeasure::new(dim, vec![atom], vec![1.0]).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_probability(&self) -> bool {
        (self.total_mass() - 1.0).abs() < 1e-12
    }

    pub fn max_atom_norm(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| crate::num::sqrt(a.iter().map(|x| x * x).sum()))
            .fold(0.0, f64::max)
    }

    /// Weighted mean of the atoms, normalized by the total mass.
    pub fn mean(&self) -> Vec<f64> {
        let mass = self.total_mass();
        let mut m = vec![0.0; self.dim];
        for (a, &w) in self.atoms.iter().zip(self.weights.iter()) {
            for (mi, &ai) in m.iter_mut().zip(a.iter()) {
                *mi += w * ai;
            }
        }
        for v in m.iter_mut() {
            *v /= mass;
        }
        m
    }

    /// True iff the atoms linearly span R^D.
    ///
    /// The underlying assumption concerns the affine span of the support;
    /// after recentering, checking the linear span loses no generality. This
    /// check is on the linear span of the atoms as given.
    pub fn spans(&self) -> bool {
        let mut second_moment = SymMat::zeros(self.dim);
        for a in &self.atoms {
            second_moment = second_moment.add(&SymMat::outer(a));
        }
        let (vals, _) = second_moment.eigh();
        let top = vals[0].max(f64::MIN_POSITIVE);
        vals[self.dim - 1] > 1e-10 * top
    }
}

/// One monomial of a covariance polynomial: `coef * prod a_{i,j}^{power}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coef: f64,
    /// (row, col, power) with 0-based indices; entries are treated as
    /// independent coordinates of R^{D x D}.
    pub powers: Vec<(usize, usize, u32)>,
}

impl Monomial {
    fn total_degree(&self) -> u32 {
        self.powers.iter().map(|&(_, _, k)| k).sum()
    }
}

/// Polynomial covariance function xi: R^{D x D} -> R with xi(0) = 0 and
/// closed-form derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct XiModel {
    dim: usize,
    terms: Vec<Monomial>,
}

impl XiModel {
    pub fn new(dim: usize, terms: Vec<Monomial>) -> Result<Self> {
        for t in &terms {
            if t.coef < 0.0 {
                return Err(CoreError::Invalid(String::from("coefficients must be nonnegative")));
            }
            let deg = t.total_degree();
            if deg == 0 {
                return Err(CoreError::Invalid(String::from(
                    "constant terms are not allowed (xi(0) must be 0)",
                )));
            }
            if deg > 6 {
                return Err(CoreError::Invalid(format!("total degree {deg} exceeds 6")));
            }
            for &(i, j, _) in &t.powers {
                if i >= dim || j >= dim {
                    return Err(CoreError::Invalid(format!(
                        "entry ({i},{j}) out of range for dim {dim}"
                    )));
                }
            }
        }
        Ok(XiModel { dim, terms })
    }

    /// The SK-type covariance xi(a) = coef * a_{00}^2 in D = 1.
    pub fn sk(coef: f64) -> Self {
        XiModel::new(1, vec![Monomial { coef, powers: vec![(0, 0, 2)] }]).unwrap()
    }

    /// D = 2 cross-term model xi(a) = a_{00} a_{11}.
    pub fn cross_2d() -> Self {
        XiModel::new(2, vec![Monomial { coef: 1.0, powers: vec![(0, 0, 1), (1, 1, 1)] }]).unwrap()
    }

    /// D = 2 fully coupled model xi(a) = a_{00}^2 + a_{11}^2 + a_{00} a_{11}.
    pub fn coupled_2d() -> Self {
        XiModel::new(
            2,
            vec![
                Monomial { coef: 1.0, powers: vec![(0, 0, 2)] },
                Monomial { coef: 1.0, powers: vec![(1, 1, 2)] },
                Monomial { coef: 1.0, powers: vec![(0, 0, 1), (1, 1, 1)] },
            ],
        )
        .unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    /// xi(a) for a given row-major.
    pub fn eval(&self, a: &SymMat) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.coef
                    * t.powers
                        .iter()
                        .map(|&(i, j, k)| powi(a.get(i, j), k))
                        .product::<f64>()
            })
            .sum()
    }

    /// Entrywise gradient of xi at `a`, as a row-major D x D array.
    pub fn grad_raw(&self, a: &SymMat) -> Vec<f64> {
        let d = self.dim;
        let mut g = vec![0.0; d * d];
        for t in &self.terms {
            for (idx, &(i, j, k)) in t.powers.iter().enumerate() {
                let mut v = t.coef * k as f64 * powi(a.get(i, j), k - 1);
                for (idx2, &(i2, j2, k2)) in t.powers.iter().enumerate() {
                    if idx2 != idx {
                        v *= powi(a.get(i2, j2), k2);
                    }
                }
                g[i * d + j] += v;
            }
        }
        g
    }

    /// Gradient as a symmetric matrix; errors when the raw gradient at a
    /// symmetric point is not symmetric (an asymmetric model).
    pub fn grad(&self, a: &SymMat) -> Result<SymMat> {
        let d = self.dim;
        let g = self.grad_raw(a);
        let scale = 1.0 + g.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for i in 0..d {
            for j in (i + 1)..d {
                if (g[i * d + j] - g[j * d + i]).abs() > 1e-9 * scale {
                    return Err(CoreError::Invalid(String::from(
                        "gradient of xi is not symmetric at a symmetric point",
                    )));
                }
            }
        }
        SymMat::from_row_major(d, &g)
    }

    /// Directional derivative of the gradient,
    /// d/d(eps) grad xi(a + eps b) at eps = 0, symmetrized.
    pub fn grad_directional(&self, a: &SymMat, b: &SymMat) -> SymMat {
        let d = self.dim;
        let mut m = vec![0.0; d * d];
        for t in &self.terms {
            for (idx, &(i, j, k)) in t.powers.iter().enumerate() {
                // d/d a_{rs} of [k a_{ij}^{k-1} prod_{other} a^{k2}] times b_{rs}.
                // Second derivative within the same factor:
                if k >= 2 {
                    let mut v = t.coef * (k * (k - 1)) as f64 * powi(a.get(i, j), k - 2)
                        * b.get(i, j);
                    for (idx2, &(i2, j2, k2)) in t.powers.iter().enumerate() {
                        if idx2 != idx {
                            v *= powi(a.get(i2, j2), k2);
                        }
                    }
                    m[i * d + j] += v;
                }
                // Cross derivatives with the other factors:
                for (idx2, &(i2, j2, k2)) in t.powers.iter().enumerate() {
                    if idx2 == idx {
                        continue;
                    }
                    let mut v = t.coef
                        * k as f64
                        * powi(a.get(i, j), k - 1)
                        * k2 as f64
                        * powi(a.get(i2, j2), k2 - 1)
                        * b.get(i2, j2);
                    for (idx3, &(i3, j3, k3)) in t.powers.iter().enumerate() {
                        if idx3 != idx && idx3 != idx2 {
                            v *= powi(a.get(i3, j3), k3);
                        }
                    }
                    m[i * d + j] += v;
                }
            }
        }
        // Symmetrize; models used here produce symmetric derivatives already.
        let mut sym = SymMat::zeros(d);
        for i in 0..d {
            for j in i..d {
                sym.set(i, j, 0.5 * (m[i * d + j] + m[j * d + i]));
            }
        }
        sym
    }
}

fn powi(x: f64, k: u32) -> f64 {
    match k {
        0 => 1.0,
        1 => x,
        2 => x * x,
        _ => {
            let mut acc = 1.0;
            for _ in 0..k {
                acc *= x;
            }
            acc
        }
    }
}

/// Outcome of the sampled y-to-z coupling certificate.
#[derive(Debug, Clone)]
pub struct CouplingCertificate {
    pub coupled: bool,
    pub samples: usize,
    /// A violating pair (a, b) when `coupled` is false.
    pub witness: Option<(SymMat, SymMat)>,
}

/// Sampled certificate that the directional derivative of grad xi transfers
/// strict increase along `y` to strict positive-definiteness along `z`:
/// for random PSD (a, b) with y^T b y > 0, checks that there is c > 0 with
/// d/d(eps) grad xi(a + eps b) >= c z z^T.
///
/// This is a randomized check over `samples` draws, not a proof.
pub fn is_y_to_z_coupled(
    xi: &XiModel,
    y: &[f64],
    z: &[f64],
    samples: usize,
    seed: u64,
) -> CouplingCertificate {
    let d = xi.dim();
    assert_eq!(y.len(), d);
    assert_eq!(z.len(), d);
    let mut rng = CounterRng::new(seed, 0);
    let z_norm2: f64 = z.iter().map(|v| v * v).sum();
    let mut checked = 0;
    while checked < samples {
        let a = crate::psd::project_psd(&random_gram(d, &mut rng));
        let b = crate::psd::project_psd(&random_gram(d, &mut rng));
        if b.quad_form(y) <= 1e-12 {
            continue;
        }
        checked += 1;
        let m = xi.grad_directional(&a, &b);
        if !dominates_rank_one(&m, z, z_norm2) {
            return CouplingCertificate { coupled: false, samples: checked, witness: Some((a, b)) };
        }
    }
    CouplingCertificate { coupled: true, samples: checked, witness: None }
}

/// True iff m >= c z z^T for some c > 0: m must be PSD and z must lie in the
/// range of the significantly positive part of the spectrum.
fn dominates_rank_one(m: &SymMat, z: &[f64], z_norm2: f64) -> bool {
    let (vals, vecs) = m.eigh();
    let d = m.dim();
    let scale = vals[0].abs().max(1.0);
    if vals[d - 1] < -1e-9 * scale {
        return false;
    }
    for c in 0..d {
        if vals[c] <= 1e-9 * scale {
            let proj: f64 = (0..d).map(|k| vecs[k * d + c] * z[k]).sum();
            if proj * proj > 1e-12 * z_norm2 {
                return false;
            }
        }
    }
    true
}

fn random_gram(dim: usize, rng: &mut CounterRng) -> SymMat {
    let mut g = vec![0.0; dim * dim];
    rng.fill_standard_normal(&mut g);
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_examples() {
        let m = SpinMeasure::ising();
        assert!(m.spans());
        let single = SpinMeasure::dirac(vec![1.0, 0.0]);
        assert!(!single.spans());
        let three = SpinMeasure::new(
            2,
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            vec![1.0, 1.0, 1.0],
        )
        .unwrap();
        assert!(three.spans());
    }

    #[test]
    fn xi_cross_term_gradient() {
        let xi = XiModel::cross_2d();
        let a = SymMat::from_row_major(2, &[0.3, 0.1, 0.1, 0.7]).unwrap();
        let g = xi.grad(&a).unwrap();
        assert!((g.get(0, 0) - 0.7).abs() < 1e-14);
        assert!((g.get(1, 1) - 0.3).abs() < 1e-14);
        assert!(g.get(0, 1).abs() < 1e-14);
        assert_eq!(xi.eval(&SymMat::zeros(2)), 0.0);
    }

    #[test]
    fn xi_coupled_directional_derivative() {
        let xi = XiModel::coupled_2d();
        let a = SymMat::from_row_major(2, &[0.5, 0.2, 0.2, 0.4]).unwrap();
        let b = SymMat::from_row_major(2, &[0.3, 0.0, 0.0, 0.9]).unwrap();
        let m = xi.grad_directional(&a, &b);
        assert!((m.get(0, 0) - (2.0 * 0.3 + 0.9)).abs() < 1e-14);
        assert!((m.get(1, 1) - (2.0 * 0.9 + 0.3)).abs() < 1e-14);
        assert!(m.get(0, 1).abs() < 1e-14);
    }

    #[test]
    fn directional_derivative_matches_finite_differences() {
        let xi = XiModel::coupled_2d();
        let mut rng = CounterRng::new(8, 0);
        for _ in 0..100 {
            let a = crate::psd::project_psd(&random_gram(2, &mut rng));
            let b = crate::psd::project_psd(&random_gram(2, &mut rng));
            let m = xi.grad_directional(&a, &b);
            let eps = 1e-5;
            let gp = xi.grad(&a.add(&b.scale(eps))).unwrap();
            let gm = xi.grad(&a.sub(&b.scale(eps))).unwrap();
            let fd = gp.sub(&gm).scale(0.5 / eps);
            let err = m.sub(&fd).norm() / (1.0 + m.norm());
            assert!(err < 1e-7, "relative FD error {err}");
        }
    }

    #[test]
    fn gradient_increments_stay_psd() {
        // Necessary covariance condition for the models used here.
        for xi in [XiModel::coupled_2d(), XiModel::cross_2d()] {
            let mut rng = CounterRng::new(13, 0);
            for _ in 0..100 {
                let a = crate::psd::project_psd(&random_gram(2, &mut rng));
                let b = crate::psd::project_psd(&random_gram(2, &mut rng));
                let inc = xi.grad(&a.add(&b)).unwrap().sub(&xi.grad(&a).unwrap());
                assert!(inc.is_psd(1e-9 * (1.0 + inc.norm())));
            }
        }
    }

    #[test]
    fn coupling_certificates() {
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        let cross = XiModel::cross_2d();
        assert!(is_y_to_z_coupled(&cross, &e1, &e2, 200, 7).coupled);
        assert!(is_y_to_z_coupled(&cross, &e2, &e1, 200, 7).coupled);

        let decoupled =
            XiModel::new(2, vec![Monomial { coef: 1.0, powers: vec![(0, 0, 2)] }]).unwrap();
        let cert = is_y_to_z_coupled(&decoupled, &e1, &e2, 200, 7);
        assert!(!cert.coupled);
        assert!(cert.witness.is_some());

        let coupled = XiModel::coupled_2d();
        let y = [0.3, -0.9];
        let z = [1.0, 0.4];
        assert!(is_y_to_z_coupled(&coupled, &y, &z, 200, 7).coupled);
    }

    #[test]
    fn degree_and_sign_validation() {
        assert!(XiModel::new(1, vec![Monomial { coef: -1.0, powers: vec![(0, 0, 2)] }]).is_err());
        assert!(XiModel::new(1, vec![Monomial { coef: 1.0, powers: vec![(0, 0, 7)] }]).is_err());
        assert!(XiModel::new(1, vec![Monomial { coef: 1.0, powers: vec![] }]).is_err());
    }
}
