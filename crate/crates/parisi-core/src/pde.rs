//! Backward solver for the Parisi PDE
//!
//!   dPhi/dt + < dL/dt , Hess Phi + alpha grad Phi grad Phi^T > = 0
//!
//! on [0, T] x R^D with terminal condition
//! phi(x) = log int exp(sigma . x - sigma sigma^T . L(T)) d mu(sigma).
//!
//! For a step p.d.f. alpha and piecewise-linear L the solution is built
//! exactly (up to quadrature and interpolation) by the recursive Gaussian
//! construction: going backward one level at a time,
//!
//!   Phi(t, x) = (1/s) log E exp( s Phi(t_next, x + sqrt(2 L(t_next) - 2 L(t)) g) ),
//!
//! with s the level of alpha on the interval and plain expectation when
//! s = 0. Gradient and Hessian fields are propagated through the same
//! recursion by differentiating it, which tilts the Gaussian weights by
//! exp(s Phi) and avoids finite-difference noise compounding across levels.
//!
//! Fields are stored per level on a tensor grid as cubic B-spline
//! coefficients (natural boundary), which keeps interpolation C^2; outside
//! the grid the spline extends linearly, consistent with the asymptotically
//! linear growth of a log-sum-exp of affine functions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::num;
use crate::par;
use crate::paths::{canonical_decomposition, Decomposition, PwLinear, StepPath, StepPdf};
use crate::psd::SymMat;
use crate::quad::GaussHermite;
use crate::rng::CounterRng;
use crate::spin::SpinMeasure;

/// Below this level the tilted expectation is numerically indistinguishable
/// from the plain one and the plain branch is used.
const LEVEL_CLAMP: f64 = 1e-8;

/// Quadrature mass allowed to escape the grid before the extent is rejected.
const ESCAPE_BUDGET: f64 = 1e-8;

/// How Gaussian expectations are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuadMode {
    /// Tensorized Gauss-Hermite with the given nodes per axis.
    TensorGh(usize),
    /// Seeded Monte Carlo fallback for D > 3; clearly lower accuracy.
    MonteCarlo { points: usize, seed: u64 },
}

/// Spatial grid and quadrature configuration.
#[derive(Debug, Clone)]
pub struct GridSpec {
    /// Half-extent of the symmetric grid; `None` derives it from the model as
    /// (max atom norm) * 2 tr(2 L(T)) + 8 sqrt(2 lambda_max(L(T))).
    pub half_extent: Option<f64>,
    /// Nodes per axis (odd so the origin is a node).
    pub points_per_axis: usize,
    pub quad: QuadMode,
}

impl GridSpec {
    /// Spec defaults per dimension: spacing extent/256 and 48/20/10
    /// Gauss-Hermite nodes for D = 1/2/3. For D = 3 the grid is coarsened to
    /// 129 points per axis to keep the tensor product tractable, and D >= 4
    /// falls back to Monte Carlo quadrature.
    pub fn default_for_dim(dim: usize) -> Self {
        let (points_per_axis, quad) = match dim {
            1 => (513, QuadMode::TensorGh(48)),
            2 => (513, QuadMode::TensorGh(20)),
            3 => (129, QuadMode::TensorGh(10)),
            _ => (65, QuadMode::MonteCarlo { points: 4000, seed: 0 }),
        };
        GridSpec { half_extent: None, points_per_axis, quad }
    }

    /// Coarser settings for Monte-Carlo-driven consumers where grid error is
    /// dominated by sampling error.
    pub fn coarse_for_dim(dim: usize) -> Self {
        let (points_per_axis, quad) = match dim {
            1 => (257, QuadMode::TensorGh(32)),
            2 => (161, QuadMode::TensorGh(16)),
            3 => (65, QuadMode::TensorGh(8)),
            _ => (33, QuadMode::MonteCarlo { points: 2000, seed: 0 }),
        };
        GridSpec { half_extent: None, points_per_axis, quad }
    }
}

/// Symmetric tensor grid [-hx, hx]^D with n nodes per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    half_extent: f64,
    n: usize,
    h: f64,
}

impl Grid {
    fn new(dim: usize, half_extent: f64, n: usize) -> Self {
        assert!(n >= 8 && n % 2 == 1, "points per axis must be odd and >= 9");
        Grid { dim, half_extent, n, h: 2.0 * half_extent / (n - 1) as f64 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn total_nodes(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Coordinates of flat node `idx` (axis 0 slowest).
    pub fn node_coords(&self, mut idx: usize, out: &mut [f64]) {
        for a in (0..self.dim).rev() {
            let i = idx % self.n;
            idx /= self.n;
            out[a] = -self.half_extent + i as f64 * self.h;
        }
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|&c| c.abs() <= self.half_extent + 1e-12)
    }
}

/// Per-axis interpolation stencil: up to 4 taps with ghost nodes folded in.
#[derive(Clone, Copy)]
struct AxisStencil {
    idx: [usize; 4],
    w: [f64; 4],
    taps: usize,
    outside: bool,
}

fn axis_stencil(grid: &Grid, coord: f64) -> AxisStencil {
    let n = grid.n;
    let u = (coord + grid.half_extent) / grid.h;
    if u <= 0.0 {
        // Linear extension: value = c0 (1 - u) + c1 u (natural BC gives y0 = c0).
        return AxisStencil { idx: [0, 1, 0, 0], w: [1.0 - u, u, 0.0, 0.0], taps: 2, outside: u < -1e-12 };
    }
    if u >= (n - 1) as f64 {
        let v = u - (n - 1) as f64;
        return AxisStencil {
            idx: [n - 2, n - 1, 0, 0],
            w: [-v, 1.0 + v, 0.0, 0.0],
            taps: 2,
            outside: v > 1e-12,
        };
    }
    let i = u as usize; // floor for u >= 0
    let i = i.min(n - 2);
    let f = u - i as f64;
    // Cubic B-spline basis on coefficients c_{i-1} .. c_{i+2}.
    let f2 = f * f;
    let f3 = f2 * f;
    let b = [
        (1.0 - f) * (1.0 - f) * (1.0 - f) / 6.0,
        (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0,
        (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
        f3 / 6.0,
    ];
    let mut st = AxisStencil { idx: [0; 4], w: [0.0; 4], taps: 4, outside: false };
    for (k, &bw) in b.iter().enumerate() {
        let j = i as isize - 1 + k as isize;
        // Ghost coefficients: c_{-1} = 2 c_0 - c_1, c_n = 2 c_{n-1} - c_{n-2}.
        if j < 0 {
            st.w[0] += 2.0 * bw;
            st.w[1] -= bw;
        } else if j as usize >= n {
            st.w[3] += 2.0 * bw;
            st.w[2] -= bw;
        } else {
            st.w[k] += bw;
        }
    }
    st.idx = [
        (i.max(1) - 1).min(n - 4),
        (i.max(1) - 1).min(n - 4) + 1,
        (i.max(1) - 1).min(n - 4) + 2,
        (i.max(1) - 1).min(n - 4) + 3,
    ];
    // Recompute weights against the clamped base index.
    let base = st.idx[0] as isize;
    let mut w = [0.0f64; 4];
    for (k, &bw) in b.iter().enumerate() {
        let j = i as isize - 1 + k as isize;
        if j < 0 {
            w[(0 - base) as usize] += 2.0 * bw;
            w[(1 - base) as usize] -= bw;
        } else if j as usize >= n {
            w[((n as isize - 1) - base) as usize] += 2.0 * bw;
            w[((n as isize - 2) - base) as usize] -= bw;
        } else {
            w[(j - base) as usize] += bw;
        }
    }
    st.w = w;
    st
}

/// A bundle of scalar fields on a shared grid, stored as natural cubic
/// B-spline coefficients, node-major and field-minor.
#[derive(Debug, Clone)]
pub struct FieldSet {
    grid: Grid,
    nf: usize,
    coeff: Vec<f64>,
}

impl FieldSet {
    /// Builds spline coefficients from raw node values (consumed in place).
    fn from_values(grid: Grid, nf: usize, mut data: Vec<f64>) -> Self {
        let n = grid.n;
        let dim = grid.dim;
        debug_assert_eq!(data.len(), grid.total_nodes() * nf);
        let mut scratch = vec![0.0; n];
        let mut cp = vec![0.0; n];
        // Prefilter along each axis: solve (c_{i-1} + 4 c_i + c_{i+1})/6 = y_i
        // with natural ends c_0 = y_0, c_{n-1} = y_{n-1}.
        for axis in 0..dim {
            let stride = n.pow((dim - 1 - axis) as u32) * nf;
            let lines = grid.total_nodes() / n;
            for line in 0..lines {
                // Decode the line index into a base offset skipping `axis`.
                let mut rem = line;
                let mut base = 0usize;
                for a in (0..dim).rev() {
                    if a == axis {
                        continue;
                    }
                    let i = rem % n;
                    rem /= n;
                    base += i * n.pow((dim - 1 - a) as u32);
                }
                base *= nf;
                for f in 0..nf {
                    let start = base + f;
                    for i in 0..n {
                        scratch[i] = data[start + i * stride];
                    }
                    solve_natural_spline(&scratch, &mut cp);
                    for i in 0..n {
                        data[start + i * stride] = cp[i];
                    }
                }
            }
        }
        FieldSet { grid, nf, coeff: data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn num_fields(&self) -> usize {
        self.nf
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeff
    }

    pub fn from_coefficients(grid: Grid, nf: usize, coeff: Vec<f64>) -> Result<Self> {
        if coeff.len() != grid.total_nodes() * nf {
            return Err(CoreError::Invalid(String::from("coefficient buffer size mismatch")));
        }
        Ok(FieldSet { grid, nf, coeff })
    }

    /// Interpolates every field at `x` into `out`; returns true when `x` was
    /// outside the grid (values then come from the linear extension).
    pub fn interp_all(&self, x: &[f64], out: &mut [f64]) -> bool {
        debug_assert_eq!(x.len(), self.grid.dim);
        debug_assert!(out.len() >= self.nf);
        let mut stencils = [AxisStencil { idx: [0; 4], w: [0.0; 4], taps: 0, outside: false }; 4];
        let dim = self.grid.dim;
        let mut outside = false;
        for a in 0..dim {
            stencils[a] = axis_stencil(&self.grid, x[a]);
            outside |= stencils[a].outside;
        }
        for v in out[..self.nf].iter_mut() {
            *v = 0.0;
        }
        let n = self.grid.n;
        let nf = self.nf;
        // Tensor accumulation over up to 4^dim taps.
        let mut counters = [0usize; 4];
        loop {
            let mut w = 1.0;
            let mut idx = 0usize;
            for a in 0..dim {
                let st = &stencils[a];
                let k = counters[a];
                w *= st.w[k];
                idx = idx * n + st.idx[k];
            }
            if w != 0.0 {
                let off = idx * nf;
                for (f, v) in out[..nf].iter_mut().enumerate() {
                    *v += w * self.coeff[off + f];
                }
            }
            // Advance the mixed-radix counter.
            let mut a = 0;
            loop {
                if a == dim {
                    return outside;
                }
                counters[a] += 1;
                if counters[a] < stencils[a].taps {
                    break;
                }
                counters[a] = 0;
                a += 1;
            }
        }
    }
}

/// Thomas solve for the natural cubic B-spline prefilter.
fn solve_natural_spline(y: &[f64], c: &mut [f64]) {
    let n = y.len();
    c[0] = y[0];
    c[n - 1] = y[n - 1];
    if n == 2 {
        return;
    }
    // Interior unknowns c_1 .. c_{n-2}: c_{i-1} + 4 c_i + c_{i+1} = 6 y_i.
    let m = n - 2;
    let mut diag = vec![4.0f64; m];
    let mut rhs = vec![0.0f64; m];
    for i in 0..m {
        rhs[i] = 6.0 * y[i + 1];
    }
    rhs[0] -= c[0];
    rhs[m - 1] -= c[n - 1];
    for i in 1..m {
        let w = 1.0 / diag[i - 1];
        diag[i] -= w;
        rhs[i] -= w * rhs[i - 1];
    }
    c[m] = rhs[m - 1] / diag[m - 1];
    for i in (0..m - 1).rev() {
        c[i + 1] = (rhs[i] - c[i + 2]) / diag[i];
    }
}

/// One Gaussian quadrature point: spatial offset and probability weight.
#[derive(Debug, Clone)]
struct QuadPoint {
    offset: Vec<f64>,
    weight: f64,
}

/// Quadrature plan realizing E f(x + Z) with Z ~ N(0, 2 dl).
fn gaussian_plan(dl: &SymMat, mode: QuadMode) -> Vec<QuadPoint> {
    let d = dl.dim();
    let (vals, vecs) = dl.eigh();
    let scale = vals[0].max(0.0);
    let active: Vec<usize> = (0..d).filter(|&c| vals[c] > 1e-14 * (1.0 + scale)).collect();
    if active.is_empty() {
        return vec![QuadPoint { offset: vec![0.0; d], weight: 1.0 }];
    }
    match mode {
        QuadMode::TensorGh(nodes) => {
            let gh = GaussHermite::new(nodes);
            let pts = gh.normal_points();
            let mut plan = Vec::with_capacity(pts.len().pow(active.len() as u32));
            let mut counters = vec![0usize; active.len()];
            loop {
                let mut offset = vec![0.0; d];
                let mut weight = 1.0;
                for (ai, &c) in active.iter().enumerate() {
                    let (z, w) = pts[counters[ai]];
                    weight *= w;
                    let amp = num::sqrt(2.0 * vals[c]) * z;
                    for r in 0..d {
                        offset[r] += amp * vecs[r * d + c];
                    }
                }
                plan.push(QuadPoint { offset, weight });
                let mut a = 0;
                loop {
                    if a == active.len() {
                        return plan;
                    }
                    counters[a] += 1;
                    if counters[a] < pts.len() {
                        break;
                    }
                    counters[a] = 0;
                    a += 1;
                }
            }
        }
        QuadMode::MonteCarlo { points, seed } => {
            let mut rng = CounterRng::new(seed, 0xD1CE);
            let w = 1.0 / points as f64;
            (0..points)
                .map(|_| {
                    let mut offset = vec![0.0; d];
                    for &c in &active {
                        let amp = num::sqrt(2.0 * vals[c]) * rng.standard_normal();
                        for r in 0..d {
                            offset[r] += amp * vecs[r * d + c];
                        }
                    }
                    QuadPoint { offset, weight: w }
                })
                .collect()
        }
    }
}

/// Log of the integral in the terminal condition, stabilized by max-shift.
pub fn terminal_condition(mu: &SpinMeasure, l_end: &SymMat, x: &[f64]) -> f64 {
    let (v, _, _) = terminal_fields(mu, l_end, x);
    v
}

/// Terminal value together with its gradient and Hessian in closed form.
pub fn terminal_fields(mu: &SpinMeasure, l_end: &SymMat, x: &[f64]) -> (f64, Vec<f64>, SymMat) {
    let d = mu.dim();
    let mut exponents = Vec::with_capacity(mu.atoms().len());
    let mut emax = f64::NEG_INFINITY;
    for (atom, &w) in mu.atoms().iter().zip(mu.weights().iter()) {
        let lin: f64 = atom.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let tilt = SymMat::outer(atom).dot(l_end);
        let e = num::ln(w) + lin - tilt;
        emax = emax.max(e);
        exponents.push(e);
    }
    let z: f64 = exponents.iter().map(|&e| num::exp(e - emax)).sum();
    let value = emax + num::ln(z);
    let mut grad = vec![0.0; d];
    let mut second = SymMat::zeros(d);
    for (k, atom) in mu.atoms().iter().enumerate() {
        let p = num::exp(exponents[k] - emax) / z;
        for (g, &a) in grad.iter_mut().zip(atom.iter()) {
            *g += p * a;
        }
        second = second.add(&SymMat::outer(atom).scale(p));
    }
    let hess = second.sub(&SymMat::outer(&grad));
    (value, grad, hess)
}

/// One backward level of the recursion applied to interpolated next-level
/// fields. `fields` is the scratch holding (value, grad, hess) of the next
/// level at a quadrature point.
struct LevelKernel<'a> {
    next: &'a FieldSet,
    plan: &'a [QuadPoint],
    s: f64,
    dim: usize,
}

impl LevelKernel<'_> {
    /// Computes (value, grad, hess-upper-tri) at x, and the quadrature weight
    /// that fell outside the grid.
    fn eval(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let d = self.dim;
        let nf = self.next.num_fields();
        let nh = d * (d + 1) / 2;
        let tilted = self.s > LEVEL_CLAMP;
        let mut escaped = 0.0;
        let mut y = vec![0.0; d];
        let mut buf = vec![0.0; nf];
        // Online max-shift: accumulators are kept relative to the running
        // maximum of the exponent and rescaled when it grows.
        let mut shift = f64::NEG_INFINITY;
        let mut z = 0.0;
        let mut val_acc = 0.0;
        let mut grad_acc = vec![0.0; d];
        let mut hess_acc = vec![0.0; nh];
        for qp in self.plan {
            for (yi, (xi, oi)) in y.iter_mut().zip(x.iter().zip(qp.offset.iter())) {
                *yi = xi + oi;
            }
            let outside = self.next.interp_all(&y, &mut buf);
            if outside {
                escaped += qp.weight;
            }
            let v = buf[0];
            let w = if tilted {
                if v > shift {
                    let rescale = if shift == f64::NEG_INFINITY {
                        0.0
                    } else {
                        num::exp(self.s * (shift - v))
                    };
                    z *= rescale;
                    val_acc *= rescale;
                    for g in grad_acc.iter_mut() {
                        *g *= rescale;
                    }
                    for hval in hess_acc.iter_mut() {
                        *hval *= rescale;
                    }
                    shift = v;
                }
                qp.weight * num::exp(self.s * (v - shift))
            } else {
                qp.weight
            };
            z += w;
            if !tilted {
                val_acc += w * v;
            }
            for i in 0..d {
                grad_acc[i] += w * buf[1 + i];
            }
            // E_w[hess_next + s grad grad^T]
            let mut idx = 0;
            for i in 0..d {
                for j in i..d {
                    let mut hij = buf[1 + d + idx];
                    if tilted {
                        hij += self.s * buf[1 + i] * buf[1 + j];
                    }
                    hess_acc[idx] += w * hij;
                    idx += 1;
                }
            }
        }
        let inv_z = 1.0 / z;
        let value = if tilted { shift + num::ln(z) / self.s } else { val_acc * inv_z };
        for g in grad_acc.iter_mut() {
            *g *= inv_z;
        }
        let mut idx = 0;
        for i in 0..d {
            for j in i..d {
                let mut hij = hess_acc[idx] * inv_z;
                if tilted {
                    hij -= self.s * grad_acc[i] * grad_acc[j];
                }
                hess_acc[idx] = hij;
                idx += 1;
            }
        }
        out[0] = value;
        out[1..1 + d].copy_from_slice(&grad_acc);
        out[1 + d..1 + d + nh].copy_from_slice(&hess_acc);
        escaped
    }
}

/// Evaluable solution of the Parisi PDE together with its derivative fields.
#[derive(Debug, Clone)]
pub struct ParisiSolution {
    mu: SpinMeasure,
    l: PwLinear,
    alpha: StepPdf,
    grid: Grid,
    quad: QuadMode,
    /// Recursion boundaries tau_0 = 0 < ... < tau_m = T.
    boundaries: Vec<f64>,
    /// alpha level on [tau_{j}, tau_{j+1}).
    piece_level: Vec<f64>,
    /// Field sets at each boundary, index-aligned with `boundaries`.
    levels: Vec<FieldSet>,
    /// Worst quadrature mass that left the grid from a core node.
    escaped_mass: f64,
}

fn merged_boundaries(l: &PwLinear, alpha: &StepPdf) -> Vec<f64> {
    let mut b = crate::paths::merge_breakpoints(l.times(), alpha.times());
    let t_end = alpha.domain_end();
    if b.last().map_or(true, |&x| x < t_end - crate::MERGE_TOL) {
        b.push(t_end);
    }
    b
}

/// Solves the PDE for the decomposition (L, alpha) and terminal measure mu.
pub fn solve_parisi(
    mu: &SpinMeasure,
    l: &PwLinear,
    alpha: &StepPdf,
    spec: &GridSpec,
) -> Result<ParisiSolution> {
    let d = mu.dim();
    if l.dim() != d {
        return Err(CoreError::DimensionMismatch { expected: d, got: l.dim() });
    }
    if (l.domain_end() - alpha.domain_end()).abs() > 1e-9 * (1.0 + alpha.domain_end()) {
        return Err(CoreError::Invalid(String::from(
            "L and alpha must share the same time domain",
        )));
    }
    if d > 4 {
        return Err(CoreError::Invalid(format!("dimension {d} beyond the design envelope")));
    }
    let t_end = alpha.domain_end();
    let l_end = l.eval(t_end);
    let half_extent = spec.half_extent.unwrap_or_else(|| {
        let max_atom = mu.max_atom_norm();
        let lam = l_end.max_eigenvalue().max(0.0);
        max_atom * 2.0 * (2.0 * l_end.trace()) + 8.0 * num::sqrt(2.0 * lam)
    });
    if !(half_extent > 0.0) {
        return Err(CoreError::Invalid(String::from("grid half-extent must be positive")));
    }
    let grid = Grid::new(d, half_extent, spec.points_per_axis);
    let nf = 1 + d + d * (d + 1) / 2;
    let boundaries = merged_boundaries(l, alpha);
    let m = boundaries.len();

    // Terminal fields in closed form.
    let total = grid.total_nodes();
    let term_vals = par::map_indexed(total, |idx| {
        let mut x = vec![0.0; d];
        grid.node_coords(idx, &mut x);
        let (v, g, hmat) = terminal_fields(mu, &l_end, &x);
        let mut row = vec![0.0; nf];
        row[0] = v;
        row[1..1 + d].copy_from_slice(&g);
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                row[1 + d + k] = hmat.get(i, j);
                k += 1;
            }
        }
        row
    });
    let mut flat = vec![0.0; total * nf];
    for (idx, row) in term_vals.into_iter().enumerate() {
        flat[idx * nf..(idx + 1) * nf].copy_from_slice(&row);
    }
    let mut levels: Vec<FieldSet> = Vec::with_capacity(m);
    levels.push(FieldSet::from_values(grid.clone(), nf, flat));

    // Escaped quadrature mass is monitored on the payload region the extent
    // formula protects: queries there stay six total-diffusion sigmas away
    // from the boundary, so under an adequate extent the measured escape is
    // below the budget and a too-small grid trips it immediately.
    let total_spread = l.eval(t_end).sub(&l.eval(0.0)).max_eigenvalue().max(0.0);
    let core_bound =
        (half_extent - 6.0 * num::sqrt(2.0 * total_spread)).max(0.25 * half_extent);

    let mut piece_level = vec![0.0; m.saturating_sub(1)];
    let mut worst_escape = 0.0f64;
    for j in (0..m - 1).rev() {
        let t0 = boundaries[j];
        let t1 = boundaries[j + 1];
        let s = alpha.eval(t0)?;
        piece_level[j] = s;
        let dl = l.eval(t1).sub(&l.eval(t0));
        let next = levels.last().unwrap();
        let new_fields = if dl.max_eigenvalue() <= 1e-14 * (1.0 + l_end.norm()) {
            // Identity step: no Gaussian spread between these boundaries.
            next.clone()
        } else {
            let plan = gaussian_plan(&dl, spec.quad);
            let kernel = LevelKernel { next, plan: &plan, s, dim: d };
            let rows = par::map_indexed(total, |idx| {
                let mut x = vec![0.0; d];
                grid.node_coords(idx, &mut x);
                let mut row = vec![0.0; nf];
                let escaped = kernel.eval(&x, &mut row);
                let in_core = x.iter().all(|&c| c.abs() <= core_bound);
                (row, if in_core { escaped } else { 0.0 })
            });
            let mut flat = vec![0.0; total * nf];
            for (idx, (row, esc)) in rows.into_iter().enumerate() {
                flat[idx * nf..(idx + 1) * nf].copy_from_slice(&row);
                worst_escape = worst_escape.max(esc);
            }
            FieldSet::from_values(grid.clone(), nf, flat)
        };
        levels.push(new_fields);
    }
    levels.reverse(); // index-align with boundaries
    if worst_escape > ESCAPE_BUDGET {
        return Err(CoreError::GridTooSmall { escaped: worst_escape });
    }
    Ok(ParisiSolution {
        mu: mu.clone(),
        l: l.clone(),
        alpha: alpha.clone(),
        grid,
        quad: spec.quad,
        boundaries,
        piece_level,
        levels,
        escaped_mass: worst_escape,
    })
}

/// Convenience: solve from a decomposition.
pub fn solve_decomposition(
    mu: &SpinMeasure,
    decomp: &Decomposition,
    spec: &GridSpec,
) -> Result<ParisiSolution> {
    solve_parisi(mu, &decomp.l, &decomp.alpha, spec)
}

impl ParisiSolution {
    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    pub fn domain_end(&self) -> f64 {
        self.alpha.domain_end()
    }

    pub fn measure(&self) -> &SpinMeasure {
        &self.mu
    }

    pub fn lipschitz_path(&self) -> &PwLinear {
        &self.l
    }

    pub fn pdf(&self) -> &StepPdf {
        &self.alpha
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn level_fields(&self, j: usize) -> &FieldSet {
        &self.levels[j]
    }

    pub fn escaped_mass(&self) -> f64 {
        self.escaped_mass
    }

    /// alpha level in force on the piece containing t (right-continuous).
    pub fn level_at(&self, t: f64) -> f64 {
        if t >= self.domain_end() {
            return 1.0;
        }
        let j = self.boundaries.partition_point(|&b| b <= t + 1e-15) - 1;
        self.piece_level[j.min(self.piece_level.len() - 1)]
    }

    fn locate(&self, t: f64) -> Result<usize> {
        let t_end = self.domain_end();
        if !(0.0..=t_end + 1e-12).contains(&t) {
            return Err(CoreError::OutOfDomain { value: t, lo: 0.0, hi: t_end });
        }
        Ok(self.boundaries.partition_point(|&b| b <= t + 1e-15) - 1)
    }

    /// All fields (value, gradient, Hessian) at (t, x).
    pub fn fields_at(&self, t: f64, x: &[f64]) -> Result<(f64, Vec<f64>, SymMat)> {
        let d = self.dim();
        if x.len() != d {
            return Err(CoreError::DimensionMismatch { expected: d, got: x.len() });
        }
        if !self.grid.contains(x) {
            let bad = x.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            return Err(CoreError::OutsideGrid { coord: bad, half_extent: self.grid.half_extent });
        }
        let j = self.locate(t)?;
        let nf = 1 + d + d * (d + 1) / 2;
        let mut out = vec![0.0; nf];
        let at_boundary = (t - self.boundaries[j]).abs() < 1e-13 * (1.0 + self.domain_end());
        if at_boundary || j + 1 >= self.boundaries.len() {
            self.levels[j.min(self.levels.len() - 1)].interp_all(x, &mut out);
        } else {
            let t1 = self.boundaries[j + 1];
            let dl = self.l.eval(t1).sub(&self.l.eval(t));
            if dl.max_eigenvalue() <= 1e-14 {
                self.levels[j + 1].interp_all(x, &mut out);
            } else {
                let plan = gaussian_plan(&dl, self.quad);
                let kernel =
                    LevelKernel { next: &self.levels[j + 1], plan: &plan, s: self.piece_level[j], dim: d };
                kernel.eval(x, &mut out);
            }
        }
        let mut grad = vec![0.0; d];
        grad.copy_from_slice(&out[1..1 + d]);
        let mut hess = SymMat::zeros(d);
        let mut k = 0;
        for i in 0..d {
            for jj in i..d {
                hess.set(i, jj, out[1 + d + k]);
                k += 1;
            }
        }
        Ok((out[0], grad, hess))
    }

    pub fn value(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.fields_at(t, x)?.0)
    }

    pub fn grad(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.fields_at(t, x)?.1)
    }

    pub fn hess(&self, t: f64, x: &[f64]) -> Result<SymMat> {
        Ok(self.fields_at(t, x)?.2)
    }

    /// A full grad/Hessian field snapshot at an arbitrary time, for path
    /// simulation. Field layout matches the stored levels.
    pub fn snapshot_at(&self, t: f64) -> Result<FieldSet> {
        let d = self.dim();
        let nf = 1 + d + d * (d + 1) / 2;
        let j = self.locate(t)?;
        let at_boundary = (t - self.boundaries[j]).abs() < 1e-13 * (1.0 + self.domain_end());
        if at_boundary || j + 1 >= self.boundaries.len() {
            return Ok(self.levels[j.min(self.levels.len() - 1)].clone());
        }
        let t1 = self.boundaries[j + 1];
        let dl = self.l.eval(t1).sub(&self.l.eval(t));
        if dl.max_eigenvalue() <= 1e-14 {
            return Ok(self.levels[j + 1].clone());
        }
        let plan = gaussian_plan(&dl, self.quad);
        let kernel = LevelKernel { next: &self.levels[j + 1], plan: &plan, s: self.piece_level[j], dim: d };
        let total = self.grid.total_nodes();
        let rows = par::map_indexed(total, |idx| {
            let mut x = vec![0.0; d];
            self.grid.node_coords(idx, &mut x);
            let mut row = vec![0.0; nf];
            kernel.eval(&x, &mut row);
            row
        });
        let mut flat = vec![0.0; total * nf];
        for (idx, row) in rows.into_iter().enumerate() {
            flat[idx * nf..(idx + 1) * nf].copy_from_slice(&row);
        }
        Ok(FieldSet::from_values(self.grid.clone(), nf, flat))
    }

    /// Pointwise PDE residual
    /// | dPhi/dt + < dL/dt, Hess Phi + alpha grad grad^T > |
    /// with the time derivative taken by a central difference of the solution.
    pub fn pde_residual(&self, t: f64, x: &[f64]) -> Result<f64> {
        let j = self.locate(t)?;
        if j + 1 >= self.boundaries.len() {
            return Err(CoreError::AtDiscontinuity { t });
        }
        let (t0, t1) = (self.boundaries[j], self.boundaries[j + 1]);
        let width = t1 - t0;
        let margin = 1e-6 * width;
        if t - t0 < margin || t1 - t < margin {
            return Err(CoreError::AtDiscontinuity { t });
        }
        let delta = (1e-3 * width).min(0.45 * (t - t0)).min(0.45 * (t1 - t));
        let v_plus = self.value(t + delta, x)?;
        let v_minus = self.value(t - delta, x)?;
        let dt_phi = (v_plus - v_minus) / (2.0 * delta);
        let (_, grad, hess) = self.fields_at(t, x)?;
        let alpha_t = self.piece_level[j];
        // dL/dt on the containing linear piece of L.
        let lj = self.l.times().partition_point(|&b| b <= t + 1e-15) - 1;
        let lj = lj.min(self.l.times().len() - 2);
        let ldot = self.l.slope(lj);
        let inner = ldot.dot(&hess.add(&SymMat::outer(&grad).scale(alpha_t)));
        Ok((dt_phi + inner).abs())
    }
}

/// The free-energy functional value psi(q) = -Phi(0, 0) computed through the
/// pinned canonical decomposition of q.
///
/// For the identically-zero path this is -log(total mass) directly. The usual
/// interpretation expects a probability measure; general positive mass is
/// allowed and simply shifts the value by -log(mass).
pub fn psi_value(mu: &SpinMeasure, q: &StepPath, spec: &GridSpec) -> Result<f64> {
    if q.dim() != mu.dim() {
        return Err(CoreError::DimensionMismatch { expected: mu.dim(), got: q.dim() });
    }
    match canonical_decomposition(q)? {
        None => Ok(-num::ln(mu.total_mass())),
        Some(decomp) => {
            let sol = solve_decomposition(mu, &decomp, spec)?;
            let x0 = vec![0.0; mu.dim()];
            Ok(-sol.value(0.0, &x0)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1() -> GridSpec {
        GridSpec { half_extent: None, points_per_axis: 513, quad: QuadMode::TensorGh(48) }
    }

    fn ising_mass2() -> SpinMeasure {
        SpinMeasure::new(1, vec![vec![-1.0], vec![1.0]], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn terminal_examples() {
        let mu = SpinMeasure::ising();
        let zero = SymMat::scalar(0.0);
        for &x in &[-2.0, -0.3, 0.0, 1.5] {
            let v = terminal_condition(&mu, &zero, &[x]);
            assert!((v - x.cosh().ln()).abs() < 1e-14);
            let t = 0.7;
            let v2 = terminal_condition(&mu, &SymMat::scalar(t), &[x]);
            assert!((v2 - (x.cosh().ln() - t)).abs() < 1e-14);
        }
        let delta0 = SpinMeasure::dirac(vec![0.0]);
        assert_eq!(terminal_condition(&delta0, &SymMat::scalar(0.3), &[1.2]), 0.0);
    }

    #[test]
    fn terminal_fields_match_finite_differences() {
        let mu = SpinMeasure::new(
            2,
            vec![vec![1.0, 0.5], vec![-0.7, 0.2], vec![0.1, -0.9]],
            vec![0.5, 0.2, 0.3],
        )
        .unwrap();
        let lt = SymMat::from_row_major(2, &[0.3, 0.1, 0.1, 0.2]).unwrap();
        let x = [0.4, -0.6];
        let (_, g, h) = terminal_fields(&mu, &lt, &x);
        let eps = 1e-5;
        for i in 0..2 {
            let mut xp = x;
            xp[i] += eps;
            let mut xm = x;
            xm[i] -= eps;
            let fd = (terminal_condition(&mu, &lt, &xp) - terminal_condition(&mu, &lt, &xm))
                / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-9);
            for j in 0..2 {
                let mut xpp = x;
                xpp[i] += eps;
                let (_, gp, _) = terminal_fields(&mu, &lt, &xpp);
                let mut xmm = x;
                xmm[i] -= eps;
                let (_, gm, _) = terminal_fields(&mu, &lt, &xmm);
                let fd2 = (gp[j] - gm[j]) / (2.0 * eps);
                assert!((fd2 - h.get(i, j)).abs() < 1e-8);
            }
        }
    }

    /// Hopf-Cole closed form: with mass-2 Ising spins, L(t) = t and alpha
    /// identically 1, Phi(0, x) = log(2 cosh x) independently of T.
    #[test]
    fn replica_symmetric_closed_form() {
        let mu = ising_mass2();
        let t_end = 0.7;
        let l = PwLinear::new(vec![0.0, t_end], vec![SymMat::scalar(0.0), SymMat::scalar(t_end)])
            .unwrap();
        let alpha = StepPdf::new(t_end, vec![0.0], vec![1.0]).unwrap();
        let sol = solve_parisi(&mu, &l, &alpha, &grid1()).unwrap();
        let mut sup = 0.0f64;
        for i in 0..=60 {
            let x = -3.0 + 6.0 * i as f64 / 60.0;
            let got = sol.value(0.0, &[x]).unwrap();
            let want = (2.0 * x.cosh()).ln();
            sup = sup.max((got - want).abs());
        }
        assert!(sup < 1e-6, "sup error {sup}");
        // Gradient of the closed form is tanh.
        for &x in &[-2.0, -0.5, 0.0, 1.0, 2.5] {
            let g = sol.grad(0.0, &[x]).unwrap()[0];
            assert!((g - x.tanh()).abs() < 1e-6);
        }
        // Odd symmetry at the origin.
        assert!(sol.grad(0.35, &[0.0]).unwrap()[0].abs() < 1e-9);
    }

    /// Plain-expectation branch: alpha with all mass at T gives
    /// Phi(0, x) = E log(2 cosh(sqrt(2T) g + x)) - T.
    #[test]
    fn zero_level_closed_form() {
        let mu = ising_mass2();
        let t_end = 0.6;
        let l = PwLinear::new(vec![0.0, t_end], vec![SymMat::scalar(0.0), SymMat::scalar(t_end)])
            .unwrap();
        let alpha = StepPdf::new(t_end, vec![0.0, t_end], vec![0.0, 1.0]).unwrap();
        let sol = solve_parisi(&mu, &l, &alpha, &grid1()).unwrap();
        let gh = GaussHermite::new(64);
        for &x in &[-2.0, 0.0, 0.9, 3.0] {
            let want =
                gh.expect_standard_normal(|g| (2.0 * ((2.0 * t_end).sqrt() * g + x).cosh()).ln())
                    - t_end;
            let got = sol.value(0.0, &[x]).unwrap();
            assert!((got - want).abs() < 1e-7, "x = {x}: {got} vs {want}");
        }
    }

    #[test]
    fn dirac_zero_measure_gives_zero_solution() {
        let mu = SpinMeasure::dirac(vec![0.0]);
        let t_end = 0.5;
        let l = PwLinear::new(vec![0.0, t_end], vec![SymMat::scalar(0.0), SymMat::scalar(t_end)])
            .unwrap();
        let alpha = StepPdf::new(t_end, vec![0.0, 0.2, t_end], vec![0.0, 0.5, 1.0]).unwrap();
        let spec = GridSpec { half_extent: Some(6.0), points_per_axis: 129, quad: QuadMode::TensorGh(24) };
        let sol = solve_parisi(&mu, &l, &alpha, &spec).unwrap();
        assert!(sol.value(0.0, &[0.7]).unwrap().abs() < 1e-12);
        assert!(sol.hess(0.3, &[0.7]).unwrap().norm() < 1e-12);
        assert!(sol.pde_residual(0.1, &[0.4]).unwrap() < 1e-10);
    }

    #[test]
    fn residual_small_in_closed_form_case() {
        let mu = ising_mass2();
        let t_end = 0.7;
        let l = PwLinear::new(vec![0.0, t_end], vec![SymMat::scalar(0.0), SymMat::scalar(t_end)])
            .unwrap();
        let alpha = StepPdf::new(t_end, vec![0.0], vec![1.0]).unwrap();
        let sol = solve_parisi(&mu, &l, &alpha, &grid1()).unwrap();
        for &(t, x) in &[(0.2, 0.5), (0.35, -1.2), (0.6, 2.0)] {
            let r = sol.pde_residual(t, &[x]).unwrap();
            assert!(r < 1e-4, "residual {r} at ({t}, {x})");
        }
        // Queries at level boundaries are rejected.
        assert!(matches!(sol.pde_residual(0.0, &[0.5]), Err(CoreError::AtDiscontinuity { .. })));
    }

    #[test]
    fn escape_check_rejects_tiny_grids() {
        let mu = ising_mass2();
        let t_end = 1.0;
        let l = PwLinear::new(vec![0.0, t_end], vec![SymMat::scalar(0.0), SymMat::scalar(t_end)])
            .unwrap();
        let alpha = StepPdf::new(t_end, vec![0.0], vec![1.0]).unwrap();
        let spec = GridSpec { half_extent: Some(0.8), points_per_axis: 65, quad: QuadMode::TensorGh(24) };
        match solve_parisi(&mu, &l, &alpha, &spec) {
            Err(CoreError::GridTooSmall { escaped }) => assert!(escaped > ESCAPE_BUDGET),
            other => panic!("expected GridTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn psi_examples() {
        let spec = grid1();
        // Probability measure at q = 0.
        assert_eq!(psi_value(&SpinMeasure::ising(), &StepPath::zero(1), &spec).unwrap(), 0.0);
        // Scaled mass m at q = 0 gives -log m.
        let mu2 = ising_mass2();
        let got = psi_value(&mu2, &StepPath::zero(1), &spec).unwrap();
        assert!((got + 2.0f64.ln()).abs() < 1e-15);
        // Constant path against the direct Gauss-Hermite formula.
        let h = 0.4;
        let q = StepPath::scalar(vec![0.0], vec![h]).unwrap();
        let gh = GaussHermite::new(64);
        let want = h - gh.expect_standard_normal(|z| ((2.0 * h).sqrt() * z).cosh().ln());
        let got = psi_value(&SpinMeasure::ising(), &q, &spec).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn two_level_residual_and_refinement() {
        // 2-level Ising solution: residual small at the default-grade grid and
        // decreasing under refinement.
        let mu = SpinMeasure::ising();
        let q = StepPath::scalar(vec![0.0, 0.4], vec![0.2, 0.7]).unwrap();
        let d = canonical_decomposition(&q).unwrap().unwrap();
        let probes = [(0.1, 0.4), (0.45, -0.8), (0.62, 1.3)];
        let mut last = f64::INFINITY;
        for &n in &[129usize, 257, 513] {
            let spec = GridSpec { half_extent: None, points_per_axis: n, quad: QuadMode::TensorGh(48) };
            let sol = solve_decomposition(&mu, &d, &spec).unwrap();
            let worst = probes
                .iter()
                .map(|&(t, x)| sol.pde_residual(t, &[x]).unwrap())
                .fold(0.0f64, f64::max);
            assert!(worst < last * 1.2, "residual not improving: {worst} after {last}");
            last = worst;
        }
        assert!(last < 5e-3, "residual at finest grid {last}");
    }

    #[test]
    fn interior_time_evaluation_is_consistent() {
        // Piecewise evaluation at interior t agrees with a solve that has an
        // artificial boundary inserted there.
        let mu = SpinMeasure::ising();
        let q = StepPath::scalar(vec![0.0, 0.5], vec![0.3, 0.6]).unwrap();
        let d = canonical_decomposition(&q).unwrap().unwrap();
        let spec =
            GridSpec { half_extent: Some(10.0), points_per_axis: 257, quad: QuadMode::TensorGh(32) };
        let sol = solve_decomposition(&mu, &d, &spec).unwrap();
        let t_probe = 0.17;
        // Probe at an exact grid node so stored-level and on-the-fly paths
        // agree to roundoff rather than to interpolation error.
        let x_probe = -10.0 + 138.0 * (20.0 / 256.0);
        let (v, g, h) = sol.fields_at(t_probe, &[x_probe]).unwrap();
        // Insert a knot at t_probe in L (harmless: L is linear there).
        let mut times = d.l.times().to_vec();
        let mut knots = d.l.knots().to_vec();
        let pos = times.partition_point(|&x| x < t_probe);
        times.insert(pos, t_probe);
        knots.insert(pos, d.l.eval(t_probe));
        let l2 = PwLinear::new(times, knots).unwrap();
        let sol2 = solve_parisi(&mu, &l2, &d.alpha, &spec).unwrap();
        let (v2, g2, h2) = sol2.fields_at(t_probe, &[x_probe]).unwrap();
        assert!((v - v2).abs() < 1e-10, "{v} vs {v2}");
        assert!((g[0] - g2[0]).abs() < 1e-9);
        assert!((h.get(0, 0) - h2.get(0, 0)).abs() < 1e-8);
    }

    #[test]
    fn gradient_bound_by_max_atom_norm() {
        let mu = SpinMeasure::biased_ising(0.7);
        let q = StepPath::scalar(vec![0.0, 0.3, 0.6], vec![0.1, 0.35, 0.8]).unwrap();
        let d = canonical_decomposition(&q).unwrap().unwrap();
        let spec = GridSpec { half_extent: None, points_per_axis: 257, quad: QuadMode::TensorGh(32) };
        let sol = solve_decomposition(&mu, &d, &spec).unwrap();
        let bound = mu.max_atom_norm() + 1e-9;
        for i in 0..=10 {
            let t = sol.domain_end() * i as f64 / 10.0;
            for j in 0..=8 {
                let x = -4.0 + j as f64;
                let g = sol.grad(t, &[x]).unwrap()[0];
                assert!(g.abs() <= bound, "grad {g} at ({t}, {x})");
            }
        }
    }

    #[test]
    fn two_dimensional_product_measure_factorizes() {
        // For a product measure and block-diagonal (L, alpha) built from a
        // diagonal path, Phi splits into a sum of one-dimensional solutions.
        let mu2 = SpinMeasure::ising_product(2);
        let q2 = StepPath::constant(SymMat::diag(&[0.3, 0.3]));
        let d2 = canonical_decomposition(&q2).unwrap().unwrap();
        let spec2 = GridSpec { half_extent: Some(8.0), points_per_axis: 161, quad: QuadMode::TensorGh(16) };
        let sol2 = solve_decomposition(&mu2, &d2, &spec2).unwrap();

        let mu1 = SpinMeasure::ising();
        let q1 = StepPath::scalar(vec![0.0], vec![0.3]).unwrap();
        let d1 = canonical_decomposition(&q1).unwrap().unwrap();
        let spec1 = GridSpec { half_extent: Some(8.0), points_per_axis: 257, quad: QuadMode::TensorGh(32) };
        let sol1 = solve_decomposition(&mu1, &d1, &spec1).unwrap();

        for &(x, y) in &[(0.0, 0.0), (0.7, -0.4), (-1.1, 0.9)] {
            let v2 = sol2.value(0.0, &[x, y]).unwrap();
            let v1 = sol1.value(0.0, &[x]).unwrap() + sol1.value(0.0, &[y]).unwrap();
            assert!((v2 - v1).abs() < 1e-5, "({x},{y}): {v2} vs {v1}");
        }
    }
}
