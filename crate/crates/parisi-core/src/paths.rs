//! Matrix-valued step paths, quantile functions, and decompositions of a path
//! into a Lipschitz matrix path composed with a quantile function.
//!
//! A step path plays the role of a discrete (finite-RSB) order parameter: it
//! is right-continuous, piecewise constant, increasing in the Loewner order,
//! and defined on [0, 1). Only step paths are represented exactly; general
//! paths enter through user-supplied step approximations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::psd::{loewner_leq, SymMat};
use crate::rng::CounterRng;
use crate::{MERGE_TOL, PSD_TOL};

/// Evaluation side for paths with jumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// The left-continuous version; value 0 at s = 0 by convention.
    Left,
    /// The path itself (right-continuous).
    Right,
}

/// Right-continuous increasing step path on [0, 1) with values in the PSD cone.
///
/// The path equals `values[k]` on `[breaks[k], breaks[k+1])` and `values[K]`
/// on `[breaks[K], 1)`; `breaks[0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPath {
    dim: usize,
    breaks: Vec<f64>,
    values: Vec<SymMat>,
}

impl StepPath {
    /// Validating constructor. Coincident breakpoints (within the merge
    /// tolerance) and repeated consecutive values are merged.
    pub fn new(dim: usize, breaks: Vec<f64>, values: Vec<SymMat>) -> Result<Self> {
        if breaks.is_empty() || breaks.len() != values.len() {
            return Err(CoreError::Invalid(String::from(
                "breakpoints and values must be non-empty and of equal length",
            )));
        }
        if (breaks[0] - 0.0).abs() > MERGE_TOL {
            return Err(CoreError::Invalid(String::from("first breakpoint must be 0")));
        }
        let mut mb: Vec<f64> = Vec::with_capacity(breaks.len());
        let mut mv: Vec<SymMat> = Vec::with_capacity(values.len());
        for (k, (&s, v)) in breaks.iter().zip(values.iter()).enumerate() {
            if v.dim() != dim {
                return Err(CoreError::DimensionMismatch { expected: dim, got: v.dim() });
            }
            if !(0.0..1.0).contains(&s) && k > 0 {
                return Err(CoreError::Invalid(format!("breakpoint {s} outside [0, 1)")));
            }
            if let Some(&prev) = mb.last() {
                if s <= prev + MERGE_TOL {
                    // Coincident breakpoint: the later value wins (right continuity).
                    *mv.last_mut().unwrap() = v.clone();
                    continue;
                }
            }
            mb.push(if k == 0 { 0.0 } else { s });
            mv.push(v.clone());
        }
        // Merge consecutive equal values.
        let mut cb = vec![mb[0]];
        let mut cv = vec![mv[0].clone()];
        for k in 1..mb.len() {
            if mv[k].sub(cv.last().unwrap()).norm() <= MERGE_TOL * (1.0 + mv[k].norm()) {
                continue;
            }
            cb.push(mb[k]);
            cv.push(mv[k].clone());
        }
        if !cv[0].is_psd(PSD_TOL) {
            return Err(CoreError::NotPsd { min_eigenvalue: cv[0].min_eigenvalue() });
        }
        for k in 1..cv.len() {
            if !loewner_leq(&cv[k - 1], &cv[k], PSD_TOL)? {
                return Err(CoreError::Invalid(format!(
                    "values must be Loewner-increasing (violated between levels {} and {})",
                    k - 1,
                    k
                )));
            }
        }
        Ok(StepPath { dim, breaks: cb, values: cv })
    }

    pub fn constant(value: SymMat) -> Self {
        StepPath { dim: value.dim(), breaks: vec![0.0], values: vec![value] }
    }

    pub fn zero(dim: usize) -> Self {
        StepPath::constant(SymMat::zeros(dim))
    }

    /// D = 1 convenience: scalar levels at the given breakpoints.
    pub fn scalar(breaks: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        let values = levels.into_iter().map(SymMat::scalar).collect();
        StepPath::new(1, breaks, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    pub fn values(&self) -> &[SymMat] {
        &self.values
    }

    /// Number of interior jumps (levels of RSB).
    pub fn num_jumps(&self) -> usize {
        self.breaks.len() - 1
    }

    /// q(1), the limit from the left at 1.
    pub fn value_at_one(&self) -> &SymMat {
        self.values.last().unwrap()
    }

    /// Evaluates the path (or its left-continuous version) at s in [0, 1].
    pub fn eval(&self, s: f64, side: Side) -> Result<SymMat> {
        if !(0.0..=1.0).contains(&s) {
            return Err(CoreError::OutOfDomain { value: s, lo: 0.0, hi: 1.0 });
        }
        match side {
            Side::Right => {
                if s >= 1.0 {
                    return Ok(self.value_at_one().clone());
                }
                let k = self.breaks.partition_point(|&b| b <= s) - 1;
                Ok(self.values[k].clone())
            }
            Side::Left => {
                if s == 0.0 {
                    return Ok(SymMat::zeros(self.dim));
                }
                let k = self.breaks.partition_point(|&b| b < s) - 1;
                Ok(self.values[k].clone())
            }
        }
    }

    /// True when the path is identically zero (total trace below tolerance).
    pub fn is_zero(&self) -> bool {
        self.value_at_one().trace() <= MERGE_TOL
    }

    /// Values of the path transplanted onto a refined breakpoint grid.
    pub fn values_on_grid(&self, grid: &[f64]) -> Vec<SymMat> {
        grid.iter()
            .map(|&s| {
                let k = self.breaks.partition_point(|&b| b <= s + MERGE_TOL) - 1;
                self.values[k].clone()
            })
            .collect()
    }

    /// Applies `f` to every level value, keeping the breakpoints.
    pub fn map_values(&self, f: impl Fn(&SymMat) -> SymMat) -> StepPath {
        StepPath {
            dim: self.dim,
            breaks: self.breaks.clone(),
            values: self.values.iter().map(f).collect(),
        }
    }
}

/// Merged ascending union of two breakpoint lists.
pub fn merge_breakpoints(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => {
                if x <= y {
                    i += 1;
                    if (y - x).abs() <= MERGE_TOL {
                        j += 1;
                    }
                    x
                } else {
                    j += 1;
                    y
                }
            }
            (Some(&x), None) => {
                i += 1;
                x
            }
            (None, Some(&y)) => {
                j += 1;
                y
            }
            (None, None) => break,
        };
        if out.last().map_or(true, |&p| next > p + MERGE_TOL) {
            out.push(next);
        }
    }
    out
}

/// Distance norms for paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathNorm {
    L1,
    L2,
    Sup,
}

/// Exact distance between two step paths over the merged breakpoint partition.
pub fn path_distance(q: &StepPath, q2: &StepPath, norm: PathNorm) -> Result<f64> {
    if q.dim() != q2.dim() {
        return Err(CoreError::DimensionMismatch { expected: q.dim(), got: q2.dim() });
    }
    let grid = merge_breakpoints(q.breakpoints(), q2.breakpoints());
    let va = q.values_on_grid(&grid);
    let vb = q2.values_on_grid(&grid);
    let mut acc: f64 = 0.0;
    for (j, (a, b)) in va.iter().zip(vb.iter()).enumerate() {
        let width = if j + 1 < grid.len() { grid[j + 1] - grid[j] } else { 1.0 - grid[j] };
        let d = a.sub(b).norm();
        match norm {
            PathNorm::L1 => acc += d * width,
            PathNorm::L2 => acc += d * d * width,
            PathNorm::Sup => acc = acc.max(d),
        }
    }
    Ok(match norm {
        PathNorm::L2 => crate::num::sqrt(acc),
        _ => acc,
    })
}

/// Step probability distribution function on [0, T].
///
/// `alpha(t) = levels[j]` for the largest `j` with `times[j] <= t`;
/// `times[0] = 0` and the last level is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPdf {
    domain_end: f64,
    times: Vec<f64>,
    levels: Vec<f64>,
}

impl StepPdf {
    pub fn new(domain_end: f64, times: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != levels.len() {
            return Err(CoreError::Invalid(String::from(
                "pdf needs matching non-empty times and levels",
            )));
        }
        if times[0].abs() > MERGE_TOL {
            return Err(CoreError::Invalid(String::from("pdf times must start at 0")));
        }
        if domain_end <= 0.0 {
            return Err(CoreError::Invalid(String::from("pdf domain end must be positive")));
        }
        let mut mt: Vec<f64> = Vec::new();
        let mut ml: Vec<f64> = Vec::new();
        for (k, (&t, &l)) in times.iter().zip(levels.iter()).enumerate() {
            if !(0.0..=1.0 + 1e-15).contains(&l) {
                return Err(CoreError::Invalid(format!("level {l} outside [0, 1]")));
            }
            if t > domain_end + MERGE_TOL {
                return Err(CoreError::Invalid(format!("time {t} beyond domain end {domain_end}")));
            }
            if let Some(&prev_t) = mt.last() {
                if t <= prev_t + MERGE_TOL {
                    *ml.last_mut().unwrap() = l;
                    continue;
                }
                if l < *ml.last().unwrap() - 1e-15 {
                    return Err(CoreError::Invalid(String::from("levels must be increasing")));
                }
                if l <= *ml.last().unwrap() {
                    continue; // flat step carries no information
                }
            }
            mt.push(if k == 0 { 0.0 } else { t });
            ml.push(l.min(1.0));
        }
        if (ml.last().unwrap() - 1.0).abs() > 1e-12 {
            return Err(CoreError::Invalid(String::from("pdf must reach level 1")));
        }
        *ml.last_mut().unwrap() = 1.0;
        Ok(StepPdf { domain_end, times: mt, levels: ml })
    }

    pub fn domain_end(&self) -> f64 {
        self.domain_end
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// alpha(t) for t in [0, T].
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(-MERGE_TOL..=self.domain_end + MERGE_TOL).contains(&t) {
            return Err(CoreError::OutOfDomain { value: t, lo: 0.0, hi: self.domain_end });
        }
        let j = self.times.partition_point(|&tj| tj <= t + MERGE_TOL) - 1;
        Ok(self.levels[j])
    }

    /// Quantile function alpha^{-1}(s) = inf { t : s <= alpha(t) }.
    pub fn quantile(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        // Smallest j with levels[j] >= s.
        let j = self.levels.partition_point(|&l| l < s);
        self.times[j.min(self.times.len() - 1)]
    }

    /// Right limit alpha^{-1}(s+); equals alpha^{-1}(1) at s = 1.
    pub fn quantile_right(&self, s: f64) -> f64 {
        if s >= 1.0 {
            return self.quantile(1.0);
        }
        let j = self.levels.partition_point(|&l| l <= s);
        self.times[j.min(self.times.len() - 1)]
    }

    /// Support of the measure d(alpha): the jump locations, as a finite set.
    pub fn support(&self) -> Vec<f64> {
        self.atoms().into_iter().map(|(t, _)| t).collect()
    }

    /// Atoms (location, mass) of d(alpha); masses sum to 1.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut prev = 0.0;
        for (&t, &l) in self.times.iter().zip(self.levels.iter()) {
            if l > prev {
                out.push((t, l - prev));
            }
            prev = l;
        }
        out
    }

    /// Exact L1 distance between two step p.d.f.s sharing [0, T].
    pub fn l1_distance(&self, other: &StepPdf) -> f64 {
        let t_max = self.domain_end.max(other.domain_end);
        let grid = merge_breakpoints(&self.times, &other.times);
        let mut acc = 0.0;
        for (j, &t) in grid.iter().enumerate() {
            let end = if j + 1 < grid.len() { grid[j + 1] } else { t_max };
            if end <= t {
                continue;
            }
            let a = self.levels[self.times.partition_point(|&x| x <= t + MERGE_TOL) - 1];
            let b = other.levels[other.times.partition_point(|&x| x <= t + MERGE_TOL) - 1];
            acc += (a - b).abs() * (end - t);
        }
        acc
    }
}

/// Increasing left-continuous step quantile function on [0, 1]:
/// `vals[k]` on `(cuts[k], cuts[k+1]]`, with value 0 at s = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFn {
    cuts: Vec<f64>,
    vals: Vec<f64>,
}

impl QuantileFn {
    pub fn new(cuts: Vec<f64>, vals: Vec<f64>) -> Result<Self> {
        if cuts.len() != vals.len() + 1 || vals.is_empty() {
            return Err(CoreError::Invalid(String::from("need cuts.len() == vals.len() + 1")));
        }
        if cuts[0].abs() > MERGE_TOL || (cuts[cuts.len() - 1] - 1.0).abs() > MERGE_TOL {
            return Err(CoreError::Invalid(String::from("cuts must span [0, 1]")));
        }
        for w in cuts.windows(2) {
            if w[1] <= w[0] {
                return Err(CoreError::Invalid(String::from("cuts must be strictly increasing")));
            }
        }
        for w in vals.windows(2) {
            if w[1] < w[0] - 1e-15 {
                return Err(CoreError::Invalid(String::from("quantile values must be increasing")));
            }
        }
        if vals[0] < -MERGE_TOL {
            return Err(CoreError::Invalid(String::from("quantile values must be nonnegative")));
        }
        Ok(QuantileFn { cuts, vals })
    }

    pub fn eval(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let k = self.cuts.partition_point(|&c| c < s) - 1;
        self.vals[k.min(self.vals.len() - 1)]
    }

    pub fn domain_cuts(&self) -> &[f64] {
        &self.cuts
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }
}

/// Rebuilds the p.d.f. from a step quantile function via
/// `alpha(t) = sup { s : t >= alpha^{-1}(s) }`.
pub fn pdf_from_quantile(qf: &QuantileFn) -> Result<StepPdf> {
    let t_end = *qf.vals.last().unwrap();
    if t_end <= MERGE_TOL {
        return Err(CoreError::Invalid(String::from(
            "quantile function is identically zero; the p.d.f. degenerates",
        )));
    }
    let mut times = Vec::new();
    let mut levels = Vec::new();
    if qf.vals[0] > MERGE_TOL {
        times.push(0.0);
        levels.push(0.0);
    }
    for (k, &v) in qf.vals.iter().enumerate() {
        times.push(v);
        levels.push(qf.cuts[k + 1]);
    }
    StepPdf::new(t_end, times, levels)
}

/// Increasing piecewise-linear matrix path on [0, T] (the Lipschitz factor of
/// a decomposition).
#[derive(Debug, Clone, PartialEq)]
pub struct PwLinear {
    times: Vec<f64>,
    knots: Vec<SymMat>,
}

impl PwLinear {
    pub fn new(times: Vec<f64>, knots: Vec<SymMat>) -> Result<Self> {
        if times.len() != knots.len() || times.len() < 2 {
            return Err(CoreError::Invalid(String::from("need at least two knots")));
        }
        if times[0].abs() > MERGE_TOL {
            return Err(CoreError::Invalid(String::from("path must start at t = 0")));
        }
        for w in times.windows(2) {
            if w[1] <= w[0] + MERGE_TOL {
                return Err(CoreError::Invalid(String::from("knot times must be increasing")));
            }
        }
        let dim = knots[0].dim();
        for k in 1..knots.len() {
            if knots[k].dim() != dim {
                return Err(CoreError::DimensionMismatch { expected: dim, got: knots[k].dim() });
            }
            if !loewner_leq(&knots[k - 1], &knots[k], PSD_TOL)? {
                return Err(CoreError::Invalid(String::from("knot values must be increasing")));
            }
        }
        Ok(PwLinear { times, knots })
    }

    /// Constant path, for degenerate uses.
    pub fn flat(domain_end: f64, value: SymMat) -> Self {
        PwLinear { times: vec![0.0, domain_end], knots: vec![value.clone(), value] }
    }

    pub fn dim(&self) -> usize {
        self.knots[0].dim()
    }

    pub fn domain_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn knots(&self) -> &[SymMat] {
        &self.knots
    }

    /// L(t); constant extension beyond the domain end.
    pub fn eval(&self, t: f64) -> SymMat {
        if t <= 0.0 {
            return self.knots[0].clone();
        }
        if t >= self.domain_end() {
            return self.knots.last().unwrap().clone();
        }
        let j = self.times.partition_point(|&x| x <= t) - 1;
        let w = (t - self.times[j]) / (self.times[j + 1] - self.times[j]);
        self.knots[j].lerp(&self.knots[j + 1], w)
    }

    /// Constant slope on piece j (between times[j] and times[j+1]).
    pub fn slope(&self, j: usize) -> SymMat {
        let dt = self.times[j + 1] - self.times[j];
        self.knots[j + 1].sub(&self.knots[j]).scale(1.0 / dt)
    }

    pub fn lipschitz_constant(&self) -> f64 {
        (0..self.times.len() - 1).map(|j| self.slope(j).norm()).fold(0.0, f64::max)
    }

    pub fn sup_distance(&self, other: &PwLinear) -> f64 {
        let grid = merge_breakpoints(&self.times, &other.times);
        grid.iter().map(|&t| self.eval(t).sub(&other.eval(t)).norm()).fold(0.0, f64::max)
    }

    /// Shifts every knot by `delta` times another increasing path's value.
    pub fn add_scaled(&self, other: &PwLinear, delta: f64) -> Result<PwLinear> {
        let grid = merge_breakpoints(&self.times, &other.times);
        let knots = grid
            .iter()
            .map(|&t| self.eval(t).add(&other.eval(t).scale(delta)))
            .collect::<Vec<_>>();
        PwLinear::new(grid, knots)
    }
}

/// A pair (L, alpha) with the left-continuous path equal to L o alpha^{-1}.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub l: PwLinear,
    pub alpha: StepPdf,
    pub pinned: bool,
}

impl Decomposition {
    pub fn domain_end(&self) -> f64 {
        self.alpha.domain_end()
    }
}

/// The canonical (pinned, unit-speed) decomposition of a step path.
///
/// Returns `None` for the identically-zero path, whose decomposition
/// degenerates to an empty domain; callers short-circuit that case.
pub fn canonical_decomposition(q: &StepPath) -> Result<Option<Decomposition>> {
    match joint_canonical_decomposition(core::slice::from_ref(q))? {
        None => Ok(None),
        Some((mut ls, alpha)) => {
            Ok(Some(Decomposition { l: ls.remove(0), alpha, pinned: true }))
        }
    }
}

/// The canonical joint decomposition of several step paths on [0, 1):
/// a common p.d.f. alpha with quantile sum of traces, and one Lipschitz path
/// per input. Returns `None` when every path is identically zero.
pub fn joint_canonical_decomposition(
    paths: &[StepPath],
) -> Result<Option<(Vec<PwLinear>, StepPdf)>> {
    if paths.is_empty() {
        return Err(CoreError::Invalid(String::from("need at least one path")));
    }
    let mut grid = paths[0].breakpoints().to_vec();
    for p in &paths[1..] {
        grid = merge_breakpoints(&grid, p.breakpoints());
    }
    let values: Vec<Vec<SymMat>> = paths.iter().map(|p| p.values_on_grid(&grid)).collect();
    // alpha^{-1}(s) = sum_k tr(left-continuous path k) on each interval.
    let traces: Vec<f64> = (0..grid.len())
        .map(|j| values.iter().map(|v| v[j].trace()).sum())
        .collect();
    let t_end = *traces.last().unwrap();
    if t_end <= MERGE_TOL {
        return Ok(None);
    }
    let mut cuts = grid.clone();
    cuts.push(1.0);
    let qf = QuantileFn::new(cuts, traces.clone())?;
    let alpha = pdf_from_quantile(&qf)?;
    // L_k interpolates (0, 0) and (trace time, value) at every jump; repeated
    // trace times cannot occur because merged values strictly increase.
    let mut ls = Vec::with_capacity(paths.len());
    for (k, p) in paths.iter().enumerate() {
        let mut times = Vec::with_capacity(grid.len() + 1);
        let mut knots = Vec::with_capacity(grid.len() + 1);
        if traces[0] > MERGE_TOL {
            times.push(0.0);
            knots.push(SymMat::zeros(p.dim()));
        }
        for j in 0..grid.len() {
            times.push(traces[j]);
            knots.push(values[k][j].clone());
        }
        if times.len() < 2 {
            // Single knot can only happen for constant-zero traces, handled above.
            return Err(CoreError::Invalid(String::from("degenerate decomposition")));
        }
        ls.push(PwLinear::new(times, knots)?);
    }
    Ok(Some((ls, alpha)))
}

/// Random Loewner-increasing step path for randomized checks and oracles.
pub fn random_step_path(dim: usize, max_jumps: usize, rng: &mut CounterRng) -> StepPath {
    let k = (rng.next_u64() as usize) % (max_jumps + 1);
    let mut breaks = vec![0.0];
    for _ in 0..k {
        breaks.push(0.05 + 0.9 * rng.uniform());
    }
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut values = Vec::with_capacity(k + 1);
    let mut acc = if rng.uniform() < 0.3 {
        SymMat::zeros(dim)
    } else {
        random_psd_increment(dim, rng).scale(0.3)
    };
    values.push(acc.clone());
    for _ in 0..k {
        acc = acc.add(&random_psd_increment(dim, rng).scale(0.4));
        values.push(acc.clone());
    }
    StepPath::new(dim, breaks, values).expect("random path construction is valid")
}

fn random_psd_increment(dim: usize, rng: &mut CounterRng) -> SymMat {
    let mut g = vec![0.0; dim * dim];
    rng.fill_standard_normal(&mut g);
    let mut m = SymMat::zeros(dim);
    for i in 0..dim {
        for j in i..dim {
            let mut s = 0.0;
            for l in 0..dim {
                s += g[i * dim + l] * g[j * dim + l];
            }
            m.set(i, j, s / dim as f64);
        }
    }
    m
}
