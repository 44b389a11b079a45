//! Monte Carlo oracle built on finite-width Ruelle probability cascades.
//!
//! A step path q with interior breakpoints s_1 < ... < s_K in (0, 1) defines
//! a K-level cascade: each node at depth l-1 carries the largest atoms of a
//! Poisson process with intensity zeta x^{-zeta-1}, zeta = s_l, realized as
//! Gamma_i^{-1/zeta} for unit-rate Poisson arrivals Gamma_i. Leaf weights are
//! products down the tree, normalized globally. Each edge at depth l carries
//! an independent Gaussian increment with covariance q increment
//! v_l - v_{l-1}, so two leaves with deepest common ancestor at depth d have
//! field covariance v_d: the discrete realization of a field whose covariance
//! is the path evaluated at the overlap of the leaves.
//!
//! Everything here is an estimator with a reported standard error, entirely
//! independent of the PDE construction; the two are cross-checked in tests.
//! At finite truncation, averaging Gaussian randomness before or after the
//! cascade randomness coincides, so a replication samples both at once.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::num;
use crate::par;
use crate::paths::StepPath;
use crate::psd::{sqrt_psd, SymMat};
use crate::rng::CounterRng;
use crate::spin::SpinMeasure;

/// Budget for cascade estimates.
#[derive(Debug, Clone)]
pub struct CascadeBudget {
    /// Independent tree replications.
    pub reps: usize,
    /// Per-node atom truncation (the M largest Poisson atoms are kept).
    pub truncation: usize,
    /// Cap on the total number of leaves per tree; deeper levels keep their
    /// width first because their heavier-tailed weights truncate worse.
    pub leaf_budget: usize,
    /// Antithetic Gaussian field pairs drawn per weight tree. The shared
    /// root increment is always integrated out by quadrature, so this only
    /// averages the residual edge-field noise; 0 is treated as 1 pair.
    pub field_pairs: usize,
    pub seed: u64,
}

impl CascadeBudget {
    pub fn new(reps: usize, truncation: usize, seed: u64) -> Self {
        CascadeBudget { reps, truncation, leaf_budget: 1_000_000, field_pairs: 4, seed }
    }
}

/// A scalar Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsEstimate {
    pub mean: f64,
    pub se: f64,
    pub reps: usize,
    /// Leaf-atom evaluations per replication.
    pub samples: usize,
    pub seed: u64,
}

impl GibbsEstimate {
    /// |self - other| <= 3 (se + se') style comparisons.
    pub fn consistent_with(&self, value: f64, n_sigma: f64) -> bool {
        (self.mean - value).abs() <= n_sigma * self.se
    }
}

/// Vector-valued estimate (entry-wise means and standard errors).
#[derive(Debug, Clone)]
pub struct VectorEstimate {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
}

/// One realized cascade: normalized leaf weights and the leaf fields.
#[derive(Debug, Clone)]
pub struct CascadeSample {
    pub dim: usize,
    pub zetas: Vec<f64>,
    pub widths: Vec<usize>,
    /// Normalized leaf weights (sum to 1).
    pub weights: Vec<f64>,
    /// Leaf-major, coordinate-minor field values w(leaf).
    pub fields: Vec<f64>,
}

struct CascadeShape {
    zetas: Vec<f64>,
    widths: Vec<usize>,
    /// Square roots of the path increments, root first (depth 0 .. K).
    increment_roots: Vec<SymMat>,
    /// Quadrature realizing the shared root increment ~ N(0, q(0)).
    root_quad: Vec<(Vec<f64>, f64)>,
    dim: usize,
}

fn plan_shape(q: &StepPath, truncation: usize, leaf_budget: usize) -> Result<CascadeShape> {
    if truncation < 8 {
        return Err(CoreError::Invalid(String::from("truncation must be at least 8")));
    }
    let zetas: Vec<f64> = q.breakpoints()[1..].to_vec();
    for &z in &zetas {
        if !(1e-9..1.0 - 1e-12).contains(&z) {
            return Err(CoreError::Invalid(format!("cascade level {z} outside (0, 1)")));
        }
    }
    let dim = q.dim();
    let values = q.values();
    let mut increment_roots = Vec::with_capacity(values.len());
    increment_roots.push(sqrt_psd(&values[0])?);
    for k in 1..values.len() {
        increment_roots.push(sqrt_psd(&crate::psd::project_psd(&values[k].sub(&values[k - 1])))?);
    }
    let root_quad = root_quadrature(&values[0], 24);
    let widths = allocate_widths(&zetas, truncation, leaf_budget);
    Ok(CascadeShape { zetas, widths, increment_roots, root_quad, dim })
}

/// Tensor Gauss-Hermite points (eta, weight) with eta ~ N(0, cov); the
/// degenerate directions are skipped, and a zero covariance yields the single
/// point eta = 0. The root increment is shared by every leaf, so averaging
/// it by quadrature instead of sampling removes the dominant variance source
/// at O(atoms x nodes) cost.
fn root_quadrature(cov: &SymMat, nodes: usize) -> Vec<(Vec<f64>, f64)> {
    let d = cov.dim();
    let (vals, vecs) = cov.eigh();
    let scale = vals[0].max(0.0);
    let active: Vec<usize> = (0..d).filter(|&c| vals[c] > 1e-14 * (1.0 + scale)).collect();
    if active.is_empty() {
        return vec![(vec![0.0; d], 1.0)];
    }
    let gh = crate::quad::GaussHermite::new(nodes);
    let pts = gh.normal_points();
    let mut plan = Vec::with_capacity(pts.len().pow(active.len() as u32));
    let mut counters = vec![0usize; active.len()];
    loop {
        let mut eta = vec![0.0; d];
        let mut weight = 1.0;
        for (ai, &c) in active.iter().enumerate() {
            let (z, w) = pts[counters[ai]];
            weight *= w;
            let amp = num::sqrt(vals[c]) * z;
            for r in 0..d {
                eta[r] += amp * vecs[r * d + c];
            }
        }
        plan.push((eta, weight));
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

/// Chooses per-level widths w_l <= M with product <= budget, equalizing the
/// truncated Poisson-Dirichlet tail mass w^(1 - 1/zeta) across levels.
fn allocate_widths(zetas: &[f64], truncation: usize, leaf_budget: usize) -> Vec<usize> {
    let k = zetas.len();
    if k == 0 {
        return Vec::new();
    }
    let cap = truncation as f64;
    let ratios: Vec<f64> = zetas.iter().map(|&z| z / (1.0 - z)).collect();
    let widths_for = |c: f64| -> Vec<usize> {
        ratios.iter().map(|&r| num::exp(c * r).min(cap).max(8.0) as usize).collect()
    };
    let product = |w: &[usize]| w.iter().map(|&x| x as f64).product::<f64>();
    // Largest c whose widths fit within the leaf budget.
    let mut lo = 0.0f64;
    let mut hi = 64.0f64;
    if product(&widths_for(hi)) <= leaf_budget as f64 {
        return widths_for(hi);
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if product(&widths_for(mid)) <= leaf_budget as f64 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    widths_for(lo)
}

/// Cumulative log-weights of one realized weight tree (leaves only).
struct WeightTree {
    leaf_logw: Vec<f64>,
    /// log sum over leaves of exp(logw), for normalization.
    log_total: f64,
}

fn grow_weights(shape: &CascadeShape, rng: &mut CounterRng) -> WeightTree {
    let mut logw = vec![0.0f64];
    for (l, &w) in shape.widths.iter().enumerate() {
        let parent_count = logw.len();
        let zeta_inv = 1.0 / shape.zetas[l];
        let mut new_logw = vec![0.0; parent_count * w];
        for p in 0..parent_count {
            let base_lw = logw[p];
            let mut gamma = 0.0f64;
            for (c, slot) in new_logw[p * w..(p + 1) * w].iter_mut().enumerate() {
                let _ = c;
                gamma += rng.exponential();
                *slot = base_lw - zeta_inv * num::ln(gamma);
            }
        }
        logw = new_logw;
    }
    let max_lw = logw.iter().cloned().fold(0.0f64, f64::max);
    let total: f64 = logw.iter().map(|&lw| num::exp(lw - max_lw)).sum();
    WeightTree { leaf_logw: logw, log_total: max_lw + num::ln(total) }
}

/// Draws the cumulative edge fields (root excluded) into `field`,
/// leaf-major and coordinate-minor.
fn draw_edge_fields(shape: &CascadeShape, rng: &mut CounterRng, field: &mut Vec<f64>) {
    let d = shape.dim;
    let mut gauss = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    let mut current = vec![0.0f64; d]; // root node, field 0
    for (l, &w) in shape.widths.iter().enumerate() {
        let parent_count = current.len() / d;
        let inc_root = &shape.increment_roots[l + 1];
        let mut next = vec![0.0; parent_count * w * d];
        for p in 0..parent_count {
            let parent_field = &current[p * d..(p + 1) * d];
            for c in 0..w {
                rng.fill_standard_normal(&mut gauss);
                apply_cov_root(inc_root, &gauss, &mut scratch);
                let idx = p * w + c;
                for (o, (pf, sc)) in next[idx * d..(idx + 1) * d]
                    .iter_mut()
                    .zip(parent_field.iter().zip(scratch.iter()))
                {
                    *o = pf + sc;
                }
            }
        }
        current = next;
    }
    *field = current;
}

fn apply_cov_root(root: &SymMat, gauss: &[f64], out: &mut [f64]) {
    let d = gauss.len();
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += root.get(i, j) * gauss[j];
        }
        out[i] = s;
    }
}

/// Draws one cascade realization for a step path: normalized weights plus the
/// Gaussian field attached to each leaf (root increment included).
pub fn sample_cascade(
    q: &StepPath,
    truncation: usize,
    leaf_budget: usize,
    seed: u64,
) -> Result<CascadeSample> {
    let shape = plan_shape(q, truncation, leaf_budget)?;
    let mut rng = CounterRng::new(seed, 0);
    let tree = grow_weights(&shape, &mut rng);
    let mut weights: Vec<f64> =
        tree.leaf_logw.iter().map(|&lw| num::exp(lw - tree.log_total)).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    let d = shape.dim;
    let mut fields = Vec::new();
    draw_edge_fields(&shape, &mut rng, &mut fields);
    let mut gauss = vec![0.0; d];
    let mut eta = vec![0.0; d];
    rng.fill_standard_normal(&mut gauss);
    apply_cov_root(&shape.increment_roots[0], &gauss, &mut eta);
    for leaf in 0..weights.len() {
        for (f, e) in fields[leaf * d..(leaf + 1) * d].iter_mut().zip(eta.iter()) {
            *f += e;
        }
    }
    Ok(CascadeSample {
        dim: shape.dim,
        zetas: shape.zetas,
        widths: shape.widths,
        weights,
        fields,
    })
}

/// Exponent of the Gibbs weight for (leaf, atom):
/// sqrt(2) sigma . w + sigma . x + sigma sigma^T . (z - q(1)), plus log of
/// the atom weight of mu; the cascade log-weight is added by callers.
struct AtomTable {
    /// Per atom: log mu-weight + sigma sigma^T . (z - q(1)) + sigma . x.
    offset: Vec<f64>,
    /// Per atom: sqrt(2) sigma, atom-major coordinate-minor.
    coef: Vec<f64>,
    n_atoms: usize,
    dim: usize,
}

fn atom_table(mu: &SpinMeasure, q: &StepPath, x: &[f64], z: &SymMat) -> AtomTable {
    let d = mu.dim();
    let q1 = q.value_at_one();
    let tilt = z.sub(q1);
    let sqrt2 = num::sqrt(2.0);
    let mut offset = Vec::with_capacity(mu.atoms().len());
    let mut coef = Vec::with_capacity(mu.atoms().len() * d);
    for (atom, &w) in mu.atoms().iter().zip(mu.weights().iter()) {
        let lin: f64 = atom.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        offset.push(num::ln(w) + lin + SymMat::outer(atom).dot(&tilt));
        for &a in atom {
            coef.push(sqrt2 * a);
        }
    }
    AtomTable { offset, coef, n_atoms: mu.atoms().len(), dim: d }
}

fn check_compatible(mu: &SpinMeasure, q: &StepPath, x: &[f64], z: &SymMat) -> Result<()> {
    let d = mu.dim();
    if q.dim() != d {
        return Err(CoreError::DimensionMismatch { expected: d, got: q.dim() });
    }
    if x.len() != d {
        return Err(CoreError::DimensionMismatch { expected: d, got: x.len() });
    }
    if z.dim() != d {
        return Err(CoreError::DimensionMismatch { expected: d, got: z.dim() });
    }
    Ok(())
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, num::sqrt(var / n))
}

/// Monte Carlo estimate of the interpolating free energy
/// f_mu(q, x, z) = E log iint exp(sqrt(2) sigma . w(h) + sigma . x
///                + sigma sigma^T . (z - q(1))) d mu d R(h).
///
/// Per replication one weight tree is drawn; the shared root increment is
/// integrated exactly by quadrature (its exponent factors per atom), and the
/// remaining edge fields are averaged over antithetic pairs.
pub fn mc_f_mu(
    mu: &SpinMeasure,
    q: &StepPath,
    x: &[f64],
    z: &SymMat,
    budget: &CascadeBudget,
) -> Result<GibbsEstimate> {
    check_compatible(mu, q, x, z)?;
    let shape = plan_shape(q, budget.truncation, budget.leaf_budget)?;
    let table = atom_table(mu, q, x, z);
    let d = shape.dim;
    let na = table.n_atoms;
    let pairs = budget.field_pairs.max(1);
    let per_rep = par::map_indexed(budget.reps, |rep| {
        let mut rng = CounterRng::new(budget.seed, rep as u64);
        let tree = grow_weights(&shape, &mut rng);
        let mut field = Vec::new();
        let mut acc = 0.0;
        for _ in 0..pairs {
            draw_edge_fields(&shape, &mut rng, &mut field);
            for sign in [1.0f64, -1.0] {
                // Per-atom log partition over leaves, root excluded.
                let mut log_s = vec![f64::NEG_INFINITY; na];
                let mut acc_s = vec![0.0f64; na];
                for (leaf, &lw) in tree.leaf_logw.iter().enumerate() {
                    let f = &field[leaf * d..(leaf + 1) * d];
                    for a in 0..na {
                        let dot: f64 = table.coef[a * d..(a + 1) * d]
                            .iter()
                            .zip(f.iter())
                            .map(|(c, w)| sign * c * w)
                            .sum();
                        let e = lw + dot;
                        if e > log_s[a] {
                            acc_s[a] = acc_s[a] * num::exp(log_s[a] - e) + 1.0;
                            log_s[a] = e;
                        } else {
                            acc_s[a] += num::exp(e - log_s[a]);
                        }
                    }
                }
                for a in 0..na {
                    log_s[a] += num::ln(acc_s[a]) + table.offset[a];
                }
                // Quadrature over the root increment.
                let mut value = 0.0;
                for (eta, w_eta) in &shape.root_quad {
                    let mut m = f64::NEG_INFINITY;
                    let mut zsum = 0.0;
                    for a in 0..na {
                        let dot: f64 = table.coef[a * d..(a + 1) * d]
                            .iter()
                            .zip(eta.iter())
                            .map(|(c, e)| c * e)
                            .sum();
                        let g = log_s[a] + dot;
                        if g > m {
                            zsum = zsum * num::exp(m - g) + 1.0;
                            m = g;
                        } else {
                            zsum += num::exp(g - m);
                        }
                    }
                    value += w_eta * (m + num::ln(zsum));
                }
                acc += value - tree.log_total;
            }
        }
        acc / (2.0 * pairs as f64)
    });
    let (mean, se) = mean_and_se(&per_rep);
    let leaves: usize = shape.widths.iter().product();
    Ok(GibbsEstimate {
        mean,
        se,
        reps: budget.reps,
        samples: leaves * table.n_atoms,
        seed: budget.seed,
    })
}

/// psi(q) = -f_mu(q, 0, 0): the z = 0 tilt is exactly -q(1) . sigma sigma^T.
pub fn mc_psi(mu: &SpinMeasure, q: &StepPath, budget: &CascadeBudget) -> Result<GibbsEstimate> {
    let x = vec![0.0; mu.dim()];
    let z = SymMat::zeros(mu.dim());
    let est = mc_f_mu(mu, q, &x, &z, budget)?;
    Ok(GibbsEstimate { mean: -est.mean, ..est })
}

/// Self-normalized estimate of E < F(sigma, sigma', class) > under the
/// cascade Gibbs measure, where `class` in 0..=K is the depth of the deepest
/// common ancestor of the two replicas' leaves (class d means the overlap
/// h ^ h' falls in [s_d, s_{d+1}), with s_0 = 0 and s_{K+1} = 1; class K
/// includes the same-leaf case).
///
/// `f` fills `out` with its (vector-valued) observable for one replica pair.
pub fn mc_gibbs_vector(
    mu: &SpinMeasure,
    q: &StepPath,
    x: &[f64],
    z: &SymMat,
    budget: &CascadeBudget,
    n_out: usize,
    f: impl Fn(&[f64], &[f64], usize, &mut [f64]) + Send + Sync,
) -> Result<VectorEstimate> {
    check_compatible(mu, q, x, z)?;
    let shape = plan_shape(q, budget.truncation, budget.leaf_budget)?;
    let table = atom_table(mu, q, x, z);
    let d = shape.dim;
    let na = table.n_atoms;
    let levels = shape.widths.len();
    // F values per atom pair and class, precomputed once.
    let mut f_table = vec![0.0; na * na * (levels + 1) * n_out];
    for a1 in 0..na {
        for a2 in 0..na {
            for class in 0..=levels {
                let off = ((a1 * na + a2) * (levels + 1) + class) * n_out;
                f(
                    &mu.atoms()[a1],
                    &mu.atoms()[a2],
                    class,
                    &mut f_table[off..off + n_out],
                );
            }
        }
    }
    let pairs = budget.field_pairs.max(1);
    let per_rep = par::map_indexed(budget.reps, |rep| {
        let mut rng = CounterRng::new(budget.seed, rep as u64);
        let tree = grow_weights(&shape, &mut rng);
        let n_leaves = tree.leaf_logw.len();
        let mut field = Vec::new();
        let mut rep_out = vec![0.0; n_out];
        for _ in 0..pairs {
            draw_edge_fields(&shape, &mut rng, &mut field);
            for sign in [1.0f64, -1.0] {
                // Per-leaf, per-atom masses relative to the max exponent
                // (root increment excluded; it is folded in per eta node).
                let mut max_e = f64::NEG_INFINITY;
                for (leaf, &lw) in tree.leaf_logw.iter().enumerate() {
                    let fld = &field[leaf * d..(leaf + 1) * d];
                    for a in 0..na {
                        let dot: f64 = table.coef[a * d..(a + 1) * d]
                            .iter()
                            .zip(fld.iter())
                            .map(|(c, w)| sign * c * w)
                            .sum();
                        max_e = max_e.max(lw + table.offset[a] + dot);
                    }
                }
                let mut masses = vec![0.0; n_leaves * na];
                for (leaf, &lw) in tree.leaf_logw.iter().enumerate() {
                    let fld = &field[leaf * d..(leaf + 1) * d];
                    for a in 0..na {
                        let dot: f64 = table.coef[a * d..(a + 1) * d]
                            .iter()
                            .zip(fld.iter())
                            .map(|(c, w)| sign * c * w)
                            .sum();
                        masses[leaf * na + a] = num::exp(lw + table.offset[a] + dot - max_e);
                    }
                }
                // Pair-mass matrices per depth: A_depth[a1][a2] = sum over
                // nodes at that depth of (subtree atom mass) outer itself.
                // Folding masses up one level at a time yields every depth.
                let mut a_mats: Vec<Vec<f64>> = vec![vec![0.0; na * na]; levels + 1];
                let mut current = masses;
                for depth in (0..=levels).rev() {
                    let am = &mut a_mats[depth];
                    let count = current.len() / na;
                    for node in 0..count {
                        let g = &current[node * na..(node + 1) * na];
                        for a1 in 0..na {
                            for a2 in 0..na {
                                am[a1 * na + a2] += g[a1] * g[a2];
                            }
                        }
                    }
                    if depth > 0 {
                        let w = shape.widths[depth - 1];
                        let parents = count / w;
                        let mut folded = vec![0.0; parents * na];
                        for parent in 0..parents {
                            for c in 0..w {
                                let child = parent * w + c;
                                for a in 0..na {
                                    folded[parent * na + a] += current[child * na + a];
                                }
                            }
                        }
                        current = folded;
                    }
                }
                // `current` is now the root per-atom mass vector. Average the
                // self-normalized ratio over the root-increment quadrature;
                // the root exponent multiplies atom a's masses by e^{c_a}.
                for (eta, w_eta) in &shape.root_quad {
                    let mut boost = vec![0.0; na];
                    for a in 0..na {
                        let dot: f64 = table.coef[a * d..(a + 1) * d]
                            .iter()
                            .zip(eta.iter())
                            .map(|(c, e)| c * e)
                            .sum();
                        boost[a] = num::exp(dot);
                    }
                    let z: f64 = (0..na).map(|a| current[a] * boost[a]).sum();
                    let z2 = z * z;
                    for class in 0..=levels {
                        for a1 in 0..na {
                            for a2 in 0..na {
                                let exact = a_mats[class][a1 * na + a2]
                                    - if class < levels {
                                        a_mats[class + 1][a1 * na + a2]
                                    } else {
                                        0.0
                                    };
                                let f_off = ((a1 * na + a2) * (levels + 1) + class) * n_out;
                                let scale = w_eta * exact * boost[a1] * boost[a2] / z2;
                                for (o, fv) in rep_out
                                    .iter_mut()
                                    .zip(f_table[f_off..f_off + n_out].iter())
                                {
                                    *o += scale * fv;
                                }
                            }
                        }
                    }
                }
            }
        }
        for o in rep_out.iter_mut() {
            *o /= (2 * pairs) as f64;
        }
        rep_out
    });
    let mut mean = vec![0.0; n_out];
    let mut se = vec![0.0; n_out];
    for j in 0..n_out {
        let col: Vec<f64> = per_rep.iter().map(|r| r[j]).collect();
        let (m, s) = mean_and_se(&col);
        mean[j] = m;
        se[j] = s;
    }
    Ok(VectorEstimate { mean, se, reps: budget.reps, seed: budget.seed })
}

/// Scalar pair observable.
pub fn mc_gibbs(
    mu: &SpinMeasure,
    q: &StepPath,
    x: &[f64],
    z: &SymMat,
    budget: &CascadeBudget,
    f: impl Fn(&[f64], &[f64], usize) -> f64 + Send + Sync,
) -> Result<GibbsEstimate> {
    let est = mc_gibbs_vector(mu, q, x, z, budget, 1, |s1, s2, class, out| {
        out[0] = f(s1, s2, class)
    })?;
    let shape = plan_shape(q, budget.truncation, budget.leaf_budget)?;
    let leaves: usize = shape.widths.iter().product();
    Ok(GibbsEstimate {
        mean: est.mean[0],
        se: est.se[0],
        reps: est.reps,
        samples: leaves * mu.atoms().len(),
        seed: est.seed,
    })
}

/// E < sigma > under the Gibbs measure with tilt z (mean magnetization).
pub fn gibbs_mean_spin(
    mu: &SpinMeasure,
    q: &StepPath,
    budget: &CascadeBudget,
) -> Result<VectorEstimate> {
    let d = mu.dim();
    let x = vec![0.0; d];
    let z = SymMat::zeros(d);
    mc_gibbs_vector(mu, q, &x, &z, budget, d, |s1, _, _, out| out.copy_from_slice(s1))
}

/// E < sigma sigma^T - sigma sigma'^T >, the Gibbs expectation entering the
/// Hessian representation, as a packed upper triangle with standard errors.
pub fn gibbs_hessian_matrix(
    mu: &SpinMeasure,
    q: &StepPath,
    x: &[f64],
    z: &SymMat,
    budget: &CascadeBudget,
) -> Result<(SymMat, SymMat)> {
    let d = mu.dim();
    let nh = d * (d + 1) / 2;
    let est = mc_gibbs_vector(mu, q, x, z, budget, nh, |s1, s2, _class, out| {
        let mut k = 0;
        for i in 0..s1.len() {
            for j in i..s1.len() {
                // 0.5 (s_i s_j + s_j s_i) - 0.5 (s_i s'_j + s_j s'_i)
                out[k] = s1[i] * s1[j] - 0.5 * (s1[i] * s2[j] + s1[j] * s2[i]);
                k += 1;
            }
        }
    })?;
    let mut mean = SymMat::zeros(d);
    let mut se = SymMat::zeros(d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            mean.set(i, j, est.mean[k]);
            se.set(i, j, est.se[k]);
            k += 1;
        }
    }
    Ok((mean, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::GaussHermite;

    fn budget(reps: usize, seed: u64) -> CascadeBudget {
        CascadeBudget::new(reps, 1000, seed)
    }

    #[test]
    fn constant_path_single_leaf() {
        let q = StepPath::scalar(vec![0.0], vec![0.5]).unwrap();
        let s = sample_cascade(&q, 1000, 100_000, 1).unwrap();
        assert_eq!(s.weights.len(), 1);
        assert!((s.weights[0] - 1.0).abs() < 1e-12);
        assert!(s.zetas.is_empty());
    }

    #[test]
    fn weights_normalized_and_pd_moment() {
        // One-level cascade with zeta = 0.5: E sum(w^2) = 1 - zeta.
        let q = StepPath::scalar(vec![0.0, 0.5], vec![0.0, 0.4]).unwrap();
        let reps = 400;
        let mut sums = Vec::with_capacity(reps);
        for rep in 0..reps {
            let s = sample_cascade(&q, 2000, 100_000, 1000 + rep as u64).unwrap();
            let total: f64 = s.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            sums.push(s.weights.iter().map(|w| w * w).sum::<f64>());
        }
        let (mean, se) = mean_and_se(&sums);
        assert!(
            (mean - 0.5).abs() <= 3.0 * se + 0.01,
            "participation ratio {mean} +- {se}, want 0.5"
        );
    }

    #[test]
    fn f_mu_trivial_zero() {
        // q = 0, x = 0, z = 0, probability measure: log integral = 0 exactly.
        let mu = SpinMeasure::ising();
        let q = StepPath::zero(1);
        let est = mc_f_mu(&mu, &q, &[0.0], &SymMat::zeros(1), &budget(50, 3)).unwrap();
        assert!(est.mean.abs() < 1e-12);
        assert!(est.se < 1e-12);
    }

    #[test]
    fn f_mu_constant_path_matches_quadrature() {
        // Constant q = h: the field is one shared Gaussian, so f reduces to
        // E log( (1/2) e^{sqrt(2) w + x} + (1/2) e^{-sqrt(2) w - x} ) - h
        // with w ~ N(0, h), evaluated by direct quadrature.
        let mu = SpinMeasure::ising();
        let h = 0.3;
        let q = StepPath::scalar(vec![0.0], vec![h]).unwrap();
        let x = 0.4;
        let gh = GaussHermite::new(64);
        let want = gh.expect_standard_normal(|g| {
            let w = h.sqrt() * g; // the field has covariance q = h
            (0.5 * ((2.0f64.sqrt() * w + x).exp() + (-(2.0f64.sqrt()) * w - x).exp())).ln() - h
        });
        let est = mc_f_mu(&mu, &q, &[x], &SymMat::zeros(1), &budget(400, 7)).unwrap();
        assert!(
            (est.mean - want).abs() <= 3.0 * est.se,
            "estimate {} +- {} vs quadrature {want}",
            est.mean,
            est.se
        );
        assert!(est.se < 5e-3);
    }

    #[test]
    fn lipschitz_in_arguments() {
        // |f(q,x,z) - f(q',x',z')| <= |z-z'| + ||q-q'||_L1 + |x-x'| within MC error.
        let mu = SpinMeasure::ising();
        let q = StepPath::scalar(vec![0.0, 0.4], vec![0.1, 0.5]).unwrap();
        let q2 = StepPath::scalar(vec![0.0, 0.4], vec![0.15, 0.55]).unwrap();
        let b = budget(300, 11);
        let e1 = mc_f_mu(&mu, &q, &[0.2], &SymMat::scalar(0.1), &b).unwrap();
        let e2 = mc_f_mu(&mu, &q2, &[0.3], &SymMat::scalar(0.0), &b).unwrap();
        let bound = 0.1 + crate::paths::path_distance(&q, &q2, crate::paths::PathNorm::L1).unwrap()
            + 0.1;
        assert!(
            (e1.mean - e2.mean).abs() <= bound + 3.0 * (e1.se + e2.se),
            "|{} - {}| > {bound}",
            e1.mean,
            e2.mean
        );
    }

    #[test]
    fn gibbs_normalization_and_symmetry() {
        let mu = SpinMeasure::ising();
        let q = StepPath::scalar(vec![0.0, 0.5], vec![0.2, 0.6]).unwrap();
        let b = budget(100, 5);
        let one = mc_gibbs(&mu, &q, &[0.0], &SymMat::zeros(1), &b, |_, _, _| 1.0).unwrap();
        assert!((one.mean - 1.0).abs() < 1e-12);
        assert!(one.se < 1e-12);
        // Symmetric measure, no field: <sigma> = 0 within noise.
        let m = gibbs_mean_spin(&mu, &q, &b).unwrap();
        assert!(m.mean[0].abs() <= 3.0 * m.se[0] + 1e-3);
    }

    #[test]
    fn cascade_invariance_overlap_law() {
        // E < indicator(class = d) > = s_{d+1} - s_d even under the spin tilt.
        let mu = SpinMeasure::biased_ising(0.65);
        let q = StepPath::scalar(vec![0.0, 0.3, 0.7], vec![0.1, 0.3, 0.55]).unwrap();
        let b = CascadeBudget { reps: 300, truncation: 1000, leaf_budget: 200_000, field_pairs: 2, seed: 21 };
        let intervals = [(0.0, 0.3), (0.3, 0.7), (0.7, 1.0)];
        for (d, &(lo, hi)) in intervals.iter().enumerate() {
            let est = mc_gibbs(&mu, &q, &[0.25], &SymMat::zeros(1), &b, |_, _, class| {
                if class == d {
                    1.0
                } else {
                    0.0
                }
            })
            .unwrap();
            let want = hi - lo;
            assert!(
                (est.mean - want).abs() <= 3.0 * est.se + 0.01,
                "class {d}: {} +- {} vs {want}",
                est.mean,
                est.se
            );
        }
    }

    #[test]
    fn psi_estimate_matches_pde_value() {
        let mu = SpinMeasure::ising();
        let q = StepPath::scalar(vec![0.0, 0.5], vec![0.2, 0.6]).unwrap();
        let spec = crate::pde::GridSpec::default_for_dim(1);
        let truth = crate::pde::psi_value(&mu, &q, &spec).unwrap();
        let est = mc_psi(&mu, &q, &budget(400, 17)).unwrap();
        assert!(
            (est.mean - truth).abs() <= 3.0 * est.se,
            "mc {} +- {} vs pde {truth}",
            est.mean,
            est.se
        );
        assert!(est.se < 5e-3, "se too large: {}", est.se);
    }

    #[test]
    fn truncation_bias_below_noise() {
        let mu = SpinMeasure::ising();
        let q = StepPath::scalar(vec![0.0, 0.4, 0.7], vec![0.15, 0.4, 0.6]).unwrap();
        let b1 = CascadeBudget { reps: 300, truncation: 1000, leaf_budget: 400_000, field_pairs: 2, seed: 29 };
        let b2 = CascadeBudget { reps: 300, truncation: 2000, leaf_budget: 1_600_000, field_pairs: 2, seed: 31 };
        let e1 = mc_psi(&mu, &q, &b1).unwrap();
        let e2 = mc_psi(&mu, &q, &b2).unwrap();
        assert!(
            (e1.mean - e2.mean).abs() <= e1.se + e2.se,
            "truncation drift: {} +- {} vs {} +- {}",
            e1.mean,
            e1.se,
            e2.mean,
            e2.se
        );
    }
}
