//! Non-uniform layer sharding across chip types.
//!
//! With `x_i` layers per stage on type `i`, the iteration time is
//!
//! ```text
//! T(x) = max_i a_i * x_i + alpha * sum_i pp_i * c_i * x_i,   a_i = (b - alpha) * c_i + u_i
//! ```
//!
//! subject to `sum_i pp_i * x_i = L` and `1 <= x_i <= cap_i`, where `cap_i`
//! is the largest per-stage layer count that fits the type's safe memory at
//! its first (most loaded) stage. [`equalize_layers`] gives the
//! continuous balance point, [`refine_layers`] repairs it to an integral
//! split, improves it by layer exchanges between types and then proves it
//! optimal with a bounded depth-first search over the remaining candidates.

use thiserror::Error;

use crate::cluster::{ClusterSpec, WorkloadSpec};
use crate::cost::{kernel_total, LayerCoefficients, TypeTerm};
use crate::plan::in_flight;
use crate::profile::{ProfileError, ProfileTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShardingError {
    #[error("{layers} layers cannot give each of {stages} stages at least one layer")]
    TooFewLayers { layers: usize, stages: usize },
    #[error("sharding infeasible: no integer layer split satisfies memory and divisibility")]
    Infeasible,
    #[error("initial split has {got} entries for {expected} chip types")]
    Shape { got: usize, expected: usize },
    #[error("chip `{0}` is not in the cluster")]
    UnknownChip(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Fixed parallel configuration of one chip type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeConfig {
    pub chip: String,
    pub pp: usize,
    pub tp: usize,
    pub recompute: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ShardTerm {
    pub pp: usize,
    pub coeffs: LayerCoefficients,
    /// Largest memory-feasible layers per stage; 0 if even one layer does not fit.
    pub cap: usize,
}

/// A fixed (dp, per-type pp/tp/recompute) configuration awaiting a layer split.
#[derive(Debug, Clone)]
pub struct ShardingProblem {
    pub(crate) terms: Vec<ShardTerm>,
    pub(crate) total_layers: usize,
    pub(crate) microbatches: usize,
    pub(crate) alpha: f64,
    pub(crate) overhead: f64,
}

/// Largest `lps` with `stage_memory(lps, w) <= capacity`.
pub(crate) fn layer_cap(coeffs: &LayerCoefficients, w: usize, capacity: u64) -> usize {
    let per_layer = coeffs.model_bytes as u128 + w as u128 * coeffs.act_bytes as u128;
    if per_layer == 0 {
        return usize::MAX;
    }
    usize::try_from(capacity as u128 / per_layer).unwrap_or(usize::MAX)
}

impl ShardingProblem {
    /// Looks up the profile for each configured type (in cluster order) and
    /// derives memory caps from the 1F1B in-flight count of each type's first stage.
    pub fn new(
        cluster: &ClusterSpec,
        profile: &ProfileTable,
        workload: &WorkloadSpec,
        dp: usize,
        configs: &[TypeConfig],
    ) -> Result<Self, ShardingError> {
        let microbatches = workload.global_batch / dp.max(1);
        let mut entries = Vec::with_capacity(configs.len());
        for c in configs {
            let chip = cluster
                .get(&c.chip)
                .ok_or_else(|| ShardingError::UnknownChip(c.chip.clone()))?;
            let coeffs = LayerCoefficients::lookup(profile, &c.chip, dp, c.tp, c.recompute)?;
            entries.push((c.pp, coeffs, chip.safe_memory));
        }
        Ok(Self::from_parts(
            &entries,
            workload.total_layers,
            microbatches,
            workload.bubble_coefficient,
            workload.pipeline_overhead,
        ))
    }

    /// `entries` are `(pp, coefficients, safe_memory)` in pipeline order.
    pub(crate) fn from_parts(
        entries: &[(usize, LayerCoefficients, u64)],
        total_layers: usize,
        microbatches: usize,
        alpha: f64,
        overhead: f64,
    ) -> Self {
        let stages: usize = entries.iter().map(|e| e.0).sum();
        let mut first = 1;
        let terms = entries
            .iter()
            .map(|&(pp, coeffs, capacity)| {
                let w = in_flight(microbatches, stages, first);
                first += pp;
                ShardTerm {
                    pp,
                    coeffs,
                    cap: layer_cap(&coeffs, w, capacity),
                }
            })
            .collect();
        Self {
            terms,
            total_layers,
            microbatches,
            alpha,
            overhead,
        }
    }

    pub fn num_types(&self) -> usize {
        self.terms.len()
    }

    pub fn num_stages(&self) -> usize {
        self.terms.iter().map(|t| t.pp).sum()
    }

    /// Per-type memory caps on layers per stage.
    pub fn layer_caps(&self) -> Vec<usize> {
        self.terms.iter().map(|t| t.cap).collect()
    }

    /// Iteration time for per-stage layer counts `lps`.
    fn cost_lps(&self, lps: &[usize], scratch: &mut Vec<TypeTerm>) -> f64 {
        scratch.clear();
        scratch.extend(self.terms.iter().zip(lps).map(|(t, &x)| TypeTerm {
            pp: t.pp,
            lps: x,
            coeffs: t.coeffs,
        }));
        kernel_total(scratch, self.microbatches, self.alpha) + self.overhead
    }

    /// Iteration time for per-type layer totals, or `None` if the split
    /// breaks divisibility, the layer total or memory.
    pub fn cost(&self, layers: &[usize]) -> Option<f64> {
        let lps = self.to_lps(layers)?;
        Some(self.cost_lps(&lps, &mut Vec::new()))
    }

    fn to_lps(&self, layers: &[usize]) -> Option<Vec<usize>> {
        if layers.len() != self.terms.len() || layers.iter().sum::<usize>() != self.total_layers {
            return None;
        }
        self.terms
            .iter()
            .zip(layers)
            .map(|(t, &l)| {
                let x = l / t.pp;
                (l % t.pp == 0 && x >= 1 && x <= t.cap).then_some(x)
            })
            .collect()
    }

    fn to_layers(&self, lps: &[usize]) -> Vec<usize> {
        self.terms.iter().zip(lps).map(|(t, &x)| t.pp * x).collect()
    }

    /// Coefficient of `x_i` inside the max term.
    fn slope(&self, t: &ShardTerm) -> f64 {
        (self.microbatches as f64 - self.alpha) * t.coeffs.compute + t.coeffs.update
    }
}

/// Ideal split that equalizes per-stage compute time, rounded to whole
/// layers per stage. The sum may differ from the layer total; see
/// [`refine_layers`].
pub fn equalize_layers(problem: &ShardingProblem) -> Result<Vec<usize>, ShardingError> {
    let stages = problem.num_stages();
    if problem.total_layers < stages {
        return Err(ShardingError::TooFewLayers {
            layers: problem.total_layers,
            stages,
        });
    }
    let inv: f64 = problem
        .terms
        .iter()
        .map(|t| t.pp as f64 / t.coeffs.compute)
        .sum();
    let tau = problem.total_layers as f64 / inv;
    Ok(problem
        .terms
        .iter()
        .map(|t| t.pp * ((tau / t.coeffs.compute).round() as usize).max(1))
        .collect())
}

/// Integral, memory-feasible split minimizing the iteration time.
///
/// Ties are broken toward the lexicographically smallest layer vector.
pub fn refine_layers(
    problem: &ShardingProblem,
    initial: &[usize],
) -> Result<Vec<usize>, ShardingError> {
    if initial.len() != problem.num_types() {
        return Err(ShardingError::Shape {
            got: initial.len(),
            expected: problem.num_types(),
        });
    }
    let stages = problem.num_stages();
    if problem.total_layers < stages {
        return Err(ShardingError::TooFewLayers {
            layers: problem.total_layers,
            stages,
        });
    }
    let start: Vec<usize> = problem
        .terms
        .iter()
        .zip(initial)
        .map(|(t, &l)| (l / t.pp).max(1))
        .collect();
    solve_from(problem, Some(start), f64::INFINITY)
        .map(|(lps, _)| problem.to_layers(&lps))
        .ok_or(ShardingError::Infeasible)
}

/// Equalize + refine in one call; returns per-type layers and the total.
pub fn shard_layers(problem: &ShardingProblem) -> Result<(Vec<usize>, f64), ShardingError> {
    let initial = equalize_layers(problem)?;
    let layers = refine_layers(problem, &initial)?;
    let cost = problem.cost(&layers).ok_or(ShardingError::Infeasible)?;
    Ok((layers, cost))
}

/// Best per-stage split whose total does not exceed `bound`.
pub(crate) fn solve(problem: &ShardingProblem, bound: f64) -> Option<(Vec<usize>, f64)> {
    if problem.total_layers < problem.num_stages() {
        return None;
    }
    solve_from(problem, None, bound)
}

fn solve_from(
    problem: &ShardingProblem,
    start: Option<Vec<usize>>,
    bound: f64,
) -> Option<(Vec<usize>, f64)> {
    let mut bnb = BranchAndBound::new(problem, bound)?;
    if bnb.root_bound() > bnb.prune_limit() {
        return None;
    }
    let start = start.unwrap_or_else(|| {
        let inv: f64 = problem
            .terms
            .iter()
            .map(|t| t.pp as f64 / t.coeffs.compute)
            .sum();
        let tau = problem.total_layers as f64 / inv;
        problem
            .terms
            .iter()
            .map(|t| ((tau / t.coeffs.compute).round() as usize).max(1))
            .collect()
    });
    if let Some(x) = repair(problem, start) {
        let x = descend(problem, x);
        let cost = problem.cost_lps(&x, &mut bnb.scratch);
        if cost <= bound {
            bnb.best = Some((cost, x));
        }
    }
    bnb.run();
    bnb.best.map(|(c, x)| (x, c))
}

/// Clamps into the memory box and fixes the layer total with whole-stage
/// steps. Returns `None` when the greedy cannot hit the total exactly.
fn repair(problem: &ShardingProblem, mut x: Vec<usize>) -> Option<Vec<usize>> {
    for (xi, t) in x.iter_mut().zip(&problem.terms) {
        if t.cap == 0 {
            return None;
        }
        *xi = (*xi).clamp(1, t.cap);
    }
    let target = problem.total_layers as i64;
    loop {
        let sum: i64 = x
            .iter()
            .zip(&problem.terms)
            .map(|(&xi, t)| (xi * t.pp) as i64)
            .sum();
        let gap = target - sum;
        if gap == 0 {
            return Some(x);
        }
        let pick = if gap > 0 {
            // grow the stage that stays fastest
            problem
                .terms
                .iter()
                .enumerate()
                .filter(|(i, t)| (t.pp as i64) <= gap && x[*i] < t.cap)
                .min_by(|(i, a), (j, b)| {
                    let ta = (x[*i] + 1) as f64 * a.coeffs.compute;
                    let tb = (x[*j] + 1) as f64 * b.coeffs.compute;
                    ta.total_cmp(&tb)
                })
                .map(|(i, _)| (i, true))
        } else {
            problem
                .terms
                .iter()
                .enumerate()
                .filter(|(i, t)| (t.pp as i64) <= -gap && x[*i] > 1)
                .max_by(|(i, a), (j, b)| {
                    let ta = x[*i] as f64 * a.coeffs.compute;
                    let tb = x[*j] as f64 * b.coeffs.compute;
                    ta.total_cmp(&tb).then(j.cmp(i))
                })
                .map(|(i, _)| (i, false))
        };
        match pick {
            Some((i, true)) => x[i] += 1,
            Some((i, false)) => x[i] -= 1,
            None => return None,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Steepest descent over exchanges of `lcm(pp_i, pp_j)` layers from type `i`
/// to type `j`. Prefers moves toward the type earlier in cluster order, then
/// the lexicographically smaller result.
fn descend(problem: &ShardingProblem, mut x: Vec<usize>) -> Vec<usize> {
    let n = x.len();
    let mut scratch = Vec::with_capacity(n);
    let mut current = problem.cost_lps(&x, &mut scratch);
    let mut trial = x.clone();
    loop {
        let mut best: Option<(f64, usize, Vec<usize>)> = None;
        for j in 0..n {
            for i in 0..n {
                if i == j {
                    continue;
                }
                let g = gcd(problem.terms[i].pp, problem.terms[j].pp);
                let take = problem.terms[j].pp / g;
                let give = problem.terms[i].pp / g;
                if x[i] <= take || x[j] + give > problem.terms[j].cap {
                    continue;
                }
                trial.copy_from_slice(&x);
                trial[i] -= take;
                trial[j] += give;
                let cost = problem.cost_lps(&trial, &mut scratch);
                if cost >= current {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((bc, bj, bx)) => {
                        cost < *bc || (cost == *bc && (j < *bj || (j == *bj && trial < *bx)))
                    }
                };
                if better {
                    best = Some((cost, j, trial.clone()));
                }
            }
        }
        match best {
            Some((cost, _, next)) => {
                current = cost;
                x = next;
            }
            None => return x,
        }
    }
}

/// Depth-first enumeration of per-stage layer counts in type order with a
/// lower bound on the iteration time of every partial assignment.
struct BranchAndBound<'a> {
    problem: &'a ShardingProblem,
    slope: Vec<f64>,
    /// `sum_{j >= i} pp_j`.
    suffix_min: Vec<usize>,
    /// `sum_{j >= i} pp_j * cap_j`.
    suffix_max: Vec<usize>,
    /// `min_{j >= i} c_j`.
    suffix_cmin: Vec<f64>,
    /// `sum_{j >= i} pp_j / a_j`, or infinity if some `a_j <= 0`.
    suffix_inv: Vec<f64>,
    /// Largest single-type lower bound on `a_j * x_j` over `j >= i`.
    suffix_floor: Vec<f64>,
    bound: f64,
    best: Option<(f64, Vec<usize>)>,
    x: Vec<usize>,
    scratch: Vec<TypeTerm>,
}

/// Relative slack on pruning so float rounding in the bound never discards
/// a split that ties the incumbent.
const PRUNE_SLACK: f64 = 1e-9;

impl<'a> BranchAndBound<'a> {
    fn new(problem: &'a ShardingProblem, bound: f64) -> Option<Self> {
        let n = problem.terms.len();
        if n == 0 || problem.terms.iter().any(|t| t.cap == 0 || t.pp == 0) {
            return None;
        }
        let slope: Vec<f64> = problem.terms.iter().map(|t| problem.slope(t)).collect();
        let mut suffix_min = vec![0; n + 1];
        let mut suffix_max = vec![0usize; n + 1];
        let mut suffix_cmin = vec![f64::INFINITY; n + 1];
        let mut suffix_inv = vec![0.0; n + 1];
        let mut suffix_floor = vec![f64::NEG_INFINITY; n + 1];
        for i in (0..n).rev() {
            let t = &problem.terms[i];
            suffix_min[i] = suffix_min[i + 1] + t.pp;
            suffix_max[i] = suffix_max[i + 1].saturating_add(t.pp.saturating_mul(t.cap));
            suffix_cmin[i] = suffix_cmin[i + 1].min(t.coeffs.compute);
            suffix_inv[i] = if slope[i] > 0.0 {
                suffix_inv[i + 1] + t.pp as f64 / slope[i]
            } else {
                f64::INFINITY
            };
            let lo = if slope[i] >= 0.0 {
                slope[i]
            } else {
                slope[i] * t.cap.min(problem.total_layers) as f64
            };
            suffix_floor[i] = suffix_floor[i + 1].max(lo);
        }
        if suffix_min[0] > problem.total_layers || suffix_max[0] < problem.total_layers {
            return None;
        }
        Some(Self {
            problem,
            slope,
            suffix_min,
            suffix_max,
            suffix_cmin,
            suffix_inv,
            suffix_floor,
            bound,
            best: None,
            x: vec![0; n],
            scratch: Vec::with_capacity(n),
        })
    }

    fn prune_limit(&self) -> f64 {
        let limit = match &self.best {
            Some((c, _)) => c.min(self.bound),
            None => self.bound,
        };
        limit + limit.abs() * PRUNE_SLACK
    }

    /// Lower bound with types `0..depth` fixed, `assigned_max` the largest
    /// fixed `a_i * x_i`, `assigned_sum` their share of `sum pp c x`, and
    /// `remaining` layers still to place.
    fn lower_bound(&self, depth: usize, assigned_max: f64, assigned_sum: f64, remaining: usize) -> f64 {
        let mut max_term = assigned_max.max(self.suffix_floor[depth]);
        if depth < self.slope.len() && self.suffix_inv[depth].is_finite() {
            max_term = max_term.max(remaining as f64 / self.suffix_inv[depth]);
        }
        let rest = if depth < self.slope.len() {
            self.suffix_cmin[depth] * remaining as f64
        } else {
            0.0
        };
        max_term + self.problem.alpha * (assigned_sum + rest) + self.problem.overhead
    }

    fn root_bound(&self) -> f64 {
        self.lower_bound(0, f64::NEG_INFINITY, 0.0, self.problem.total_layers)
    }

    fn run(&mut self) {
        self.visit(0, self.problem.total_layers, f64::NEG_INFINITY, 0.0);
    }

    fn visit(&mut self, depth: usize, remaining: usize, assigned_max: f64, assigned_sum: f64) {
        let n = self.slope.len();
        let t = self.problem.terms[depth];
        if depth + 1 == n {
            if remaining % t.pp != 0 {
                return;
            }
            let x = remaining / t.pp;
            if x == 0 || x > t.cap {
                return;
            }
            self.x[depth] = x;
            self.leaf();
            return;
        }
        let rest_min = self.suffix_min[depth + 1];
        let rest_max = self.suffix_max[depth + 1];
        if remaining < rest_min + t.pp {
            return;
        }
        let hi = t.cap.min((remaining - rest_min) / t.pp);
        let lo = if remaining > rest_max {
            (remaining - rest_max).div_ceil(t.pp).max(1)
        } else {
            1
        };
        for x in lo..=hi {
            let term = self.slope[depth] * x as f64;
            let m = assigned_max.max(term);
            let s = assigned_sum + (t.pp * x) as f64 * t.coeffs.compute;
            let left = remaining - t.pp * x;
            if self.lower_bound(depth + 1, m, s, left) > self.prune_limit() {
                continue;
            }
            self.x[depth] = x;
            self.visit(depth + 1, left, m, s);
        }
    }

    fn leaf(&mut self) {
        let cost = self.problem.cost_lps(&self.x, &mut self.scratch);
        if cost > self.bound {
            return;
        }
        let better = match &self.best {
            None => true,
            Some((c, bx)) => cost < *c || (cost == *c && self.x < *bx),
        };
        if better {
            self.best = Some((cost, self.x.clone()));
        }
    }
}
