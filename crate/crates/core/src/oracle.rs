//! Exhaustive reference search for small instances.
//!
//! Enumerates every dp, every per-type (tp, recompute) choice and every
//! integral layer split with no pruning, checking memory stage by stage.
//! Costs come from the same kernel as [`crate::cost::estimate_iteration_time`].

use crate::cluster::{ClusterSpec, WorkloadSpec};
use crate::cost::{check_plan_feasibility, estimate_iteration_time, kernel_total, LayerCoefficients, TypeTerm};
use crate::plan::in_flight;
use crate::profile::ProfileTable;
use crate::search::{keep_better, Candidate, SearchError, SearchResult, SearchStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleLimits {
    pub max_types: usize,
    pub max_chips: usize,
    pub max_layers: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        Self {
            max_types: 3,
            max_chips: 256,
            max_layers: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleConstraints {
    pub fixed_dp: Option<usize>,
    /// `tp_nonincreasing[i] = Some(j)` requires `tp_i <= tp_j`.
    pub tp_nonincreasing: Vec<Option<usize>>,
}

pub fn brute_force_oracle(
    cluster: &ClusterSpec,
    profile: &ProfileTable,
    workload: &WorkloadSpec,
    limits: &OracleLimits,
) -> Result<SearchResult, SearchError> {
    brute_force_oracle_with(cluster, profile, workload, limits, &OracleConstraints::default())
}

#[derive(Clone, Copy)]
struct Pick {
    pp: usize,
    tp: usize,
    recompute: bool,
    coeffs: LayerCoefficients,
    capacity: u64,
}

pub fn brute_force_oracle_with(
    cluster: &ClusterSpec,
    profile: &ProfileTable,
    workload: &WorkloadSpec,
    limits: &OracleLimits,
    constraints: &OracleConstraints,
) -> Result<SearchResult, SearchError> {
    if cluster.len() > limits.max_types {
        return Err(SearchError::LimitsExceeded(format!(
            "{} chip types > {}",
            cluster.len(),
            limits.max_types
        )));
    }
    if cluster.total_chips() > limits.max_chips {
        return Err(SearchError::LimitsExceeded(format!(
            "{} chips > {}",
            cluster.total_chips(),
            limits.max_chips
        )));
    }
    if workload.total_layers > limits.max_layers {
        return Err(SearchError::LimitsExceeded(format!(
            "{} layers > {}",
            workload.total_layers, limits.max_layers
        )));
    }
    if cluster.is_empty() || workload.global_batch == 0 {
        return Err(SearchError::Input("empty instance".into()));
    }

    let mut best: Option<Candidate> = None;
    let mut configurations = 0;
    let mut dps = Vec::new();
    for dp in 1..=workload.global_batch {
        if workload.global_batch % dp != 0 || constraints.fixed_dp.is_some_and(|f| f != dp) {
            continue;
        }
        dps.push(dp);
        let mut per_type: Vec<Vec<Pick>> = Vec::new();
        for chip in &cluster.chip_types {
            let mut picks = Vec::new();
            let mut tp = 1;
            while tp <= chip.tp_max {
                if chip.count % (tp * dp) == 0 {
                    for recompute in [false, true] {
                        if let Ok(coeffs) =
                            LayerCoefficients::lookup(profile, &chip.name, dp, tp, recompute)
                        {
                            picks.push(Pick {
                                pp: chip.count / (tp * dp),
                                tp,
                                recompute,
                                coeffs,
                                capacity: chip.safe_memory,
                            });
                        }
                    }
                }
                tp *= 2;
            }
            per_type.push(picks);
        }
        let b = workload.global_batch / dp;
        let mut combo = Vec::new();
        each_combo(&per_type, &mut combo, &mut |picks| {
            for (i, p) in picks.iter().enumerate() {
                if let Some(Some(j)) = constraints.tp_nonincreasing.get(i) {
                    if p.tp > picks[*j].tp {
                        return;
                    }
                }
            }
            configurations += 1;
            let stages: usize = picks.iter().map(|p| p.pp).sum();
            if stages > workload.total_layers {
                return;
            }
            let mut lps = Vec::new();
            each_split(picks, workload.total_layers, &mut lps, &mut |lps| {
                if !fits(picks, lps, b, stages) {
                    return;
                }
                let terms: Vec<TypeTerm> = picks
                    .iter()
                    .zip(lps)
                    .map(|(p, &x)| TypeTerm {
                        pp: p.pp,
                        lps: x,
                        coeffs: p.coeffs,
                    })
                    .collect();
                let total =
                    kernel_total(&terms, b, workload.bubble_coefficient) + workload.pipeline_overhead;
                keep_better(
                    &mut best,
                    Candidate {
                        total,
                        dp,
                        tp: picks.iter().map(|p| p.tp).collect(),
                        pp: picks.iter().map(|p| p.pp).collect(),
                        recompute: picks.iter().map(|p| p.recompute).collect(),
                        layers: picks.iter().zip(lps).map(|(p, x)| p.pp * x).collect(),
                    },
                );
            });
        });
    }

    let best = best.ok_or(SearchError::NoFeasiblePlan)?;
    let plan = best.into_plan(cluster, workload.global_batch);
    let cost = estimate_iteration_time(&plan, profile, workload)?;
    debug_assert!(check_plan_feasibility(&plan, cluster, profile, workload).is_feasible());
    Ok(SearchResult {
        plan,
        cost,
        stats: SearchStats {
            dp_candidates: dps,
            configurations,
        },
    })
}

fn each_combo<'a>(per_type: &'a [Vec<Pick>], combo: &mut Vec<Pick>, f: &mut dyn FnMut(&[Pick])) {
    if combo.len() == per_type.len() {
        f(combo);
        return;
    }
    for &p in &per_type[combo.len()] {
        combo.push(p);
        each_combo(per_type, combo, f);
        combo.pop();
    }
}

/// Every `x` with `x_i >= 1` and `sum pp_i * x_i == layers`.
fn each_split(picks: &[Pick], layers: usize, lps: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
    let i = lps.len();
    if i == picks.len() {
        if layers == 0 {
            f(lps);
        }
        return;
    }
    let rest: usize = picks[i + 1..].iter().map(|p| p.pp).sum();
    let mut x = 1;
    while picks[i].pp * x + rest <= layers {
        lps.push(x);
        each_split(picks, layers - picks[i].pp * x, lps, f);
        lps.pop();
        x += 1;
    }
}

/// Memory check at every stage of the pipeline.
fn fits(picks: &[Pick], lps: &[usize], b: usize, stages: usize) -> bool {
    let mut s = 1;
    for (p, &x) in picks.iter().zip(lps) {
        for _ in 0..p.pp {
            if p.coeffs.stage_memory(x, in_flight(b, stages, s)) > p.capacity {
                return false;
            }
            s += 1;
        }
    }
    true
}
