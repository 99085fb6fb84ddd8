//! Analytic iteration-time and memory model.
//!
//! For stage `s` of a plan with `b` microbatches:
//!
//! ```text
//! stage_total(s) = b * comp(s) + update(s) + alpha * sum_{j != s} comp(j)
//! T              = max_s stage_total(s)
//! ```
//!
//! where `comp(s) = lps * (t_fwd + t_bwd + r * t_recomp)` and
//! `update(s) = lps * t_update`. Point-to-point activation transfers are not
//! charged here; the simulator models them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterSpec, WorkloadSpec};
use crate::plan::{in_flight, ParallelPlan};
use crate::profile::{ProfileEntry, ProfileError, ProfileTable};

/// Per-layer quantities for one (chip, dp, tp, recompute) choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCoefficients {
    /// `t_fwd + t_bwd + r * t_recomp`.
    pub compute: f64,
    pub update: f64,
    pub model_bytes: u64,
    pub act_bytes: u64,
}

impl LayerCoefficients {
    pub fn new(entry: &ProfileEntry, recompute: bool) -> Self {
        let recomp = if recompute { entry.t_recomp } else { 0.0 };
        Self {
            compute: entry.t_fwd + entry.t_bwd + recomp,
            update: entry.t_update,
            model_bytes: entry.mem_model,
            act_bytes: entry.mem_act,
        }
    }

    pub fn lookup(
        profile: &ProfileTable,
        chip: &str,
        dp: usize,
        tp: usize,
        recompute: bool,
    ) -> Result<Self, ProfileError> {
        Ok(Self::new(&profile.lookup(chip, dp, tp, recompute)?, recompute))
    }

    /// Peak bytes of one stage holding `lps` layers with `w` microbatches in flight.
    pub fn stage_memory(&self, lps: usize, w: usize) -> u64 {
        let lps = lps as u128;
        let bytes = lps * self.model_bytes as u128 + w as u128 * lps * self.act_bytes as u128;
        u64::try_from(bytes).unwrap_or(u64::MAX)
    }
}

/// Stages of one type, as seen by the iteration-time kernel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TypeTerm {
    pub pp: usize,
    pub lps: usize,
    pub coeffs: LayerCoefficients,
}

/// Per-type stage totals and the sum of per-stage compute over the pipeline.
/// Shared by [`estimate_iteration_time`], the search and the oracle so that all
/// three produce bit-identical totals for the same plan.
pub(crate) struct KernelOutput {
    pub comp: Vec<f64>,
    pub update: Vec<f64>,
    pub bubble: Vec<f64>,
    pub stage_total: Vec<f64>,
}

pub(crate) fn kernel(terms: &[TypeTerm], microbatches: usize, alpha: f64) -> KernelOutput {
    let comp: Vec<f64> = terms
        .iter()
        .map(|t| t.lps as f64 * t.coeffs.compute)
        .collect();
    let update: Vec<f64> = terms
        .iter()
        .map(|t| t.lps as f64 * t.coeffs.update)
        .collect();
    let sum: f64 = terms.iter().zip(&comp).map(|(t, c)| t.pp as f64 * c).sum();
    let bubble: Vec<f64> = comp.iter().map(|c| alpha * (sum - c).max(0.0)).collect();
    let b = microbatches as f64;
    let stage_total = (0..terms.len())
        .map(|i| b * comp[i] + update[i] + bubble[i])
        .collect();
    KernelOutput {
        comp,
        update,
        bubble,
        stage_total,
    }
}

/// Total only; the hot path of the search.
pub(crate) fn kernel_total(terms: &[TypeTerm], microbatches: usize, alpha: f64) -> f64 {
    let b = microbatches as f64;
    let mut sum = 0.0;
    for t in terms {
        sum += t.pp as f64 * (t.lps as f64 * t.coeffs.compute);
    }
    let mut best = f64::NEG_INFINITY;
    for t in terms {
        let comp = t.lps as f64 * t.coeffs.compute;
        let update = t.lps as f64 * t.coeffs.update;
        let total = b * comp + update + alpha * (sum - comp).max(0.0);
        if total > best {
            best = total;
        }
    }
    best
}

/// Computation time of one stage for one microbatch.
pub fn stage_compute_time(
    chip: &str,
    tp: usize,
    layers_per_stage: usize,
    recompute: bool,
    profile: &ProfileTable,
) -> Result<f64, ProfileError> {
    let c = profile.compute(chip, tp)?;
    let recomp = if recompute { c.t_recomp } else { 0.0 };
    Ok(layers_per_stage as f64 * (c.t_fwd + c.t_bwd + recomp))
}

/// Optimizer update time of one stage.
pub fn stage_update_time(
    chip: &str,
    dp: usize,
    tp: usize,
    layers_per_stage: usize,
    profile: &ProfileTable,
) -> Result<f64, ProfileError> {
    Ok(layers_per_stage as f64 * profile.update(chip, dp, tp)?.t_update)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub chip: String,
    pub compute_time: f64,
    pub update_time: f64,
    pub bubble_term: f64,
    pub stage_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// One entry per pipeline stage, head first.
    pub stages: Vec<StageCost>,
    /// Maximum stage total plus the workload's constant pipeline overhead.
    pub total: f64,
}

impl CostBreakdown {
    /// 1-based indices of the stages attaining the maximum stage total.
    pub fn critical_stages(&self) -> Vec<usize> {
        let max = self
            .stages
            .iter()
            .map(|s| s.stage_total)
            .fold(f64::NEG_INFINITY, f64::max);
        self.stages
            .iter()
            .enumerate()
            .filter(|(_, s)| s.stage_total == max)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

pub(crate) fn plan_terms(
    plan: &ParallelPlan,
    profile: &ProfileTable,
) -> Result<Vec<TypeTerm>, ProfileError> {
    plan.assignments
        .iter()
        .map(|a| {
            Ok(TypeTerm {
                pp: a.pp,
                lps: a.layers_per_stage(),
                coeffs: LayerCoefficients::lookup(profile, &a.chip, plan.dp, a.tp, a.recompute)?,
            })
        })
        .collect()
}

/// Estimated iteration time of `plan`, with the per-stage breakdown.
pub fn estimate_iteration_time(
    plan: &ParallelPlan,
    profile: &ProfileTable,
    workload: &WorkloadSpec,
) -> Result<CostBreakdown, ProfileError> {
    let terms = plan_terms(plan, profile)?;
    let out = kernel(&terms, plan.microbatches, workload.bubble_coefficient);
    let mut stages = Vec::with_capacity(plan.num_stages());
    let mut max = f64::NEG_INFINITY;
    for (i, a) in plan.assignments.iter().enumerate() {
        max = max.max(out.stage_total[i]);
        for _ in 0..a.pp {
            stages.push(StageCost {
                chip: a.chip.clone(),
                compute_time: out.comp[i],
                update_time: out.update[i],
                bubble_term: out.bubble[i],
                stage_total: out.stage_total[i],
            });
        }
    }
    let total = if stages.is_empty() {
        workload.pipeline_overhead
    } else {
        max + workload.pipeline_overhead
    };
    Ok(CostBreakdown { stages, total })
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("stage index {index} out of range 1..={stages}")]
    StageOutOfRange { index: usize, stages: usize },
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Peak bytes per chip at a 1-based stage:
/// `lps * mem_model + w * lps * mem_act`, with `w = min(b, s_pp - s + 1)`.
pub fn stage_peak_memory(
    plan: &ParallelPlan,
    stage_index: usize,
    profile: &ProfileTable,
) -> Result<u64, MemoryError> {
    let stage = plan.stage(stage_index).ok_or(MemoryError::StageOutOfRange {
        index: stage_index,
        stages: plan.num_stages(),
    })?;
    let a = &plan.assignments[stage.assignment];
    let coeffs = LayerCoefficients::lookup(profile, &a.chip, plan.dp, a.tp, a.recompute)?;
    let w = in_flight(plan.microbatches, plan.num_stages(), stage_index);
    Ok(coeffs.stage_memory(a.layers_per_stage(), w))
}

/// The first constraint a plan breaks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Violation {
    #[error("plan has no pipeline stages")]
    NoStages,
    #[error("dp and microbatches must be positive")]
    ZeroDegree,
    #[error("microbatches {microbatches} x dp {dp} != global batch {global_batch}")]
    BatchMismatch {
        dp: usize,
        microbatches: usize,
        global_batch: usize,
    },
    #[error("chip `{0}` is not in the cluster")]
    UnknownChip(String),
    #[error("chip `{0}` is out of memory-descending cluster order")]
    TypeOrder(String),
    #[error("chip `{chip}`: pp {pp} x tp {tp} x dp {dp} != {count} chips")]
    ChipCount {
        chip: String,
        pp: usize,
        tp: usize,
        dp: usize,
        count: usize,
    },
    #[error("chip `{chip}`: tp {tp} is not a power of two")]
    TpNotPowerOfTwo { chip: String, tp: usize },
    #[error("chip `{chip}`: tp {tp} exceeds tp_max {tp_max}")]
    TpExceedsMax {
        chip: String,
        tp: usize,
        tp_max: usize,
    },
    #[error("chip `{chip}`: {layers} layers not divisible across {pp} stages")]
    LayersNotDivisible {
        chip: String,
        layers: usize,
        pp: usize,
    },
    #[error("chip `{chip}`: every stage needs at least one layer")]
    EmptyStage { chip: String },
    #[error("plan holds {assigned} layers but the model has {total}")]
    LayerSum { assigned: usize, total: usize },
    #[error("chip `{chip}`: {error}")]
    Profile { chip: String, error: ProfileError },
    #[error("stage {stage} on chip `{chip}` needs {required} bytes, safe capacity is {capacity}")]
    Memory {
        stage: usize,
        chip: String,
        required: u64,
        capacity: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSlack {
    pub stage: usize,
    pub chip: String,
    pub peak_memory: u64,
    pub capacity: u64,
}

impl StageSlack {
    pub fn slack(&self) -> i128 {
        self.capacity as i128 - self.peak_memory as i128
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    /// First violated constraint, if any.
    pub violation: Option<Violation>,
    /// Memory headroom per stage. Empty when a structural constraint failed.
    pub stages: Vec<StageSlack>,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        self.violation.is_none()
    }
}

fn structural_check(
    plan: &ParallelPlan,
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
) -> Result<(), Violation> {
    if plan.dp == 0 || plan.microbatches == 0 {
        return Err(Violation::ZeroDegree);
    }
    if plan.microbatches * plan.dp != workload.global_batch {
        return Err(Violation::BatchMismatch {
            dp: plan.dp,
            microbatches: plan.microbatches,
            global_batch: workload.global_batch,
        });
    }
    if plan.num_stages() == 0 {
        return Err(Violation::NoStages);
    }
    let mut last_pos = None;
    for a in &plan.assignments {
        let pos = cluster
            .position(&a.chip)
            .ok_or_else(|| Violation::UnknownChip(a.chip.clone()))?;
        if last_pos.is_some_and(|p| p >= pos) {
            return Err(Violation::TypeOrder(a.chip.clone()));
        }
        last_pos = Some(pos);
        if a.pp == 0 {
            continue;
        }
        let chip = &cluster.chip_types[pos];
        if !a.tp.is_power_of_two() {
            return Err(Violation::TpNotPowerOfTwo {
                chip: a.chip.clone(),
                tp: a.tp,
            });
        }
        if a.tp > chip.tp_max {
            return Err(Violation::TpExceedsMax {
                chip: a.chip.clone(),
                tp: a.tp,
                tp_max: chip.tp_max,
            });
        }
        if a.pp * a.tp * plan.dp != chip.count {
            return Err(Violation::ChipCount {
                chip: a.chip.clone(),
                pp: a.pp,
                tp: a.tp,
                dp: plan.dp,
                count: chip.count,
            });
        }
        if a.layers < a.pp {
            return Err(Violation::EmptyStage {
                chip: a.chip.clone(),
            });
        }
        if a.layers % a.pp != 0 {
            return Err(Violation::LayersNotDivisible {
                chip: a.chip.clone(),
                layers: a.layers,
                pp: a.pp,
            });
        }
    }
    if plan.total_layers() != workload.total_layers {
        return Err(Violation::LayerSum {
            assigned: plan.total_layers(),
            total: workload.total_layers,
        });
    }
    Ok(())
}

/// Checks every plan invariant and the per-stage memory budget.
pub fn check_plan_feasibility(
    plan: &ParallelPlan,
    cluster: &ClusterSpec,
    profile: &ProfileTable,
    workload: &WorkloadSpec,
) -> Feasibility {
    if let Err(v) = structural_check(plan, cluster, workload) {
        return Feasibility {
            violation: Some(v),
            stages: Vec::new(),
        };
    }
    let mut violation = None;
    let mut stages = Vec::with_capacity(plan.num_stages());
    for s in plan.stages() {
        let a = &plan.assignments[s.assignment];
        let capacity = cluster.get(&a.chip).map(|c| c.safe_memory).unwrap_or(0);
        let peak = match stage_peak_memory(plan, s.index, profile) {
            Ok(p) => p,
            Err(MemoryError::Profile(error)) => {
                return Feasibility {
                    violation: Some(Violation::Profile {
                        chip: a.chip.clone(),
                        error,
                    }),
                    stages: Vec::new(),
                }
            }
            Err(e) => unreachable!("stage index from plan.stages(): {e}"),
        };
        if peak > capacity && violation.is_none() {
            violation = Some(Violation::Memory {
                stage: s.index,
                chip: a.chip.clone(),
                required: peak,
                capacity,
            });
        }
        stages.push(StageSlack {
            stage: s.index,
            chip: a.chip.clone(),
            peak_memory: peak,
            capacity,
        });
    }
    Feasibility { violation, stages }
}
