//! Depth-first search over heterogeneous pipeline-parallel plans.
//!
//! For every data-parallel degree dividing the global batch, chip types are
//! visited in cluster (memory-descending) order. Each type picks a
//! power-of-two TP degree, which fixes its stage count through
//! `N_i = pp_i * tp_i * dp`, and a recompute flag. Every complete
//! configuration is handed to the layer sharder, which returns its best
//! memory-feasible split if that split can still beat the incumbent.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering as AtomicOrdering};

use rayon::prelude::*;
use thiserror::Error;

use crate::cluster::{ChipTypeSpec, ClusterSpec, WorkloadSpec};
use crate::cost::{estimate_iteration_time, CostBreakdown, LayerCoefficients};
use crate::plan::{ParallelPlan, TypeAssignment};
use crate::profile::{ProfileError, ProfileTable};
use crate::sharding::{solve, ShardingProblem};

pub const DEFAULT_GROUP_SIZE: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("no feasible plan")]
    NoFeasiblePlan,
    #[error("instance exceeds oracle limits: {0}")]
    LimitsExceeded(String),
    #[error("invalid search input: {0}")]
    Input(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Data-parallel degrees dividing `global_batch` at which every chip type
/// admits at least one (pp, tp) pair; ascending.
pub fn enumerate_dp(global_batch: usize, cluster: &ClusterSpec) -> Vec<usize> {
    (1..=global_batch)
        .filter(|dp| global_batch % dp == 0)
        .filter(|&dp| {
            cluster
                .chip_types
                .iter()
                .all(|c| !feasible_tp_pp(c, dp).is_empty())
        })
        .collect()
}

/// `(pp, tp)` pairs with `pp * tp * dp == count`, tp ascending.
pub fn feasible_tp_pp(chip: &ChipTypeSpec, dp: usize) -> Vec<(usize, usize)> {
    if dp == 0 {
        return Vec::new();
    }
    chip.tp_candidates()
        .filter(|tp| chip.count % (tp * dp) == 0)
        .map(|tp| (chip.count / (tp * dp), tp))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOptions {
    /// Worker threads; results do not depend on this.
    pub workers: usize,
    /// Restrict the search to one data-parallel degree.
    pub fixed_dp: Option<usize>,
    /// `tp_nonincreasing[i] = Some(j)` requires `tp_i <= tp_j`.
    pub tp_nonincreasing: Vec<Option<usize>>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            fixed_dp: None,
            tp_nonincreasing: Vec::new(),
        }
    }
}

impl SearchOptions {
    pub fn with_workers(workers: usize) -> Self {
        Self {
            workers,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub dp_candidates: Vec<usize>,
    /// Complete (dp, pp, tp, recompute) configurations handed to the sharder.
    pub configurations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub plan: ParallelPlan,
    pub cost: CostBreakdown,
    pub stats: SearchStats,
}

/// A fully decided plan in compact form, ordered by the deterministic
/// tie-break: total, then dp, then TP vector, then number of recomputing
/// types, then recompute vector, then layer vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Candidate {
    pub total: f64,
    pub dp: usize,
    pub tp: Vec<usize>,
    pub pp: Vec<usize>,
    pub recompute: Vec<bool>,
    pub layers: Vec<usize>,
}

impl Candidate {
    pub fn cmp_key(&self, other: &Self) -> Ordering {
        let recomputes = |c: &Self| c.recompute.iter().filter(|&&r| r).count();
        self.total
            .total_cmp(&other.total)
            .then(self.dp.cmp(&other.dp))
            .then_with(|| self.tp.cmp(&other.tp))
            .then_with(|| recomputes(self).cmp(&recomputes(other)))
            .then_with(|| self.recompute.cmp(&other.recompute))
            .then_with(|| self.layers.cmp(&other.layers))
    }

    pub fn into_plan(self, cluster: &ClusterSpec, global_batch: usize) -> ParallelPlan {
        let assignments = cluster
            .chip_types
            .iter()
            .enumerate()
            .map(|(i, c)| TypeAssignment {
                chip: c.name.clone(),
                pp: self.pp[i],
                tp: self.tp[i],
                recompute: self.recompute[i],
                layers: self.layers[i],
            })
            .collect();
        ParallelPlan {
            dp: self.dp,
            microbatches: global_batch / self.dp,
            assignments,
        }
    }
}

pub(crate) fn keep_better(best: &mut Option<Candidate>, c: Candidate) {
    if best
        .as_ref()
        .map_or(true, |b| c.cmp_key(b) == Ordering::Less)
    {
        *best = Some(c);
    }
}

#[derive(Debug, Clone, Copy)]
struct Choice {
    pp: usize,
    tp: usize,
    recompute: bool,
    coeffs: LayerCoefficients,
}

/// Everything fixed for one data-parallel degree.
struct DpSpace<'a> {
    cluster: &'a ClusterSpec,
    workload: &'a WorkloadSpec,
    tp_nonincreasing: &'a [Option<usize>],
    dp: usize,
    choices: Vec<Vec<Choice>>,
    /// `sum_{j >= i}` of the smallest stage count available to type j.
    min_stages_from: Vec<usize>,
}

impl<'a> DpSpace<'a> {
    fn new(
        cluster: &'a ClusterSpec,
        profile: &ProfileTable,
        workload: &'a WorkloadSpec,
        tp_nonincreasing: &'a [Option<usize>],
        dp: usize,
    ) -> Self {
        let choices: Vec<Vec<Choice>> = cluster
            .chip_types
            .iter()
            .map(|chip| {
                let mut v = Vec::new();
                for (pp, tp) in feasible_tp_pp(chip, dp) {
                    for recompute in [false, true] {
                        // an absent profile entry makes the choice infeasible
                        if let Ok(coeffs) =
                            LayerCoefficients::lookup(profile, &chip.name, dp, tp, recompute)
                        {
                            v.push(Choice {
                                pp,
                                tp,
                                recompute,
                                coeffs,
                            });
                        }
                    }
                }
                v
            })
            .collect();
        let n = choices.len();
        let mut min_stages_from = vec![0usize; n + 1];
        for i in (0..n).rev() {
            let m = choices[i].iter().map(|c| c.pp).min().unwrap_or(usize::MAX);
            min_stages_from[i] = min_stages_from[i + 1].saturating_add(m);
        }
        Self {
            cluster,
            workload,
            tp_nonincreasing,
            dp,
            choices,
            min_stages_from,
        }
    }

    fn viable(&self) -> bool {
        self.min_stages_from[0] <= self.workload.total_layers
    }

    fn dfs(
        &self,
        chosen: &mut Vec<Choice>,
        stages: usize,
        best: &mut Option<Candidate>,
        shared: &SharedBound,
    ) {
        let depth = chosen.len();
        if depth == self.choices.len() {
            self.evaluate(chosen, best, shared);
            return;
        }
        for &c in &self.choices[depth] {
            if stages + c.pp + self.min_stages_from[depth + 1] > self.workload.total_layers {
                continue;
            }
            if let Some(Some(j)) = self.tp_nonincreasing.get(depth) {
                if *j < depth && c.tp > chosen[*j].tp {
                    continue;
                }
            }
            chosen.push(c);
            self.dfs(chosen, stages + c.pp, best, shared);
            chosen.pop();
        }
    }

    fn evaluate(&self, chosen: &[Choice], best: &mut Option<Candidate>, shared: &SharedBound) {
        shared.configurations.fetch_add(1, AtomicOrdering::Relaxed);
        let entries: Vec<_> = chosen
            .iter()
            .zip(&self.cluster.chip_types)
            .map(|(c, chip)| (c.pp, c.coeffs, chip.safe_memory))
            .collect();
        let microbatches = self.workload.global_batch / self.dp;
        let problem = ShardingProblem::from_parts(
            &entries,
            self.workload.total_layers,
            microbatches,
            self.workload.bubble_coefficient,
            self.workload.pipeline_overhead,
        );
        let local = best.as_ref().map_or(f64::INFINITY, |b| b.total);
        let bound = local.min(shared.get());
        let Some((lps, total)) = solve(&problem, bound) else {
            return;
        };
        let candidate = Candidate {
            total,
            dp: self.dp,
            tp: chosen.iter().map(|c| c.tp).collect(),
            pp: chosen.iter().map(|c| c.pp).collect(),
            recompute: chosen.iter().map(|c| c.recompute).collect(),
            layers: chosen.iter().zip(&lps).map(|(c, x)| c.pp * x).collect(),
        };
        keep_better(best, candidate);
        if let Some(b) = best {
            shared.offer(b.total);
        }
    }
}

/// Best total seen by any worker. Only used for pruning, which is strict,
/// so the final answer does not depend on the order workers publish in.
struct SharedBound {
    bits: AtomicU64,
    configurations: AtomicUsize,
}

impl SharedBound {
    fn new() -> Self {
        Self {
            bits: AtomicU64::new(f64::INFINITY.to_bits()),
            configurations: AtomicUsize::new(0),
        }
    }

    fn get(&self) -> f64 {
        f64::from_bits(self.bits.load(AtomicOrdering::Relaxed))
    }

    fn offer(&self, total: f64) {
        // non-negative floats order like their bit patterns
        if total >= 0.0 {
            self.bits.fetch_min(total.to_bits(), AtomicOrdering::Relaxed);
        }
    }
}

/// Searches with default options (single worker, all dp candidates).
pub fn search_plan(
    cluster: &ClusterSpec,
    profile: &ProfileTable,
    workload: &WorkloadSpec,
) -> Result<SearchResult, SearchError> {
    search_plan_with(cluster, profile, workload, &SearchOptions::default())
}

pub fn search_plan_with(
    cluster: &ClusterSpec,
    profile: &ProfileTable,
    workload: &WorkloadSpec,
    options: &SearchOptions,
) -> Result<SearchResult, SearchError> {
    if cluster.is_empty() {
        return Err(SearchError::Input("empty cluster".into()));
    }
    if workload.global_batch == 0 || workload.total_layers == 0 {
        return Err(SearchError::Input("empty workload".into()));
    }
    let dps: Vec<usize> = enumerate_dp(workload.global_batch, cluster)
        .into_iter()
        .filter(|dp| options.fixed_dp.map_or(true, |f| f == *dp))
        .collect();
    let spaces: Vec<DpSpace> = dps
        .iter()
        .map(|&dp| DpSpace::new(cluster, profile, workload, &options.tp_nonincreasing, dp))
        .filter(DpSpace::viable)
        .collect();
    let tasks: Vec<(usize, Choice)> = spaces
        .iter()
        .enumerate()
        .flat_map(|(s, space)| space.choices[0].iter().map(move |&c| (s, c)))
        .collect();

    let shared = SharedBound::new();
    let run = |&(s, first): &(usize, Choice)| {
        let space = &spaces[s];
        let mut best = None;
        if first.pp + space.min_stages_from[1] <= workload.total_layers {
            let mut chosen = vec![first];
            space.dfs(&mut chosen, first.pp, &mut best, &shared);
        }
        best
    };

    let results: Vec<Option<Candidate>> = if options.workers <= 1 {
        tasks.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| SearchError::Input(format!("thread pool: {e}")))?;
        pool.install(|| tasks.par_iter().map(run).collect())
    };

    let mut best = None;
    for c in results.into_iter().flatten() {
        keep_better(&mut best, c);
    }
    let best = best.ok_or(SearchError::NoFeasiblePlan)?;
    let total = best.total;
    let plan = best.into_plan(cluster, workload.global_batch);
    let cost = estimate_iteration_time(&plan, profile, workload)?;
    debug_assert_eq!(cost.total, total);
    Ok(SearchResult {
        plan,
        cost,
        stats: SearchStats {
            dp_candidates: dps,
            configurations: shared.configurations.into_inner(),
        },
    })
}

/// A cluster whose large chip types are split into fixed-size groups, each
/// treated as its own type with the base type's profile.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedCluster {
    pub cluster: ClusterSpec,
    pub profile: ProfileTable,
    /// Original chip-type name of each group.
    pub base: Vec<String>,
    /// Previous group of the same base type.
    pub predecessor: Vec<Option<usize>>,
}

impl GroupedCluster {
    pub fn is_trivial(&self, original: &ClusterSpec) -> bool {
        self.cluster.len() == original.len()
    }
}

/// Splits every chip type with more than `group_size` chips into groups of
/// `group_size`; a remainder forms a final smaller group. Group names are
/// `<type>.g<k>` with `k` zero-padded.
pub fn group_cluster(
    cluster: &ClusterSpec,
    profile: &ProfileTable,
    group_size: usize,
) -> Result<GroupedCluster, SearchError> {
    if group_size == 0 {
        return Err(SearchError::Input("group size must be positive".into()));
    }
    let mut chip_types = Vec::new();
    let mut grouped_profile = profile.clone();
    let mut base = Vec::new();
    let mut predecessor = Vec::new();
    for chip in &cluster.chip_types {
        if chip.count <= group_size {
            chip_types.push(chip.clone());
            base.push(chip.name.clone());
            predecessor.push(None);
            continue;
        }
        let mut sizes = vec![group_size; chip.count / group_size];
        if chip.count % group_size != 0 {
            sizes.push(chip.count % group_size);
        }
        let width = (sizes.len() - 1).to_string().len();
        for (k, &size) in sizes.iter().enumerate() {
            let name = format!("{}.g{:0width$}", chip.name, k);
            if !grouped_profile.alias(&name, &chip.name) {
                return Err(ProfileError::Invalid {
                    chip: chip.name.clone(),
                    msg: "no profile for chip type".into(),
                }
                .into());
            }
            predecessor.push((k > 0).then(|| chip_types.len() - 1));
            base.push(chip.name.clone());
            chip_types.push(ChipTypeSpec {
                name,
                count: size,
                ..chip.clone()
            });
        }
    }
    Ok(GroupedCluster {
        // Keeps the validated order of `cluster`; groups follow their base type.
        cluster: ClusterSpec::new(chip_types),
        profile: grouped_profile,
        base,
        predecessor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStage {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageResult {
    pub stage1: SearchResult,
    /// `None` when grouping left every type whole.
    pub stage2: Option<Result<SearchResult, SearchError>>,
    pub grouped: GroupedCluster,
    pub chosen: SearchStage,
}

impl TwoStageResult {
    pub fn best(&self) -> &SearchResult {
        match (&self.chosen, &self.stage2) {
            (SearchStage::Second, Some(Ok(r))) => r,
            _ => &self.stage1,
        }
    }

    /// The cluster and profile the best plan refers to.
    pub fn best_cluster(&self) -> Option<(&ClusterSpec, &ProfileTable)> {
        (self.chosen == SearchStage::Second).then_some((&self.grouped.cluster, &self.grouped.profile))
    }
}

/// Stage 1 fixes dp with a whole-type search; stage 2 re-searches at that dp
/// with each type split into groups of `group_size`, requiring TP to be
/// non-increasing along the groups of one type. Returns the cheaper plan;
/// ties keep the stage-1 plan.
pub fn two_stage_search(
    cluster: &ClusterSpec,
    profile: &ProfileTable,
    workload: &WorkloadSpec,
    group_size: usize,
    workers: usize,
) -> Result<TwoStageResult, SearchError> {
    let stage1 = search_plan_with(cluster, profile, workload, &SearchOptions::with_workers(workers))?;
    let grouped = group_cluster(cluster, profile, group_size)?;
    if grouped.is_trivial(cluster) {
        return Ok(TwoStageResult {
            stage1,
            stage2: None,
            grouped,
            chosen: SearchStage::First,
        });
    }
    let options = SearchOptions {
        workers,
        fixed_dp: Some(stage1.plan.dp),
        tp_nonincreasing: grouped.predecessor.clone(),
    };
    let stage2 = search_plan_with(&grouped.cluster, &grouped.profile, workload, &options);
    let chosen = match &stage2 {
        Ok(r) if r.cost.total < stage1.cost.total => SearchStage::Second,
        _ => SearchStage::First,
    };
    Ok(TwoStageResult {
        stage1,
        stage2: Some(stage2),
        grouped,
        chosen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::tests::chip;
    use crate::cost::check_plan_feasibility;
    use crate::presets::{self, GIB};
    use crate::profile::{synthesize_profile, SyntheticProfileParams};

    fn params(flops: f64, act: u64, model: u64, dp_values: Vec<usize>) -> SyntheticProfileParams {
        SyntheticProfileParams {
            flops_ratio: flops,
            base_layer_seconds: 0.01,
            tp_efficiency: [(1, 1.0), (2, 0.9), (4, 0.8), (8, 0.65)].into_iter().collect(),
            param_grad_bytes: model,
            optimizer_bytes: 3 * model,
            activation_bytes: act,
            recompute_keep_fraction: 0.1,
            update_seconds: 0.002,
            grad_sync_seconds: 0.001,
            dp_values,
        }
    }

    #[test]
    fn dp_candidates() {
        let cluster = ClusterSpec::new(vec![chip("A", 1024, 64, 8)]).validate().unwrap();
        assert_eq!(enumerate_dp(8, &cluster), [1, 2, 4, 8]);
        assert_eq!(enumerate_dp(7, &ClusterSpec::new(vec![chip("A", 7, 64, 1)])), [1, 7]);
        let c256 = ClusterSpec::new(vec![chip("A", 256, 64, 8)]).validate().unwrap();
        let dps = enumerate_dp(512, &c256);
        assert!(dps.iter().all(|&d| d <= 256));
        assert_eq!(dps, [1, 2, 4, 8, 16, 32, 64, 128, 256]);
    }

    #[test]
    fn tp_pp_pairs() {
        let a = presets::calibrated_chip('A', 256);
        assert_eq!(feasible_tp_pp(&a, 4), [(64, 1), (32, 2), (16, 4), (8, 8)]);
        assert!(feasible_tp_pp(&a, 3).is_empty());
        let mut capped = a.clone();
        capped.tp_max = 4;
        assert_eq!(feasible_tp_pp(&capped, 4), [(64, 1), (32, 2), (16, 4)]);
    }

    fn homogeneous() -> (ClusterSpec, ProfileTable) {
        let cluster = ClusterSpec::new(vec![chip("X", 16, 64, 4)]).validate().unwrap();
        let mut profile = ProfileTable::new();
        profile.insert_chip(
            "X",
            synthesize_profile(&params(1.0, GIB / 4, GIB, presets::divisors(16))).unwrap(),
        );
        (cluster, profile)
    }

    #[test]
    fn homogeneous_plan_is_uniform_1f1b() {
        let (cluster, profile) = homogeneous();
        let w = WorkloadSpec::new(24, 16);
        let r = search_plan(&cluster, &profile, &w).unwrap();
        let a = &r.plan.assignments[0];
        assert_eq!(a.layers, 24);
        assert_eq!(a.layers % a.pp, 0);
        let comp = r.cost.stages[0].compute_time;
        let upd = r.cost.stages[0].update_time;
        let closed = (r.plan.microbatches + a.pp - 1) as f64 * comp + upd;
        assert!((r.cost.total - closed).abs() <= 1e-12 * closed);
        assert!(check_plan_feasibility(&r.plan, &cluster, &profile, &w).is_feasible());
    }

    #[test]
    fn impossible_memory() {
        let cluster = ClusterSpec::new(vec![chip("X", 4, 1, 4)]).validate().unwrap();
        let mut profile = ProfileTable::new();
        profile.insert_chip(
            "X",
            synthesize_profile(&params(1.0, GIB, 8 * GIB, presets::divisors(4))).unwrap(),
        );
        let w = WorkloadSpec::new(8, 4);
        assert_eq!(search_plan(&cluster, &profile, &w), Err(SearchError::NoFeasiblePlan));
    }

    #[test]
    fn absent_profile_entries_are_skipped() {
        let (cluster, mut profile) = homogeneous();
        let mut p = profile.chip("X").unwrap().clone();
        p.update.retain(|&(dp, _), _| dp == 2);
        profile.insert_chip("X", p);
        let r = search_plan(&cluster, &profile, &WorkloadSpec::new(24, 16)).unwrap();
        assert_eq!(r.plan.dp, 2);
    }

    #[test]
    fn worker_count_does_not_change_result() {
        let (cluster, profile) = presets::three_type_cluster();
        let w = presets::reference_workload(2 * 1024 * 1024);
        let one = search_plan_with(&cluster, &profile, &w, &SearchOptions::with_workers(1)).unwrap();
        let four = search_plan_with(&cluster, &profile, &w, &SearchOptions::with_workers(4)).unwrap();
        assert_eq!(one.plan, four.plan);
        assert_eq!(one.cost, four.cost);
    }

    #[test]
    fn grouping_names_and_order() {
        let (cluster, profile) = presets::calibrated_instance(&[('A', 384), ('B', 100)]);
        let g = group_cluster(&cluster, &profile, 128).unwrap();
        let names: Vec<_> = g.cluster.chip_types.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["Chip-A.g0", "Chip-A.g1", "Chip-A.g2", "Chip-B"]);
        assert_eq!(g.predecessor, [None, Some(0), Some(1), None]);
        assert_eq!(g.cluster.clone().validate().unwrap(), g.cluster);
        let g = group_cluster(&cluster, &profile, 100).unwrap();
        assert_eq!(g.cluster.chip_types[3].count, 84);
        assert!(group_cluster(&cluster, &profile, 0).is_err());
    }

    #[test]
    fn degenerate_grouping_matches_single_stage() {
        let (cluster, profile) = homogeneous();
        let w = WorkloadSpec::new(24, 16);
        let r = two_stage_search(&cluster, &profile, &w, 16, 1).unwrap();
        assert!(r.stage2.is_none());
        assert_eq!(r.best(), &search_plan(&cluster, &profile, &w).unwrap());
    }

    #[test]
    fn two_stage_monotone_tp() {
        // Memory-tight single type: the head group keeps more microbatches in
        // flight and needs a wider TP than the tail group.
        let cluster = ClusterSpec::new(vec![chip("X", 32, 16, 8)]).validate().unwrap();
        let mut profile = ProfileTable::new();
        profile.insert_chip(
            "X",
            synthesize_profile(&params(1.0, 2 * GIB, GIB, presets::divisors(32))).unwrap(),
        );
        let w = WorkloadSpec::new(32, 16);
        let r = two_stage_search(&cluster, &profile, &w, 16, 1).unwrap();
        let stage2 = r.stage2.clone().unwrap().unwrap();
        let a = &stage2.plan.assignments;
        assert!(a[0].tp >= a[1].tp);
        assert!(r.best().cost.total <= r.stage1.cost.total);
        let g = &r.grouped;
        assert!(check_plan_feasibility(&stage2.plan, &g.cluster, &g.profile, &w).is_feasible());
    }
}
