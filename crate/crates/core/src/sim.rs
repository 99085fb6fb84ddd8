//! Discrete-event simulation of one 1F1B training iteration.
//!
//! Stage `s` of `p` runs `min(p - s, b)` warmup forwards, then alternates one
//! forward with one backward, then drains the remaining backwards. A stage
//! runs one compute event at a time in that fixed order. Transfers between
//! stages are separate events that delay the consumer but never occupy a
//! stage. Each stage starts its optimizer update right after its own last
//! backward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterSpec, WorkloadSpec};
use crate::comm::{p2p_transfer_time, resharding_time, CommConfig, CommError};
use crate::cost::{check_plan_feasibility, Violation};
use crate::plan::ParallelPlan;
use crate::profile::{ProfileError, ProfileTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("plan has no microbatches")]
    NoMicrobatches,
    #[error("infeasible plan: {0}")]
    Infeasible(Violation),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Comm(#[from] CommError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Forward,
    Recompute,
    Backward,
    TransferFwd,
    TransferBwd,
    Update,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Forward => "forward",
            EventKind::Recompute => "recompute",
            EventKind::Backward => "backward",
            EventKind::TransferFwd => "transfer_fwd",
            EventKind::TransferBwd => "transfer_bwd",
            EventKind::Update => "update",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "forward" => EventKind::Forward,
            "recompute" => EventKind::Recompute,
            "backward" => EventKind::Backward,
            "transfer_fwd" => EventKind::TransferFwd,
            "transfer_bwd" => EventKind::TransferBwd,
            "update" => EventKind::Update,
            _ => return None,
        })
    }

    pub fn is_transfer(self) -> bool {
        matches!(self, EventKind::TransferFwd | EventKind::TransferBwd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// 1-based stage; the sending stage for transfers.
    pub stage: usize,
    /// 0-based microbatch; `None` for updates.
    pub microbatch: Option<usize>,
    pub kind: EventKind,
    pub start: f64,
    pub end: f64,
}

impl TraceEvent {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub events: Vec<TraceEvent>,
    pub iteration_time: f64,
    pub peak_in_flight: Vec<usize>,
    pub busy_time: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub bubble_fraction: Vec<f64>,
    pub peak_in_flight: Vec<usize>,
    pub iteration_time: f64,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    F(usize),
    B(usize),
}

/// 1F1B operation order of stage `s` (1-based) out of `p`.
fn stage_ops(p: usize, s: usize, b: usize) -> Vec<Op> {
    let warmup = (p - s).min(b);
    let mut ops: Vec<Op> = (0..warmup).map(Op::F).collect();
    for i in 0..b - warmup {
        ops.push(Op::F(warmup + i));
        ops.push(Op::B(i));
    }
    ops.extend((b - warmup..b).map(Op::B));
    ops
}

struct StageTimes {
    fwd: f64,
    bwd: f64,
    recomp: f64,
    update: f64,
}

/// Simulates one iteration. The plan must be feasible on `cluster`.
pub fn simulate_iteration(
    plan: &ParallelPlan,
    profile: &ProfileTable,
    cluster: &ClusterSpec,
    comm: &CommConfig,
) -> Result<ScheduleTrace, SimError> {
    let b = plan.microbatches;
    if b == 0 {
        return Err(SimError::NoMicrobatches);
    }
    comm.validate()?;
    let workload = WorkloadSpec::new(plan.total_layers(), plan.dp * b);
    if let Some(v) = check_plan_feasibility(plan, cluster, profile, &workload).violation {
        return Err(SimError::Infeasible(v));
    }

    let stages = plan.stages();
    let p = stages.len();
    let mut times = Vec::with_capacity(p);
    for s in &stages {
        let a = &plan.assignments[s.assignment];
        let e = profile.lookup(&a.chip, plan.dp, a.tp, a.recompute)?;
        let lps = a.layers_per_stage() as f64;
        times.push(StageTimes {
            fwd: lps * e.t_fwd,
            bwd: lps * e.t_bwd,
            recomp: if a.recompute { lps * e.t_recomp } else { 0.0 },
            update: lps * e.t_update,
        });
    }
    // link[i]: effective transfer time between stage i and i + 1 (0-based)
    let hidden = 1.0 - comm.overlap_fraction;
    let mut link = Vec::with_capacity(p.saturating_sub(1));
    for w in stages.windows(2) {
        let (src, dst) = (&plan.assignments[w[0].assignment], &plan.assignments[w[1].assignment]);
        let raw = if src.chip == dst.chip && src.tp == dst.tp {
            p2p_transfer_time(comm.activation_bytes, &comm.link)
        } else {
            let dst_chip = cluster.get(&dst.chip).expect("checked by feasibility");
            resharding_time(
                comm.activation_bytes,
                src.tp,
                dst.tp,
                dst_chip.nic_count_per_node,
                &comm.link,
                dst_chip.intra_node_bandwidth,
                comm.method,
            )?
        };
        link.push(hidden * raw);
    }

    let ops: Vec<Vec<Op>> = (1..=p).map(|s| stage_ops(p, s, b)).collect();
    let mut next = vec![0usize; p];
    let mut free = vec![0.0f64; p];
    let mut fwd_end = vec![vec![f64::NAN; b]; p];
    let mut bwd_end = vec![vec![f64::NAN; b]; p];
    let mut events = Vec::with_capacity(p * (3 * b + 2 * b + 1));
    let mut remaining: usize = ops.iter().map(Vec::len).sum();

    while remaining > 0 {
        let mut progressed = false;
        for s in 0..p {
            while let Some(&op) = ops[s].get(next[s]) {
                let ready = match op {
                    Op::F(_) if s == 0 => Some(0.0),
                    Op::F(m) => {
                        let e = fwd_end[s - 1][m];
                        (!e.is_nan()).then(|| e + link[s - 1])
                    }
                    Op::B(m) if s == p - 1 => Some(fwd_end[s][m]),
                    Op::B(m) => {
                        let e = bwd_end[s + 1][m];
                        (!e.is_nan()).then(|| e + link[s])
                    }
                };
                let Some(ready) = ready else { break };
                let mut t = free[s].max(ready);
                let stage = s + 1;
                match op {
                    Op::F(m) => {
                        let end = t + times[s].fwd;
                        events.push(ev(stage, Some(m), EventKind::Forward, t, end));
                        fwd_end[s][m] = end;
                        if s + 1 < p {
                            events.push(ev(stage, Some(m), EventKind::TransferFwd, end, end + link[s]));
                        }
                        t = end;
                    }
                    Op::B(m) => {
                        if times[s].recomp > 0.0 {
                            let end = t + times[s].recomp;
                            events.push(ev(stage, Some(m), EventKind::Recompute, t, end));
                            t = end;
                        }
                        let end = t + times[s].bwd;
                        events.push(ev(stage, Some(m), EventKind::Backward, t, end));
                        bwd_end[s][m] = end;
                        if s > 0 {
                            events.push(ev(stage, Some(m), EventKind::TransferBwd, end, end + link[s - 1]));
                        }
                        t = end;
                    }
                }
                free[s] = t;
                next[s] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        assert!(progressed, "1F1B dependency graph is acyclic");
    }

    let mut busy_time = vec![0.0; p];
    for s in 0..p {
        let end = free[s] + times[s].update;
        events.push(ev(s + 1, None, EventKind::Update, free[s], end));
    }
    for e in &events {
        if !e.kind.is_transfer() {
            busy_time[e.stage - 1] += e.duration();
        }
    }
    let iteration_time = events.iter().map(|e| e.end).fold(0.0, f64::max);
    let peak_in_flight = ops
        .iter()
        .map(|o| {
            let (mut cur, mut peak) = (0usize, 0usize);
            for op in o {
                match op {
                    Op::F(_) => {
                        cur += 1;
                        peak = peak.max(cur);
                    }
                    Op::B(_) => cur -= 1,
                }
            }
            peak
        })
        .collect();
    Ok(ScheduleTrace {
        events,
        iteration_time,
        peak_in_flight,
        busy_time,
    })
}

fn ev(stage: usize, microbatch: Option<usize>, kind: EventKind, start: f64, end: f64) -> TraceEvent {
    TraceEvent {
        stage,
        microbatch,
        kind,
        start,
        end,
    }
}

/// Bubble fractions and in-flight peaks recomputed from the events alone.
pub fn trace_metrics(trace: &ScheduleTrace) -> TraceMetrics {
    let p = trace
        .events
        .iter()
        .map(|e| e.stage)
        .max()
        .unwrap_or(0)
        .max(trace.busy_time.len());
    let mut busy = vec![0.0; p];
    let mut per_stage: Vec<Vec<&TraceEvent>> = vec![Vec::new(); p];
    for e in &trace.events {
        if !e.kind.is_transfer() {
            busy[e.stage - 1] += e.duration();
            per_stage[e.stage - 1].push(e);
        }
    }
    let peak_in_flight = per_stage
        .iter_mut()
        .map(|evs| {
            evs.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.kind.cmp(&b.kind)));
            let (mut cur, mut peak) = (0i64, 0i64);
            for e in evs.iter() {
                match e.kind {
                    EventKind::Forward => {
                        cur += 1;
                        peak = peak.max(cur);
                    }
                    EventKind::Backward => cur -= 1,
                    _ => {}
                }
            }
            peak as usize
        })
        .collect();
    let t = trace.iteration_time;
    TraceMetrics {
        bubble_fraction: busy
            .iter()
            .map(|&x| if t > 0.0 { 1.0 - x / t } else { 0.0 })
            .collect(),
        peak_in_flight,
        iteration_time: t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::tests::chip;
    use crate::comm::{LinkMode, LinkModel, ReshardMethod};
    use crate::cost::estimate_iteration_time;
    use crate::plan::TypeAssignment;
    use crate::presets::GIB;
    use crate::profile::{ChipProfile, ComputeEntry, UpdateEntry};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
    }

    fn chip_profile(f: f64, bw: f64, rc: f64, upd: f64, dp: usize, tps: &[usize]) -> ChipProfile {
        let mut p = ChipProfile::default();
        for &tp in tps {
            p.compute.insert(
                tp,
                ComputeEntry {
                    t_fwd: f / tp as f64,
                    t_bwd: bw / tp as f64,
                    t_recomp: rc / tp as f64,
                    mem_act: 1 << 20,
                    mem_act_recompute: 1 << 16,
                },
            );
            p.update.insert(
                (dp, tp),
                UpdateEntry {
                    t_update: upd,
                    mem_model: 1 << 20,
                },
            );
        }
        p
    }

    fn assign(chip: &str, pp: usize, tp: usize, recompute: bool, layers: usize) -> TypeAssignment {
        TypeAssignment {
            chip: chip.into(),
            pp,
            tp,
            recompute,
            layers,
        }
    }

    fn homogeneous(p: usize, b: usize, upd: f64) -> (ParallelPlan, ProfileTable, ClusterSpec) {
        let mut profile = ProfileTable::new();
        profile.insert_chip("X", chip_profile(1e-3, 2e-3, 1e-3, upd, 1, &[1]));
        let cluster = ClusterSpec::new(vec![chip("X", p, 64, 1)]).validate().unwrap();
        let plan = ParallelPlan {
            dp: 1,
            microbatches: b,
            assignments: vec![assign("X", p, 1, false, 2 * p)],
        };
        (plan, profile, cluster)
    }

    #[test]
    fn homogeneous_closed_form() {
        for (p, b) in [(1, 1), (2, 2), (4, 8), (4, 3), (8, 32)] {
            let (plan, profile, cluster) = homogeneous(p, b, 5e-4);
            let t = simulate_iteration(&plan, &profile, &cluster, &CommConfig::zero()).unwrap();
            let closed = (b + p - 1) as f64 * 2.0 * 3e-3 + 2.0 * 5e-4;
            assert!(close(t.iteration_time, closed), "{p} {b}: {} vs {closed}", t.iteration_time);
            let w = WorkloadSpec::new(2 * p, b);
            assert!(close(estimate_iteration_time(&plan, &profile, &w).unwrap().total, closed));
        }
    }

    #[test]
    fn single_microbatch_chain() {
        let mut profile = ProfileTable::new();
        profile.insert_chip("A", chip_profile(1e-3, 2e-3, 1e-3, 4e-3, 1, &[1]));
        profile.insert_chip("B", chip_profile(3e-3, 5e-3, 1e-3, 1e-3, 1, &[1]));
        let cluster = ClusterSpec::new(vec![chip("A", 2, 64, 1), chip("B", 1, 32, 1)])
            .validate()
            .unwrap();
        let plan = ParallelPlan {
            dp: 1,
            microbatches: 1,
            assignments: vec![assign("A", 2, 1, true, 4), assign("B", 1, 1, false, 1)],
        };
        let t = simulate_iteration(&plan, &profile, &cluster, &CommConfig::zero()).unwrap();
        let fwd = 2.0 * 2e-3 + 3e-3;
        let bwd = 2.0 * (2.0 * 3e-3) + 5e-3;
        assert!(close(t.iteration_time, fwd + bwd + 2.0 * 4e-3));
    }

    #[test]
    fn full_overlap_hides_transfers() {
        let (plan, profile, cluster) = homogeneous(4, 8, 1e-4);
        let mut comm = CommConfig {
            link: LinkModel {
                mode: LinkMode::DeviceDirectRdma,
                base_latency: 1e-3,
                bandwidth: 1e9,
                staging_penalty: 0.0,
            },
            method: ReshardMethod::SendRecvAllGather,
            activation_bytes: 1 << 20,
            overlap_fraction: 1.0,
        };
        let zero = simulate_iteration(&plan, &profile, &cluster, &CommConfig::zero()).unwrap();
        let hidden = simulate_iteration(&plan, &profile, &cluster, &comm).unwrap();
        assert_eq!(zero.iteration_time, hidden.iteration_time);
        comm.overlap_fraction = 0.5;
        let half = simulate_iteration(&plan, &profile, &cluster, &comm).unwrap();
        assert!(half.iteration_time > zero.iteration_time);
        comm.overlap_fraction = 1.5;
        assert!(simulate_iteration(&plan, &profile, &cluster, &comm).is_err());
    }

    #[test]
    fn bubble_fraction_closed_form() {
        let mut prev = 1.0;
        for b in [1, 2, 4, 8, 16, 64] {
            let (plan, profile, cluster) = homogeneous(4, b, 0.0);
            let t = simulate_iteration(&plan, &profile, &cluster, &CommConfig::zero()).unwrap();
            let m = trace_metrics(&t);
            let expect = 3.0 / (b + 3) as f64;
            for f in &m.bubble_fraction {
                assert!((f - expect).abs() < 1e-12, "{f} vs {expect}");
            }
            assert!(m.bubble_fraction[0] < prev);
            prev = m.bubble_fraction[0];
        }
    }

    #[test]
    fn in_flight_matches_memory_model() {
        for (p, b) in [(4, 2), (4, 8), (6, 6), (1, 3)] {
            let (plan, profile, cluster) = homogeneous(p, b, 0.0);
            let t = simulate_iteration(&plan, &profile, &cluster, &CommConfig::zero()).unwrap();
            let m = trace_metrics(&t);
            for s in 1..=p {
                assert_eq!(t.peak_in_flight[s - 1], plan.in_flight(s));
                assert_eq!(m.peak_in_flight[s - 1], plan.in_flight(s));
            }
        }
    }

    #[test]
    fn two_stage_event_counts() {
        let (plan, profile, cluster) = homogeneous(2, 2, 1e-4);
        let t = simulate_iteration(&plan, &profile, &cluster, &CommConfig::zero()).unwrap();
        let count = |k: EventKind| t.events.iter().filter(|e| e.kind == k).count();
        assert_eq!(count(EventKind::Forward) + count(EventKind::Backward), 8);
        assert_eq!(count(EventKind::TransferFwd) + count(EventKind::TransferBwd), 4);
        assert_eq!(count(EventKind::Update), 2);
        assert!(t.events.iter().all(|e| e.end >= e.start));
    }

    #[test]
    fn rejects_infeasible_plan() {
        let (mut plan, profile, cluster) = homogeneous(2, 2, 0.0);
        plan.assignments[0].layers = 2 * 64 * GIB as usize;
        assert!(matches!(
            simulate_iteration(&plan, &profile, &cluster, &CommConfig::zero()),
            Err(SimError::Infeasible(_))
        ));
    }
}
