use heteroplan_core::comm::{default_link, CommConfig, LinkMode, ReshardMethod};
use heteroplan_core::instances::random_instance;
use heteroplan_core::io;
use heteroplan_core::plan::{ParallelPlan, TypeAssignment};
use heteroplan_core::presets;
use heteroplan_core::trace::{read_trace, COMPUTE_TID, TRANSFER_TID};
use heteroplan_core::*;
use proptest::prelude::*;

#[test]
fn search_simulate_export_round_trip() {
    let (cluster, profile) = presets::calibrated_instance(&[('A', 64), ('C', 64)]);
    let w = WorkloadSpec::new(48, 32);
    let r = search_plan(&cluster, &profile, &w).unwrap();
    assert!(check_plan_feasibility(&r.plan, &cluster, &profile, &w).is_feasible());

    let dir = tempfile::tempdir().unwrap();
    let plan_path = dir.path().join("plan.json");
    io::save(&plan_path, &r.plan).unwrap();
    let plan = io::load_plan(&plan_path).unwrap();
    assert_eq!(plan, r.plan);

    let comm = CommConfig {
        link: default_link(LinkMode::DeviceDirectRdma),
        method: ReshardMethod::SendRecvAllGather,
        activation_bytes: 64 << 20,
        overlap_fraction: 0.5,
    };
    let free = simulate_iteration(&plan, &profile, &cluster, &CommConfig::zero()).unwrap();
    let costly = simulate_iteration(&plan, &profile, &cluster, &comm).unwrap();
    assert!(costly.iteration_time >= free.iteration_time);

    let trace_path = dir.path().join("trace.json");
    export_trace(&costly, &trace_path).unwrap();
    let records = read_trace(&trace_path).unwrap();
    assert_eq!(records.len(), costly.events.len());
    assert!(records.iter().all(|r| r.ph == "X" && r.dur >= 0.0));
    assert!(records.iter().all(|r| r.tid == COMPUTE_TID || r.tid == TRANSFER_TID));
}

#[test]
fn two_stage_two_microbatch_trace_counts() {
    let (cluster, profile) = presets::calibrated_instance(&[('B', 8)]);
    let plan = ParallelPlan {
        dp: 1,
        microbatches: 2,
        assignments: vec![TypeAssignment {
            chip: "Chip-B".into(),
            pp: 2,
            tp: 4,
            recompute: true,
            layers: 4,
        }],
    };
    let comm = CommConfig {
        link: default_link(LinkMode::CpuMediatedTcp),
        method: ReshardMethod::Naive,
        activation_bytes: 1 << 20,
        overlap_fraction: 0.0,
    };
    let trace = simulate_iteration(&plan, &profile, &cluster, &comm).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    export_trace(&trace, &path).unwrap();
    let records = read_trace(&path).unwrap();
    let count = |prefix: &str| records.iter().filter(|r| r.name.starts_with(prefix)).count();
    assert_eq!(count("forward:"), 4);
    assert_eq!(count("recompute:"), 4);
    assert_eq!(count("backward:"), 4);
    assert_eq!(count("transfer_fwd:"), 2);
    assert_eq!(count("transfer_bwd:"), 2);
    assert_eq!(count("update"), 2);
    for r in &records {
        assert!(r.pid == 1 || r.pid == 2);
    }
}

#[test]
fn simulated_searched_plans_are_well_formed() {
    for seed in 0..40 {
        let i = random_instance(seed);
        let Ok(r) = search_plan(&i.cluster, &i.profile, &i.workload) else {
            continue;
        };
        let t = simulate_iteration(&r.plan, &i.profile, &i.cluster, &CommConfig::zero()).unwrap();
        let m = trace_metrics(&t);
        assert_eq!(m.peak_in_flight.len(), r.plan.num_stages());
        assert!(m.bubble_fraction.iter().all(|b| (0.0..1.0).contains(b)));
        assert!(t.iteration_time > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn searched_plans_are_consistent(seed in 0u64..5000) {
        let i = random_instance(seed);
        if let Ok(r) = search_plan(&i.cluster, &i.profile, &i.workload) {
            let f = check_plan_feasibility(&r.plan, &i.cluster, &i.profile, &i.workload);
            prop_assert!(f.is_feasible());
            let again = estimate_iteration_time(&r.plan, &i.profile, &i.workload).unwrap();
            prop_assert_eq!(again.total, r.cost.total);
            prop_assert_eq!(r.plan.total_layers(), i.workload.total_layers);
            prop_assert_eq!(r.plan.dp * r.plan.microbatches, i.workload.global_batch);
        }
    }

    #[test]
    fn more_workers_same_answer(seed in 0u64..5000) {
        let i = random_instance(seed);
        let one = search_plan_with(&i.cluster, &i.profile, &i.workload, &SearchOptions::with_workers(1));
        let four = search_plan_with(&i.cluster, &i.profile, &i.workload, &SearchOptions::with_workers(4));
        match (one, four) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.plan, b.plan);
                prop_assert_eq!(a.cost.total, b.cost.total);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "feasibility differs"),
        }
    }
}
