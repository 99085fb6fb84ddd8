//! Synthetic clusters calibrated to the four accelerator types A-D.
//!
//! Relative FP16 throughput is placed inside each type's published range
//! (A, B in (0.5, 1.0)x, C in (0, 0.5)x, D in (1.5, 2.0)x of an A100) and
//! the per-layer model numbers approximate a 96-layer, 100B-parameter
//! decoder at sequence length 4096. All values here are synthetic.

use std::collections::BTreeMap;

use crate::cluster::{ChipTypeSpec, ClusterSpec, WorkloadSpec};
use crate::profile::{synthesize_profile, ProfileTable, SyntheticProfileParams};

pub const GIB: u64 = 1 << 30;

/// Layers of the 100B reference model.
pub const REFERENCE_LAYERS: usize = 96;
pub const REFERENCE_SEQUENCE_LENGTH: usize = 4096;

const PARAMS_PER_LAYER: f64 = 1.04e9;

struct ChipRow {
    letter: char,
    flops_ratio: f64,
    memory_gib: u64,
    chips_per_node: usize,
    affinity: f64,
    non_affinity: f64,
    tp_efficiency: [f64; 4],
}

const ROWS: [ChipRow; 4] = [
    ChipRow {
        letter: 'A',
        flops_ratio: 0.75,
        memory_gib: 96,
        chips_per_node: 16,
        affinity: 9.56e9,
        non_affinity: 5.51e9,
        tp_efficiency: [1.0, 0.95, 0.9, 0.8],
    },
    ChipRow {
        letter: 'B',
        flops_ratio: 0.8,
        memory_gib: 64,
        chips_per_node: 8,
        affinity: 9.56e9,
        non_affinity: 5.51e9,
        tp_efficiency: [1.0, 0.95, 0.9, 0.75],
    },
    ChipRow {
        letter: 'C',
        flops_ratio: 0.3,
        memory_gib: 32,
        chips_per_node: 16,
        affinity: 9.56e9,
        non_affinity: 5.51e9,
        tp_efficiency: [1.0, 0.95, 0.88, 0.75],
    },
    ChipRow {
        letter: 'D',
        flops_ratio: 1.75,
        memory_gib: 32,
        chips_per_node: 8,
        affinity: 9.91e9,
        non_affinity: 5.23e9,
        tp_efficiency: [1.0, 0.92, 0.85, 0.7],
    },
];

fn row(letter: char) -> &'static ChipRow {
    ROWS.iter()
        .find(|r| r.letter == letter)
        .unwrap_or_else(|| panic!("no calibrated chip `{letter}`"))
}

/// Chip-type spec for one of `'A'..='D'` with `count` chips.
pub fn calibrated_chip(letter: char, count: usize) -> ChipTypeSpec {
    let r = row(letter);
    ChipTypeSpec {
        name: format!("Chip-{letter}"),
        count,
        safe_memory: r.memory_gib * GIB,
        tp_max: 8,
        chips_per_node: r.chips_per_node,
        nic_count_per_node: 8,
        affinity_bandwidth: r.affinity,
        non_affinity_bandwidth: r.non_affinity,
        intra_node_bandwidth: 100e9,
    }
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Synthetic profile parameters for one calibrated chip with update entries
/// for every divisor of `count`.
pub fn calibrated_params(letter: char, count: usize) -> SyntheticProfileParams {
    let r = row(letter);
    let tp_efficiency: BTreeMap<usize, f64> =
        [1, 2, 4, 8].into_iter().zip(r.tp_efficiency).collect();
    SyntheticProfileParams {
        flops_ratio: r.flops_ratio,
        base_layer_seconds: 0.06,
        tp_efficiency,
        param_grad_bytes: (4.0 * PARAMS_PER_LAYER) as u64,
        optimizer_bytes: (12.0 * PARAMS_PER_LAYER) as u64,
        activation_bytes: 34 * REFERENCE_SEQUENCE_LENGTH as u64 * 8192,
        recompute_keep_fraction: 2.0 / 34.0,
        update_seconds: 0.011,
        grad_sync_seconds: 0.02,
        dp_values: divisors(count),
    }
}

/// Builds a validated cluster plus profile from `(letter, count)` pairs.
pub fn calibrated_instance(types: &[(char, usize)]) -> (ClusterSpec, ProfileTable) {
    let mut profile = ProfileTable::new();
    let mut chips = Vec::new();
    for &(letter, count) in types {
        let chip = calibrated_chip(letter, count);
        let p = synthesize_profile(&calibrated_params(letter, count)).expect("calibrated parameters");
        profile.insert_chip(chip.name.clone(), p);
        chips.push(chip);
    }
    let cluster = ClusterSpec::new(chips).validate().expect("calibrated cluster");
    (cluster, profile)
}

/// All four types with `count` chips each.
pub fn all_types(count: usize) -> (ClusterSpec, ProfileTable) {
    calibrated_instance(&[('A', count), ('B', count), ('C', count), ('D', count)])
}

/// A+B+C, 256 each.
pub fn three_type_cluster() -> (ClusterSpec, ProfileTable) {
    calibrated_instance(&[('A', 256), ('B', 256), ('C', 256)])
}

/// A+B+C+D, 256 each.
pub fn four_type_cluster() -> (ClusterSpec, ProfileTable) {
    all_types(256)
}

/// A(384)+B(1024).
pub fn two_type_cluster() -> (ClusterSpec, ProfileTable) {
    calibrated_instance(&[('A', 384), ('B', 1024)])
}

/// Reference workload with a global batch given in tokens.
pub fn reference_workload(global_batch_tokens: usize) -> WorkloadSpec {
    WorkloadSpec::from_tokens(
        REFERENCE_LAYERS,
        global_batch_tokens,
        REFERENCE_SEQUENCE_LENGTH,
    )
    .expect("token batch is a multiple of the sequence length")
}
