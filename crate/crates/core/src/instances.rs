//! Seeded random instances for fuzzing and cross-checking.
//!
//! Instances stay inside the oracle limits: at most three chip types, at most
//! 256 chips, at most 64 layers and a global batch of at most 64.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{ChipTypeSpec, ClusterSpec, WorkloadSpec};
use crate::presets::{divisors, GIB};
use crate::profile::{synthesize_profile, ProfileTable, SyntheticProfileParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub cluster: ClusterSpec,
    pub profile: ProfileTable,
    pub workload: WorkloadSpec,
}

const COUNTS: [usize; 10] = [2, 4, 6, 8, 12, 16, 24, 32, 48, 64];

/// Random heterogeneous instance with one to three chip types.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let types = rng.gen_range(1..=3);
    random_with_types(&mut rng, types)
}

/// Random instance with exactly `types` chip types (`1..=3`).
pub fn random_instance_with_types(seed: u64, types: usize) -> Instance {
    assert!((1..=3).contains(&types), "1 to 3 chip types");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_with_types(&mut rng, types)
}

fn random_with_types(rng: &mut ChaCha8Rng, types: usize) -> Instance {
    let mut chips = Vec::new();
    let mut profile = ProfileTable::new();
    let mut letters: Vec<char> = ('A'..='H').collect();
    letters.shuffle(rng);
    for &letter in &letters[..types] {
        let count = *COUNTS.choose(rng).expect("non-empty");
        let tp_max = *[1usize, 2, 4, 8].choose(rng).expect("non-empty");
        let chip = ChipTypeSpec {
            name: format!("T{letter}"),
            count,
            safe_memory: rng.gen_range(8 * GIB..=80 * GIB),
            tp_max,
            chips_per_node: 8,
            nic_count_per_node: *[1usize, 2, 4, 8].choose(rng).expect("non-empty"),
            affinity_bandwidth: rng.gen_range(5e9..2e10),
            non_affinity_bandwidth: 4e9,
            intra_node_bandwidth: rng.gen_range(5e10..3e11),
        };
        let mut eff = 1.0;
        let mut tp_efficiency = std::collections::BTreeMap::new();
        for tp in [1, 2, 4, 8] {
            tp_efficiency.insert(tp, eff);
            eff *= rng.gen_range(0.7..1.0);
        }
        let model = rng.gen_range(GIB / 16..GIB);
        let params = SyntheticProfileParams {
            flops_ratio: rng.gen_range(0.25..2.0),
            base_layer_seconds: rng.gen_range(0.005..0.05),
            tp_efficiency,
            param_grad_bytes: model,
            optimizer_bytes: 3 * model,
            activation_bytes: rng.gen_range(GIB / 64..GIB / 2),
            recompute_keep_fraction: rng.gen_range(0.03..0.3),
            update_seconds: rng.gen_range(0.001..0.02),
            grad_sync_seconds: rng.gen_range(0.0..0.01),
            dp_values: divisors(count),
        };
        profile.insert_chip(chip.name.clone(), synthesize_profile(&params).expect("valid parameters"));
        chips.push(chip);
    }
    let cluster = ClusterSpec::new(chips).validate().expect("generated cluster is valid");
    let workload = WorkloadSpec::new(rng.gen_range(4..=64), rng.gen_range(1..=64))
        .with_alpha(if rng.gen_bool(0.8) { 1.0 } else { rng.gen_range(0.0..1.0) });
    Instance {
        cluster,
        profile,
        workload,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_limits() {
        for seed in 0..200 {
            let a = random_instance(seed);
            assert_eq!(a, random_instance(seed));
            assert!(a.cluster.len() <= 3);
            assert!(a.cluster.total_chips() <= 256);
            assert!(a.workload.total_layers <= 64 && a.workload.global_batch <= 64);
            a.profile.validate(Some(&a.cluster)).unwrap();
        }
        assert_ne!(random_instance(1), random_instance(2));
    }
}
