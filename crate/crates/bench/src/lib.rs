//! Shared fixtures for the criterion benches.

use heteroplan_core::cluster::{ClusterSpec, WorkloadSpec};
use heteroplan_core::presets;
use heteroplan_core::profile::ProfileTable;

/// Four calibrated chip types, 256 chips each, with a 4M-token batch.
pub fn four_type_fixture() -> (ClusterSpec, ProfileTable, WorkloadSpec) {
    let (cluster, profile) = presets::four_type_cluster();
    (cluster, profile, presets::reference_workload(4 * 1024 * 1024))
}

/// Three calibrated chip types, 256 chips each, with a 2M-token batch.
pub fn three_type_fixture() -> (ClusterSpec, ProfileTable, WorkloadSpec) {
    let (cluster, profile) = presets::three_type_cluster();
    (cluster, profile, presets::reference_workload(2 * 1024 * 1024))
}
