//! Cluster and workload description.
//!
//! A [`ClusterSpec`] is an ordered list of accelerator types. Validation sorts
//! the types by safe memory capacity, largest first, which is also the order
//! in which pipeline stages are laid out: memory-rich chips host the early
//! stages that keep the most microbatches in flight.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("cluster has no chip types")]
    Empty,
    #[error("duplicate chip-type name `{0}`")]
    DuplicateName(String),
    #[error("chip type `{chip}`: tp_max not a power of two ({tp_max})")]
    TpMaxNotPowerOfTwo { chip: String, tp_max: usize },
    #[error("chip type `{chip}`: tp_max {tp_max} exceeds chips_per_node {chips_per_node}")]
    TpMaxExceedsNode {
        chip: String,
        tp_max: usize,
        chips_per_node: usize,
    },
    #[error("chip type `{chip}`: field `{field}` must be positive")]
    NonPositive { chip: String, field: &'static str },
    #[error("chip type `{chip}`: affinity_bandwidth is below non_affinity_bandwidth")]
    AffinityBelowNonAffinity { chip: String },
    #[error("workload: {0}")]
    Workload(String),
}

/// One accelerator type in the cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipTypeSpec {
    pub name: String,
    /// Number of chips of this type.
    pub count: usize,
    /// Profiled safe memory capacity per chip, in bytes.
    pub safe_memory: u64,
    pub tp_max: usize,
    pub chips_per_node: usize,
    pub nic_count_per_node: usize,
    /// Bytes/second per NIC when a chip uses its affine NIC.
    pub affinity_bandwidth: f64,
    pub non_affinity_bandwidth: f64,
    pub intra_node_bandwidth: f64,
}

impl ChipTypeSpec {
    fn check(&self) -> Result<(), ClusterError> {
        let non_positive = |field| ClusterError::NonPositive {
            chip: self.name.clone(),
            field,
        };
        if self.count == 0 {
            return Err(non_positive("count"));
        }
        if self.safe_memory == 0 {
            return Err(non_positive("safe_memory"));
        }
        if self.tp_max == 0 {
            return Err(non_positive("tp_max"));
        }
        if self.chips_per_node == 0 {
            return Err(non_positive("chips_per_node"));
        }
        if self.nic_count_per_node == 0 {
            return Err(non_positive("nic_count_per_node"));
        }
        for (field, value) in [
            ("affinity_bandwidth", self.affinity_bandwidth),
            ("non_affinity_bandwidth", self.non_affinity_bandwidth),
            ("intra_node_bandwidth", self.intra_node_bandwidth),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(non_positive(field));
            }
        }
        if !self.tp_max.is_power_of_two() {
            return Err(ClusterError::TpMaxNotPowerOfTwo {
                chip: self.name.clone(),
                tp_max: self.tp_max,
            });
        }
        if self.tp_max > self.chips_per_node {
            return Err(ClusterError::TpMaxExceedsNode {
                chip: self.name.clone(),
                tp_max: self.tp_max,
                chips_per_node: self.chips_per_node,
            });
        }
        if self.affinity_bandwidth < self.non_affinity_bandwidth {
            return Err(ClusterError::AffinityBelowNonAffinity {
                chip: self.name.clone(),
            });
        }
        Ok(())
    }

    /// Power-of-two TP degrees up to `tp_max`, ascending.
    pub fn tp_candidates(&self) -> impl Iterator<Item = usize> {
        let tp_max = self.tp_max;
        (0..usize::BITS)
            .map(|k| 1usize << k)
            .take_while(move |&tp| tp <= tp_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub chip_types: Vec<ChipTypeSpec>,
}

impl ClusterSpec {
    pub fn new(chip_types: Vec<ChipTypeSpec>) -> Self {
        Self { chip_types }
    }

    /// Checks every chip type and returns the spec sorted memory-descending
    /// (ties by name ascending).
    pub fn validate(mut self) -> Result<Self, ClusterError> {
        if self.chip_types.is_empty() {
            return Err(ClusterError::Empty);
        }
        let mut seen = HashSet::new();
        for chip in &self.chip_types {
            if !seen.insert(chip.name.as_str()) {
                return Err(ClusterError::DuplicateName(chip.name.clone()));
            }
            chip.check()?;
        }
        self.chip_types.sort_by(|a, b| {
            b.safe_memory
                .cmp(&a.safe_memory)
                .then_with(|| a.name.cmp(&b.name))
        });
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.chip_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chip_types.is_empty()
    }

    pub fn total_chips(&self) -> usize {
        self.chip_types.iter().map(|c| c.count).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ChipTypeSpec> {
        self.chip_types.iter().find(|c| c.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.chip_types.iter().position(|c| c.name == name)
    }
}

/// Free-function form of [`ClusterSpec::validate`].
pub fn validate_cluster_spec(spec: ClusterSpec) -> Result<ClusterSpec, ClusterError> {
    spec.validate()
}

fn default_alpha() -> f64 {
    1.0
}

/// The model and batch being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Number of uniform Transformer layers.
    pub total_layers: usize,
    /// Global batch in microbatches of one sequence each.
    pub global_batch: usize,
    /// Weight of the pipeline bubble term; 1 for 1F1B, 0 for zero-bubble schedules.
    #[serde(default = "default_alpha")]
    pub bubble_coefficient: f64,
    /// Constant added to every estimated iteration time. Defaults to zero.
    #[serde(default)]
    pub pipeline_overhead: f64,
}

impl WorkloadSpec {
    pub fn new(total_layers: usize, global_batch: usize) -> Self {
        Self {
            total_layers,
            global_batch,
            bubble_coefficient: 1.0,
            pipeline_overhead: 0.0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.bubble_coefficient = alpha;
        self
    }

    /// Converts a global batch given in tokens into one-sequence microbatches.
    pub fn from_tokens(
        total_layers: usize,
        global_batch_tokens: usize,
        sequence_length: usize,
    ) -> Result<Self, ClusterError> {
        if sequence_length == 0 || global_batch_tokens % sequence_length != 0 {
            return Err(ClusterError::Workload(format!(
                "global batch of {global_batch_tokens} tokens is not a multiple of sequence length {sequence_length}"
            )));
        }
        Self::new(total_layers, global_batch_tokens / sequence_length).validate()
    }

    pub fn validate(self) -> Result<Self, ClusterError> {
        if self.total_layers == 0 {
            return Err(ClusterError::Workload("total_layers must be positive".into()));
        }
        if self.global_batch == 0 {
            return Err(ClusterError::Workload("global_batch must be positive".into()));
        }
        if !(self.bubble_coefficient.is_finite() && self.bubble_coefficient >= 0.0) {
            return Err(ClusterError::Workload(
                "bubble_coefficient must be a non-negative number".into(),
            ));
        }
        if !(self.pipeline_overhead.is_finite() && self.pipeline_overhead >= 0.0) {
            return Err(ClusterError::Workload(
                "pipeline_overhead must be a non-negative number".into(),
            ));
        }
        Ok(self)
    }
}
