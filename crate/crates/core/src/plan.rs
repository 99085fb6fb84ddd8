//! The heterogeneous pipeline-parallel plan.
//!
//! Each chip type hosts a contiguous run of identical pipeline stages. Types
//! appear in cluster order, so the memory-richest chips take the first stages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Configuration shared by all stages of one chip type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TypeAssignment {
    pub chip: String,
    /// Number of pipeline stages on this chip type.
    pub pp: usize,
    pub tp: usize,
    pub recompute: bool,
    /// Layers across all stages of this type.
    pub layers: usize,
}

impl TypeAssignment {
    /// Layers held by each stage. Rounds up for externally supplied plans
    /// whose layer count is not a multiple of `pp`.
    pub fn layers_per_stage(&self) -> usize {
        if self.pp == 0 {
            0
        } else {
            self.layers.div_ceil(self.pp)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PlanFile", into = "PlanFile")]
pub struct ParallelPlan {
    pub dp: usize,
    /// Microbatches per iteration, `global_batch / dp`.
    pub microbatches: usize,
    /// Types in pipeline order. Types with no stages are omitted.
    pub assignments: Vec<TypeAssignment>,
}

/// A position in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageRef {
    /// 1-based index from the pipeline head.
    pub index: usize,
    /// Index into [`ParallelPlan::assignments`].
    pub assignment: usize,
}

impl ParallelPlan {
    pub fn num_stages(&self) -> usize {
        self.assignments.iter().map(|a| a.pp).sum()
    }

    pub fn stages(&self) -> Vec<StageRef> {
        let mut out = Vec::with_capacity(self.num_stages());
        for (assignment, a) in self.assignments.iter().enumerate() {
            for _ in 0..a.pp {
                out.push(StageRef {
                    index: out.len() + 1,
                    assignment,
                });
            }
        }
        out
    }

    pub fn stage(&self, index: usize) -> Option<StageRef> {
        if index == 0 {
            return None;
        }
        let mut first = 1;
        for (assignment, a) in self.assignments.iter().enumerate() {
            if index < first + a.pp {
                return Some(StageRef { index, assignment });
            }
            first += a.pp;
        }
        None
    }

    pub fn total_layers(&self) -> usize {
        self.assignments.iter().map(|a| a.layers).sum()
    }

    /// Number of microbatches a 1F1B schedule keeps in flight at `stage_index`.
    pub fn in_flight(&self, stage_index: usize) -> usize {
        in_flight(self.microbatches, self.num_stages(), stage_index)
    }
}

/// `min(b, p - s + 1)` for 1-based stage `s` of `p`.
pub fn in_flight(microbatches: usize, num_stages: usize, stage_index: usize) -> usize {
    microbatches.min(num_stages + 1 - stage_index)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanFormatError {
    #[error("stage {stage}: chip `{chip}` reappears after another chip type")]
    NonContiguous { stage: usize, chip: String },
    #[error("stage {stage}: `{field}` differs from earlier stages of chip `{chip}`")]
    NonUniform {
        stage: usize,
        chip: String,
        field: &'static str,
    },
    #[error("stage {stage}: layers_per_stage must be positive")]
    EmptyStage { stage: usize },
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    dp: usize,
    microbatches: usize,
    stages: Vec<StageRecord>,
}

#[derive(Serialize, Deserialize)]
struct StageRecord {
    chip: String,
    tp: usize,
    recompute: bool,
    layers_per_stage: usize,
}

impl From<ParallelPlan> for PlanFile {
    fn from(p: ParallelPlan) -> Self {
        let mut stages = Vec::with_capacity(p.num_stages());
        for a in &p.assignments {
            for _ in 0..a.pp {
                stages.push(StageRecord {
                    chip: a.chip.clone(),
                    tp: a.tp,
                    recompute: a.recompute,
                    layers_per_stage: a.layers_per_stage(),
                });
            }
        }
        PlanFile {
            dp: p.dp,
            microbatches: p.microbatches,
            stages,
        }
    }
}

impl TryFrom<PlanFile> for ParallelPlan {
    type Error = PlanFormatError;

    fn try_from(f: PlanFile) -> Result<Self, Self::Error> {
        let mut assignments: Vec<TypeAssignment> = Vec::new();
        for (i, s) in f.stages.into_iter().enumerate() {
            let stage = i + 1;
            if s.layers_per_stage == 0 {
                return Err(PlanFormatError::EmptyStage { stage });
            }
            match assignments.last_mut() {
                Some(last) if last.chip == s.chip => {
                    let field = if last.tp != s.tp {
                        Some("tp")
                    } else if last.recompute != s.recompute {
                        Some("recompute")
                    } else if last.layers_per_stage() != s.layers_per_stage {
                        Some("layers_per_stage")
                    } else {
                        None
                    };
                    if let Some(field) = field {
                        return Err(PlanFormatError::NonUniform {
                            stage,
                            chip: s.chip,
                            field,
                        });
                    }
                    last.pp += 1;
                    last.layers += s.layers_per_stage;
                }
                _ => {
                    if assignments.iter().any(|a| a.chip == s.chip) {
                        return Err(PlanFormatError::NonContiguous { stage, chip: s.chip });
                    }
                    assignments.push(TypeAssignment {
                        chip: s.chip,
                        pp: 1,
                        tp: s.tp,
                        recompute: s.recompute,
                        layers: s.layers_per_stage,
                    });
                }
            }
        }
        Ok(ParallelPlan {
            dp: f.dp,
            microbatches: f.microbatches,
            assignments,
        })
    }
}
