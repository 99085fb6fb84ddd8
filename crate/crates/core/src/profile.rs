//! Layer-wise profiling tables.
//!
//! Lookups are exact-key: the search only ever asks for power-of-two TP
//! degrees and divisors of the global batch, so nothing is interpolated.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterSpec;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileKey {
    pub chip: String,
    pub dp: Option<usize>,
    pub tp: usize,
    pub recompute: Option<bool>,
}

impl fmt::Display for ProfileKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(chip={}", self.chip)?;
        if let Some(dp) = self.dp {
            write!(f, ", dp={dp}")?;
        }
        write!(f, ", tp={}", self.tp)?;
        if let Some(r) = self.recompute {
            write!(f, ", recompute={}", u8::from(r))?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("profile entry absent for {0}")]
    Absent(ProfileKey),
    #[error("tp {0} is not a power of two")]
    TpNotPowerOfTwo(usize),
    #[error("profile for `{chip}`: {msg}")]
    Invalid { chip: String, msg: String },
    #[error("synthetic profile parameter `{0}` must be positive and finite")]
    BadParameter(&'static str),
}

/// Per-layer, per-microbatch timings at one TP degree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeEntry {
    pub t_fwd: f64,
    pub t_bwd: f64,
    pub t_recomp: f64,
    /// Stored activation bytes per layer per in-flight microbatch, no recomputation.
    pub mem_act: u64,
    /// Same with activation recomputation enabled.
    pub mem_act_recompute: u64,
}

/// Per-layer optimizer-step time and model-state bytes at one (DP, TP).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateEntry {
    pub t_update: f64,
    pub mem_model: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChipProfile {
    pub compute: BTreeMap<usize, ComputeEntry>,
    pub update: BTreeMap<(usize, usize), UpdateEntry>,
}

/// Everything the cost model needs for one (chip, dp, tp, recompute) key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileEntry {
    pub t_fwd: f64,
    pub t_bwd: f64,
    pub t_recomp: f64,
    pub t_update: f64,
    pub mem_act: u64,
    pub mem_model: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileFile", into = "ProfileFile")]
pub struct ProfileTable {
    chips: BTreeMap<String, ChipProfile>,
}

impl ProfileTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_chip(&mut self, name: impl Into<String>, profile: ChipProfile) {
        self.chips.insert(name.into(), profile);
    }

    pub fn chip(&self, name: &str) -> Option<&ChipProfile> {
        self.chips.get(name)
    }

    pub fn chip_names(&self) -> impl Iterator<Item = &str> {
        self.chips.keys().map(String::as_str)
    }

    /// Registers `alias` as a copy of the entries of `base`.
    pub fn alias(&mut self, alias: &str, base: &str) -> bool {
        match self.chips.get(base).cloned() {
            Some(p) => {
                self.chips.insert(alias.to_string(), p);
                true
            }
            None => false,
        }
    }

    pub fn compute(&self, chip: &str, tp: usize) -> Result<&ComputeEntry, ProfileError> {
        if !tp.is_power_of_two() {
            return Err(ProfileError::TpNotPowerOfTwo(tp));
        }
        self.chips
            .get(chip)
            .and_then(|p| p.compute.get(&tp))
            .ok_or_else(|| {
                ProfileError::Absent(ProfileKey {
                    chip: chip.to_string(),
                    dp: None,
                    tp,
                    recompute: None,
                })
            })
    }

    pub fn update(&self, chip: &str, dp: usize, tp: usize) -> Result<&UpdateEntry, ProfileError> {
        if !tp.is_power_of_two() {
            return Err(ProfileError::TpNotPowerOfTwo(tp));
        }
        self.chips
            .get(chip)
            .and_then(|p| p.update.get(&(dp, tp)))
            .ok_or_else(|| {
                ProfileError::Absent(ProfileKey {
                    chip: chip.to_string(),
                    dp: Some(dp),
                    tp,
                    recompute: None,
                })
            })
    }

    /// Exact-key lookup of the full tuple for (chip, dp, tp, recompute).
    pub fn lookup(
        &self,
        chip: &str,
        dp: usize,
        tp: usize,
        recompute: bool,
    ) -> Result<ProfileEntry, ProfileError> {
        let c = self.compute(chip, tp)?;
        let u = self.update(chip, dp, tp)?;
        Ok(ProfileEntry {
            t_fwd: c.t_fwd,
            t_bwd: c.t_bwd,
            t_recomp: c.t_recomp,
            t_update: u.t_update,
            mem_act: if recompute {
                c.mem_act_recompute
            } else {
                c.mem_act
            },
            mem_model: u.mem_model,
        })
    }

    /// Checks value invariants, and coverage of every power-of-two TP up to
    /// each chip type's `tp_max` when a cluster is given.
    pub fn validate(&self, cluster: Option<&ClusterSpec>) -> Result<(), ProfileError> {
        let bad = |chip: &str, msg: String| ProfileError::Invalid {
            chip: chip.to_string(),
            msg,
        };
        let pos = |x: f64| x.is_finite() && x > 0.0;
        for (name, p) in &self.chips {
            for (&tp, c) in &p.compute {
                if !tp.is_power_of_two() {
                    return Err(bad(name, format!("compute entry with non power-of-two tp {tp}")));
                }
                if !(pos(c.t_fwd) && pos(c.t_bwd) && pos(c.t_recomp)) {
                    return Err(bad(name, format!("non-positive time at tp {tp}")));
                }
                if c.mem_act == 0 || c.mem_act_recompute == 0 {
                    return Err(bad(name, format!("zero activation memory at tp {tp}")));
                }
                if c.mem_act_recompute > c.mem_act {
                    return Err(bad(
                        name,
                        format!("recomputation increases activation memory at tp {tp}"),
                    ));
                }
            }
            for (&(dp, tp), u) in &p.update {
                if dp == 0 || !tp.is_power_of_two() {
                    return Err(bad(name, format!("update entry with bad key dp={dp} tp={tp}")));
                }
                if !pos(u.t_update) || u.mem_model == 0 {
                    return Err(bad(name, format!("non-positive update entry at dp={dp} tp={tp}")));
                }
            }
        }
        if let Some(cluster) = cluster {
            for chip in &cluster.chip_types {
                let p = self
                    .chips
                    .get(&chip.name)
                    .ok_or_else(|| bad(&chip.name, "no profile for chip type".into()))?;
                for tp in chip.tp_candidates() {
                    if !p.compute.contains_key(&tp) {
                        return Err(bad(&chip.name, format!("missing compute entry for tp {tp}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`ProfileTable::lookup`].
pub fn lookup_profile(
    table: &ProfileTable,
    chip: &str,
    dp: usize,
    tp: usize,
    recompute: bool,
) -> Result<ProfileEntry, ProfileError> {
    table.lookup(chip, dp, tp, recompute)
}

// On-disk layout: chips as an array, entries as arrays of keyed records.

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    chips: Vec<ChipProfileFile>,
}

#[derive(Serialize, Deserialize)]
struct ChipProfileFile {
    name: String,
    compute: Vec<ComputeRecord>,
    update: Vec<UpdateRecord>,
}

#[derive(Serialize, Deserialize)]
struct ComputeRecord {
    tp: usize,
    #[serde(flatten)]
    entry: ComputeEntry,
}

#[derive(Serialize, Deserialize)]
struct UpdateRecord {
    dp: usize,
    tp: usize,
    #[serde(flatten)]
    entry: UpdateEntry,
}

impl From<ProfileTable> for ProfileFile {
    fn from(t: ProfileTable) -> Self {
        let chips = t
            .chips
            .into_iter()
            .map(|(name, p)| ChipProfileFile {
                name,
                compute: p
                    .compute
                    .into_iter()
                    .map(|(tp, entry)| ComputeRecord { tp, entry })
                    .collect(),
                update: p
                    .update
                    .into_iter()
                    .map(|((dp, tp), entry)| UpdateRecord { dp, tp, entry })
                    .collect(),
            })
            .collect();
        ProfileFile { chips }
    }
}

impl TryFrom<ProfileFile> for ProfileTable {
    type Error = ProfileError;

    fn try_from(f: ProfileFile) -> Result<Self, Self::Error> {
        let mut table = ProfileTable::new();
        for chip in f.chips {
            let mut p = ChipProfile::default();
            for r in chip.compute {
                if p.compute.insert(r.tp, r.entry).is_some() {
                    return Err(ProfileError::Invalid {
                        chip: chip.name,
                        msg: format!("duplicate compute entry for tp {}", r.tp),
                    });
                }
            }
            for r in chip.update {
                if p.update.insert((r.dp, r.tp), r.entry).is_some() {
                    return Err(ProfileError::Invalid {
                        chip: chip.name,
                        msg: format!("duplicate update entry for dp {} tp {}", r.dp, r.tp),
                    });
                }
            }
            if table.chips.insert(chip.name.clone(), p).is_some() {
                return Err(ProfileError::Invalid {
                    chip: chip.name,
                    msg: "duplicate chip".into(),
                });
            }
        }
        table.validate(None)?;
        Ok(table)
    }
}

/// Inputs for generating a deterministic synthetic profile for one chip type.
///
/// Timings scale as `base_layer_seconds / (flops_ratio * tp * efficiency(tp))`,
/// backward is twice forward and recomputation costs one forward. Model-state
/// memory splits into a TP-sharded part and an optimizer part that is also
/// sharded across DP ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfileParams {
    /// Compute throughput relative to the reference chip.
    pub flops_ratio: f64,
    /// Forward time of one layer for one microbatch on the reference chip at tp=1.
    pub base_layer_seconds: f64,
    /// Parallel efficiency in (0, 1] per power-of-two TP degree.
    pub tp_efficiency: BTreeMap<usize, f64>,
    /// Parameter and gradient bytes per layer at tp=1.
    pub param_grad_bytes: u64,
    /// Optimizer-state bytes per layer at tp=1, dp=1.
    pub optimizer_bytes: u64,
    /// Activation bytes per layer per microbatch at tp=1.
    pub activation_bytes: u64,
    /// Fraction of activation bytes kept when recomputing, in (0, 1].
    pub recompute_keep_fraction: f64,
    /// Optimizer step per layer on the reference chip at tp=1.
    pub update_seconds: f64,
    /// Non-overlapped gradient synchronization per layer at tp=1, scaled by (dp-1)/dp.
    pub grad_sync_seconds: f64,
    /// DP degrees to emit update entries for.
    pub dp_values: Vec<usize>,
}

/// Builds a deterministic profile for one chip type.
pub fn synthesize_profile(params: &SyntheticProfileParams) -> Result<ChipProfile, ProfileError> {
    let pos = |x: f64| x.is_finite() && x > 0.0;
    if !pos(params.flops_ratio) {
        return Err(ProfileError::BadParameter("flops_ratio"));
    }
    if !pos(params.base_layer_seconds) {
        return Err(ProfileError::BadParameter("base_layer_seconds"));
    }
    if params.tp_efficiency.is_empty() {
        return Err(ProfileError::BadParameter("tp_efficiency"));
    }
    if params.param_grad_bytes == 0 {
        return Err(ProfileError::BadParameter("param_grad_bytes"));
    }
    if params.activation_bytes == 0 {
        return Err(ProfileError::BadParameter("activation_bytes"));
    }
    if !(pos(params.recompute_keep_fraction) && params.recompute_keep_fraction <= 1.0) {
        return Err(ProfileError::BadParameter("recompute_keep_fraction"));
    }
    if !pos(params.update_seconds) {
        return Err(ProfileError::BadParameter("update_seconds"));
    }
    if !(params.grad_sync_seconds.is_finite() && params.grad_sync_seconds >= 0.0) {
        return Err(ProfileError::BadParameter("grad_sync_seconds"));
    }
    if params.dp_values.is_empty() || params.dp_values.contains(&0) {
        return Err(ProfileError::BadParameter("dp_values"));
    }

    let mut profile = ChipProfile::default();
    for (&tp, &eff) in &params.tp_efficiency {
        if !tp.is_power_of_two() {
            return Err(ProfileError::TpNotPowerOfTwo(tp));
        }
        if !(pos(eff) && eff <= 1.0) {
            return Err(ProfileError::BadParameter("tp_efficiency"));
        }
        let t_fwd = params.base_layer_seconds / (params.flops_ratio * tp as f64 * eff);
        let mem_act = params.activation_bytes.div_ceil(tp as u64);
        let kept = (params.activation_bytes as f64 * params.recompute_keep_fraction).ceil() as u64;
        let mem_act_recompute = kept.div_ceil(tp as u64).clamp(1, mem_act);
        profile.compute.insert(
            tp,
            ComputeEntry {
                t_fwd,
                t_bwd: 2.0 * t_fwd,
                t_recomp: t_fwd,
                mem_act,
                mem_act_recompute,
            },
        );
        for &dp in &params.dp_values {
            let sync = params.grad_sync_seconds * (dp - 1) as f64 / dp as f64;
            let t_update = (params.update_seconds / params.flops_ratio + sync) / tp as f64;
            let state = params.param_grad_bytes + params.optimizer_bytes.div_ceil(dp as u64);
            profile.update.insert(
                (dp, tp),
                UpdateEntry {
                    t_update,
                    mem_model: state.div_ceil(tp as u64),
                },
            );
        }
    }
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn params(flops: f64) -> SyntheticProfileParams {
        SyntheticProfileParams {
            flops_ratio: flops,
            base_layer_seconds: 0.01,
            tp_efficiency: [(1, 1.0), (2, 0.9), (4, 0.8), (8, 0.7)].into_iter().collect(),
            param_grad_bytes: 1 << 30,
            optimizer_bytes: 3 << 30,
            activation_bytes: 1 << 29,
            recompute_keep_fraction: 0.1,
            update_seconds: 0.002,
            grad_sync_seconds: 0.001,
            dp_values: vec![1, 2, 4],
        }
    }

    fn table(flops: f64) -> ProfileTable {
        let mut t = ProfileTable::new();
        t.insert_chip("X", synthesize_profile(&params(flops)).unwrap());
        t
    }

    #[test]
    fn identity_and_proportionality() {
        let t = table(1.0);
        assert_eq!(t.compute("X", 1).unwrap().t_fwd, 0.01);
        let t2 = table(2.0);
        assert_eq!(t2.compute("X", 1).unwrap().t_fwd, 0.005);
        let c = t.compute("X", 4).unwrap();
        assert_eq!(c.t_bwd, 2.0 * c.t_fwd);
        assert_eq!(c.t_recomp, c.t_fwd);
        assert_eq!(t, table(1.0));
    }

    #[test]
    fn lookup_exact_and_absent() {
        let t = table(1.0);
        let e = t.lookup("X", 2, 2, true).unwrap();
        let c = t.compute("X", 2).unwrap();
        let u = t.update("X", 2, 2).unwrap();
        assert_eq!(e.t_fwd, c.t_fwd);
        assert_eq!(e.mem_act, c.mem_act_recompute);
        assert_eq!(e.mem_model, u.mem_model);
        assert_eq!(t.lookup("X", 2, 2, false).unwrap().mem_act, c.mem_act);

        let err = t.lookup("X", 1, 16, false).unwrap_err();
        assert!(matches!(err, ProfileError::Absent(_)));
        let err = t.lookup("X", 3, 1, false).unwrap_err();
        assert!(err.to_string().contains("profile entry absent"));
        assert!(err.to_string().contains("dp=3"));
        assert_eq!(t.lookup("X", 1, 3, false).unwrap_err(), ProfileError::TpNotPowerOfTwo(3));
        assert!(t.lookup("Y", 1, 1, false).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut p = params(1.0);
        p.flops_ratio = 0.0;
        assert!(synthesize_profile(&p).is_err());
        let mut p = params(1.0);
        p.tp_efficiency.insert(2, 1.5);
        assert!(synthesize_profile(&p).is_err());
        let mut p = params(1.0);
        p.base_layer_seconds = -1.0;
        assert!(synthesize_profile(&p).is_err());
    }

    #[test]
    fn calibrated_relative_speeds() {
        let (cluster, profile) = presets::all_types(256);
        let fwd = |c: &str| profile.compute(c, 1).unwrap().t_fwd;
        assert!(fwd("Chip-C") > fwd("Chip-A"));
        assert!(fwd("Chip-A") > fwd("Chip-D"));
        profile.validate(Some(&cluster)).unwrap();
    }

    #[test]
    fn json_layout_round_trips() {
        let t = table(1.5);
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"mem_act_recompute\""));
        let back: ProfileTable = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    proptest::proptest! {
        #[test]
        fn synthetic_profiles_always_valid(
            flops in 0.05f64..4.0,
            base in 1e-4f64..1.0,
            keep in 0.01f64..=1.0,
            act in 1u64..(1 << 34),
            effs in proptest::collection::vec(0.05f64..=1.0, 1..5),
        ) {
            let mut p = params(flops);
            p.base_layer_seconds = base;
            p.recompute_keep_fraction = keep;
            p.activation_bytes = act;
            p.tp_efficiency = effs.iter().enumerate().map(|(k, &e)| (1 << k, e)).collect();
            let mut t = ProfileTable::new();
            t.insert_chip("X", synthesize_profile(&p).unwrap());
            proptest::prop_assert!(t.validate(None).is_ok());
        }
    }
}
