//! Latency-bandwidth model of inter-stage transfers and activation resharding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommError {
    #[error("tp degree {0} is not a power of two")]
    TpNotPowerOfTwo(usize),
    #[error("nic count must be at least 1")]
    NoNics,
    #[error("link {mode:?}: {msg}")]
    InvalidLink { mode: LinkMode, msg: String },
    #[error("overlap_fraction {0} outside [0, 1]")]
    Overlap(f64),
    #[error("malformed link file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMode {
    CpuMediatedTcp,
    CpuMediatedRdma,
    DeviceDirectRdma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub mode: LinkMode,
    #[serde(rename = "base_latency_s")]
    pub base_latency: f64,
    #[serde(rename = "bandwidth_Bps")]
    pub bandwidth: f64,
    /// Host staging cost per byte; zero only for device-direct links.
    #[serde(rename = "staging_penalty_s_per_B")]
    pub staging_penalty: f64,
}

impl LinkModel {
    pub fn validate(&self) -> Result<(), CommError> {
        let bad = |msg: &str| {
            Err(CommError::InvalidLink {
                mode: self.mode,
                msg: msg.into(),
            })
        };
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return bad("bandwidth must be positive");
        }
        if !(self.base_latency >= 0.0 && self.base_latency.is_finite()) {
            return bad("base latency must be non-negative");
        }
        if !(self.staging_penalty >= 0.0 && self.staging_penalty.is_finite()) {
            return bad("staging penalty must be non-negative");
        }
        let direct = self.mode == LinkMode::DeviceDirectRdma;
        if direct != (self.staging_penalty == 0.0) {
            return bad("staging penalty is zero exactly for device-direct links");
        }
        Ok(())
    }

    /// Seconds per byte beyond the base latency.
    pub fn per_byte(&self) -> f64 {
        1.0 / self.bandwidth + self.staging_penalty
    }

    fn time(&self, bytes: f64) -> f64 {
        self.base_latency + bytes * self.per_byte()
    }
}

pub fn p2p_transfer_time(bytes: u64, link: &LinkModel) -> f64 {
    link.time(bytes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReshardMethod {
    Naive,
    SendRecvAllGather,
}

/// Time to move one microbatch's activations from a stage with TP degree
/// `tp_src` to one with `tp_dst`.
///
/// The naive method sends the full tensor over one stream. Send/recv plus
/// all-gather splits it over `k = min(tp_dst, dst_nic_count)` streams and
/// reassembles it inside the destination node.
pub fn resharding_time(
    activation_bytes: u64,
    tp_src: usize,
    tp_dst: usize,
    dst_nic_count: usize,
    link: &LinkModel,
    intra_bandwidth: f64,
    method: ReshardMethod,
) -> Result<f64, CommError> {
    for tp in [tp_src, tp_dst] {
        if !tp.is_power_of_two() {
            return Err(CommError::TpNotPowerOfTwo(tp));
        }
    }
    if dst_nic_count == 0 {
        return Err(CommError::NoNics);
    }
    let bytes = activation_bytes as f64;
    Ok(match method {
        ReshardMethod::Naive => link.time(bytes),
        ReshardMethod::SendRecvAllGather => {
            let k = tp_dst.min(dst_nic_count) as f64;
            let gather = if k > 1.0 {
                bytes * (k - 1.0) / (k * intra_bandwidth)
            } else {
                0.0
            };
            link.time(bytes / k) + gather
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthClass {
    Affinity,
    NonAffinity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NicAssignment {
    pub nic: Vec<usize>,
    pub class: Vec<BandwidthClass>,
}

impl NicAssignment {
    pub fn loads(&self, nic_count: usize) -> Vec<usize> {
        let mut loads = vec![0; nic_count];
        for &n in &self.nic {
            loads[n] += 1;
        }
        loads
    }

    /// Per-chip bandwidth given the two class bandwidths.
    pub fn bandwidths(&self, affinity: f64, non_affinity: f64) -> Vec<f64> {
        self.class
            .iter()
            .map(|c| match c {
                BandwidthClass::Affinity => affinity,
                BandwidthClass::NonAffinity => non_affinity,
            })
            .collect()
    }
}

/// Gives each chip a NIC, preferring `affinity[c]`, with loads differing by
/// at most one. A chip is in the affinity class only when it sits alone on
/// its preferred NIC.
pub fn assign_nics(
    chips: usize,
    nic_count: usize,
    affinity: &[usize],
) -> Result<NicAssignment, CommError> {
    if nic_count == 0 {
        return Err(CommError::NoNics);
    }
    let quota = chips / nic_count;
    let mut extras = chips % nic_count;
    let mut loads = vec![0usize; nic_count];
    let mut nic: Vec<Option<usize>> = vec![None; chips];
    let preferred = |c: usize| affinity.get(c).copied().filter(|&n| n < nic_count);

    for (c, slot) in nic.iter_mut().enumerate() {
        if let Some(n) = preferred(c) {
            if loads[n] < quota {
                loads[n] += 1;
                *slot = Some(n);
            }
        }
    }
    for (c, slot) in nic.iter_mut().enumerate() {
        if slot.is_some() || extras == 0 {
            continue;
        }
        if let Some(n) = preferred(c) {
            if loads[n] == quota {
                loads[n] += 1;
                extras -= 1;
                *slot = Some(n);
            }
        }
    }
    for slot in nic.iter_mut().filter(|s| s.is_none()) {
        let n = (0..nic_count).min_by_key(|&n| loads[n]).expect("nic_count >= 1");
        loads[n] += 1;
        *slot = Some(n);
    }

    let nic: Vec<usize> = nic.into_iter().map(|n| n.expect("assigned")).collect();
    let class = nic
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            if preferred(c) == Some(n) && loads[n] == 1 {
                BandwidthClass::Affinity
            } else {
                BandwidthClass::NonAffinity
            }
        })
        .collect();
    Ok(NicAssignment { nic, class })
}

#[derive(Deserialize)]
struct LinkFile {
    schema: u32,
    links: Vec<LinkModel>,
}

const DEFAULT_LINKS: &str = include_str!("../data/default_links.json");

/// Parses a link calibration file.
pub fn parse_links(text: &str) -> Result<Vec<LinkModel>, CommError> {
    let file: LinkFile =
        serde_json::from_str(text).map_err(|e| CommError::Format(e.to_string()))?;
    if file.schema != 1 {
        return Err(CommError::Format(format!("unsupported schema {}", file.schema)));
    }
    for l in &file.links {
        l.validate()?;
    }
    Ok(file.links)
}

/// Built-in synthetic calibration for each link mode.
pub fn default_links() -> Vec<LinkModel> {
    parse_links(DEFAULT_LINKS).expect("bundled link calibration")
}

pub fn default_link(mode: LinkMode) -> LinkModel {
    default_links()
        .into_iter()
        .find(|l| l.mode == mode)
        .expect("every mode is calibrated")
}

/// Message sizes of the latency sweep: 4 KiB to 256 MiB in powers of two.
pub fn calibration_sizes() -> Vec<u64> {
    (0..=16).map(|k| 4096u64 << k).collect()
}

/// Per-size ratios `slow / fast` over [`calibration_sizes`] and their geometric mean.
pub fn latency_ratios(slow: &LinkModel, fast: &LinkModel) -> (Vec<f64>, f64) {
    let ratios: Vec<f64> = calibration_sizes()
        .into_iter()
        .map(|s| p2p_transfer_time(s, slow) / p2p_transfer_time(s, fast))
        .collect();
    let geo = (ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64).exp();
    (ratios, geo)
}

/// Transfer settings used by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommConfig {
    pub link: LinkModel,
    pub method: ReshardMethod,
    /// Activation bytes per microbatch crossing a stage boundary.
    pub activation_bytes: u64,
    /// Share of each transfer hidden behind computation.
    pub overlap_fraction: f64,
}

impl CommConfig {
    /// Zero-byte activations over a zero-latency link: every transfer costs nothing.
    pub fn zero() -> Self {
        Self {
            link: LinkModel {
                mode: LinkMode::DeviceDirectRdma,
                base_latency: 0.0,
                bandwidth: 1e12,
                staging_penalty: 0.0,
            },
            method: ReshardMethod::Naive,
            activation_bytes: 0,
            overlap_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), CommError> {
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(CommError::Overlap(self.overlap_fraction));
        }
        self.link.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn link(bw: f64, lat: f64) -> LinkModel {
        LinkModel {
            mode: LinkMode::DeviceDirectRdma,
            base_latency: lat,
            bandwidth: bw,
            staging_penalty: 0.0,
        }
    }

    #[test]
    fn zero_bytes_is_latency() {
        for l in default_links() {
            assert_eq!(p2p_transfer_time(0, &l), l.base_latency);
        }
    }

    #[test]
    fn default_calibration() {
        let tcp = default_link(LinkMode::CpuMediatedTcp);
        let dd = default_link(LinkMode::DeviceDirectRdma);
        let (ratios, geo) = latency_ratios(&tcp, &dd);
        assert!((8.0..=12.0).contains(&geo), "{geo}");
        assert!(ratios.iter().all(|r| (1.79..=16.0).contains(r)), "{ratios:?}");
        let rdma = default_link(LinkMode::CpuMediatedRdma);
        for s in calibration_sizes() {
            assert!(p2p_transfer_time(s, &dd) < p2p_transfer_time(s, &rdma));
            assert!(p2p_transfer_time(s, &rdma) < p2p_transfer_time(s, &tcp));
        }
    }

    #[test]
    fn link_validation() {
        assert!(link(1.0, 0.0).validate().is_ok());
        assert!(link(0.0, 0.0).validate().is_err());
        let mut l = link(1.0, 0.0);
        l.staging_penalty = 1e-9;
        assert!(l.validate().is_err());
        l.mode = LinkMode::CpuMediatedTcp;
        assert!(l.validate().is_ok());
        l.staging_penalty = 0.0;
        assert!(l.validate().is_err());
        assert!(parse_links(r#"{"schema": 2, "links": []}"#).is_err());
    }

    #[test]
    fn degenerate_resharding() {
        let l = default_link(LinkMode::DeviceDirectRdma);
        let bytes = 64 << 20;
        let naive = resharding_time(bytes, 4, 1, 8, &l, 100e9, ReshardMethod::Naive).unwrap();
        let sr = resharding_time(bytes, 4, 1, 8, &l, 100e9, ReshardMethod::SendRecvAllGather).unwrap();
        assert_eq!(naive, sr);
        assert!(resharding_time(bytes, 3, 1, 8, &l, 1.0, ReshardMethod::Naive).is_err());
        assert!(resharding_time(bytes, 1, 1, 0, &l, 1.0, ReshardMethod::Naive).is_err());
    }

    #[test]
    fn two_streams_halve_cross_node_term() {
        // 9.56 GiB/s with a 64 MiB tensor
        let l = link(9.56 * (1u64 << 30) as f64, 0.0);
        let bytes = 64 << 20;
        let naive = resharding_time(bytes, 4, 2, 8, &l, f64::INFINITY, ReshardMethod::Naive).unwrap();
        let sr = resharding_time(bytes, 4, 2, 8, &l, f64::INFINITY, ReshardMethod::SendRecvAllGather)
            .unwrap();
        assert!((naive - 6.54e-3).abs() < 5e-6, "{naive}");
        assert!((sr - 3.27e-3).abs() < 5e-6, "{sr}");
        assert!((sr - naive / 2.0).abs() < 1e-15);
        let finite =
            resharding_time(bytes, 4, 2, 8, &l, l.bandwidth, ReshardMethod::SendRecvAllGather).unwrap();
        assert!(finite > sr && finite <= naive);
    }

    #[test]
    fn nic_assignment_examples() {
        let ident: Vec<usize> = (0..8).collect();
        let a = assign_nics(8, 8, &ident).unwrap();
        assert!(a.class.iter().all(|c| *c == BandwidthClass::Affinity));
        assert_eq!(a.bandwidths(9.56e9, 5.51e9), vec![9.56e9; 8]);
        assert!((9.56f64 / 5.51 - 1.0 - 0.735).abs() < 0.001);

        let one = assign_nics(1, 1, &[0]).unwrap();
        assert_eq!(one.class, [BandwidthClass::Affinity]);

        let four = assign_nics(8, 4, &ident).unwrap();
        assert_eq!(four.loads(4), [2, 2, 2, 2]);
        assert!(assign_nics(1, 0, &[0]).is_err());
    }

    proptest! {
        #[test]
        fn p2p_monotone(a in 0u64..1 << 40, d in 1u64..1 << 20, bw in 1e6f64..1e11, lat in 0.0f64..1.0) {
            let l = link(bw, lat);
            prop_assert!(p2p_transfer_time(a + d, &l) > p2p_transfer_time(a, &l));
            prop_assert!(p2p_transfer_time(a, &link(bw * 2.0, lat)) <= p2p_transfer_time(a, &l));
            let grow = |b: u64| p2p_transfer_time(b, &l) - lat;
            prop_assert!(grow(2 * a) >= 2.0 * grow(a) * (1.0 - 1e-12));
        }

        #[test]
        fn assignment_balanced(chips in 0usize..64, nics in 1usize..16, aff in proptest::collection::vec(0usize..20, 64)) {
            let a = assign_nics(chips, nics, &aff[..chips]).unwrap();
            let loads = a.loads(nics);
            prop_assert!(loads.iter().max().unwrap() - loads.iter().min().unwrap() <= 1);
            for (c, &n) in a.nic.iter().enumerate() {
                if a.class[c] == BandwidthClass::Affinity {
                    prop_assert_eq!(aff[c], n);
                    prop_assert_eq!(loads[n], 1);
                }
            }
        }

        #[test]
        fn send_recv_never_slower(
            bytes in 0u64..1 << 32,
            src in 0u32..4,
            dst in 0u32..4,
            nics in 1usize..9,
            bw in 1e8f64..1e11,
            lat in 0.0f64..1e-2,
            factor in 1.0f64..100.0,
        ) {
            let l = link(bw, lat);
            let intra = bw * factor;
            let n = resharding_time(bytes, 1 << src, 1 << dst, nics, &l, intra, ReshardMethod::Naive).unwrap();
            let s = resharding_time(bytes, 1 << src, 1 << dst, nics, &l, intra, ReshardMethod::SendRecvAllGather).unwrap();
            prop_assert!(s <= n * (1.0 + 1e-12));
        }
    }
}
