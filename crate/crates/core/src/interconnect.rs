//! Cost models for the UB, RDMA and VPC network planes.
//!
//! All latencies are in microseconds and bandwidths in GB/s (10^9 bytes per
//! second), so `bytes / (bandwidth * 1e3)` is a duration in microseconds.
//!
//! Contention is modeled at the endpoints only: a die serializes its own
//! sends (see [`EndpointClock`]) and the switching fabric is treated as
//! non-blocking.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Measured dispatch latency / per-rank bandwidth by EP degree (batch 128 per rank).
pub const REFERENCE_DISPATCH: [EpMeasurement; 6] = [
    EpMeasurement::new(8, 116.0, 71.0),
    EpMeasurement::new(16, 131.0, 63.0),
    EpMeasurement::new(32, 133.0, 62.0),
    EpMeasurement::new(64, 141.0, 58.0),
    EpMeasurement::new(128, 152.0, 54.0),
    EpMeasurement::new(256, 152.0, 54.0),
];

/// Measured combine latency / per-rank bandwidth by EP degree (batch 128 per rank).
pub const REFERENCE_COMBINE: [EpMeasurement; 6] = [
    EpMeasurement::new(8, 118.0, 131.0),
    EpMeasurement::new(16, 132.0, 117.0),
    EpMeasurement::new(32, 146.0, 105.0),
    EpMeasurement::new(64, 150.0, 103.0),
    EpMeasurement::new(128, 150.0, 103.0),
    EpMeasurement::new(256, 149.0, 103.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaneKind {
    Ub,
    Rdma,
    Vpc,
}

impl PlaneKind {
    pub fn name(self) -> &'static str {
        match self {
            PlaneKind::Ub => "ub",
            PlaneKind::Rdma => "rdma",
            PlaneKind::Vpc => "vpc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// DMA engine copy; pays a larger startup.
    Sdma,
    /// Vector cores write straight into the peer's memory.
    AivDirect,
}

/// Parameters of one network plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub kind: PlaneKind,
    /// Unidirectional per-die bandwidth, GB/s.
    pub link_bandwidth: f64,
    pub base_latency_intra: f64,
    pub base_latency_inter: f64,
    /// Fractional bandwidth loss when crossing nodes.
    pub inter_node_bw_penalty: f64,
    pub sdma_startup: f64,
    pub aiv_direct_startup: f64,
    /// Growth of per-byte cost per doubling of the exchange width, used by
    /// [`estimate_ep_exchange`]. Zero means the width does not matter.
    #[serde(default)]
    pub fanout_slowdown: f64,
}

impl PlaneSpec {
    /// UB plane template before fitting; startups and base latencies are
    /// the fixed part of the calibration.
    pub fn ub_template() -> Self {
        PlaneSpec {
            kind: PlaneKind::Ub,
            link_bandwidth: 137.0,
            base_latency_intra: 1.3,
            base_latency_inter: 2.1,
            inter_node_bw_penalty: 0.03,
            sdma_startup: 10.0,
            aiv_direct_startup: 2.0,
            fanout_slowdown: 0.0,
        }
    }

    /// UB plane fitted to the dispatch endpoints (EP8, EP256).
    pub fn ub() -> Self {
        calibrate_plane(
            &[REFERENCE_DISPATCH[0], REFERENCE_DISPATCH[5]],
            &Self::ub_template(),
        )
        .expect("reference dispatch measurements are well formed")
    }

    /// UB plane fitted to the combine endpoints (EP8, EP256).
    pub fn ub_combine() -> Self {
        calibrate_plane(
            &[REFERENCE_COMBINE[0], REFERENCE_COMBINE[5]],
            &Self::ub_template(),
        )
        .expect("reference combine measurements are well formed")
    }

    pub fn rdma() -> Self {
        PlaneSpec {
            kind: PlaneKind::Rdma,
            link_bandwidth: 25.0,
            base_latency_intra: 5.0,
            base_latency_inter: 5.0,
            inter_node_bw_penalty: 0.0,
            sdma_startup: 10.0,
            aiv_direct_startup: 10.0,
            fanout_slowdown: 0.0,
        }
    }

    pub fn vpc() -> Self {
        PlaneSpec {
            kind: PlaneKind::Vpc,
            link_bandwidth: 3.125,
            base_latency_intra: 20.0,
            base_latency_inter: 20.0,
            inter_node_bw_penalty: 0.0,
            sdma_startup: 10.0,
            aiv_direct_startup: 10.0,
            fanout_slowdown: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.link_bandwidth > 0.0) {
            return Err(Error::invalid(format!(
                "{} plane bandwidth must be positive",
                self.kind.name()
            )));
        }
        if self.base_latency_inter < self.base_latency_intra {
            return Err(Error::invalid(format!(
                "{} plane inter-node latency below intra-node latency",
                self.kind.name()
            )));
        }
        if !(0.0..1.0).contains(&self.inter_node_bw_penalty) {
            return Err(Error::invalid(format!(
                "{} plane penalty must be in [0, 1)",
                self.kind.name()
            )));
        }
        if self.sdma_startup < 0.0 || self.aiv_direct_startup < 0.0 || self.base_latency_intra < 0.0 {
            return Err(Error::invalid(format!(
                "{} plane latencies must be nonnegative",
                self.kind.name()
            )));
        }
        Ok(())
    }

    pub fn startup(&self, mechanism: Mechanism) -> f64 {
        match mechanism {
            Mechanism::Sdma => self.sdma_startup,
            Mechanism::AivDirect => self.aiv_direct_startup,
        }
    }

    /// Bandwidth in bytes per microsecond for the given route.
    fn bytes_per_us(&self, inter_node: bool) -> f64 {
        let penalty = if inter_node { 1.0 - self.inter_node_bw_penalty } else { 1.0 };
        self.link_bandwidth * penalty * 1e3
    }

    /// Latency of a remote (inter-node) read of `bytes` through this plane.
    pub fn remote_access(&self, bytes: u64, mechanism: Mechanism) -> TransferEstimate {
        let latency = self.startup(mechanism)
            + self.base_latency_inter
            + bytes as f64 / self.bytes_per_us(true);
        TransferEstimate::new(bytes, latency)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferEstimate {
    /// Microseconds.
    pub latency: f64,
    /// Payload divided by latency, GB/s.
    pub effective_bandwidth: f64,
}

impl TransferEstimate {
    pub const ZERO: TransferEstimate = TransferEstimate {
        latency: 0.0,
        effective_bandwidth: 0.0,
    };

    fn new(bytes: u64, latency: f64) -> Self {
        let effective_bandwidth = if latency > 0.0 {
            bytes as f64 / latency / 1e3
        } else {
            0.0
        };
        TransferEstimate {
            latency,
            effective_bandwidth,
        }
    }
}

/// Die layout used to tell intra-node from inter-node routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub num_nodes: u32,
    pub dies_per_node: u32,
}

impl Topology {
    pub fn total_dies(&self) -> u32 {
        self.num_nodes * self.dies_per_node
    }

    pub fn node_of(&self, die: u32) -> Result<u32> {
        if die >= self.total_dies() {
            return Err(Error::UnknownDie {
                die,
                total: self.total_dies(),
            });
        }
        Ok(die / self.dies_per_node)
    }
}

/// Point-to-point transfer cost between two dies.
pub fn estimate_transfer(
    topology: &Topology,
    src_die: u32,
    dst_die: u32,
    bytes: u64,
    plane: &PlaneSpec,
    mechanism: Mechanism,
) -> Result<TransferEstimate> {
    let src_node = topology.node_of(src_die)?;
    let dst_node = topology.node_of(dst_die)?;
    if src_die == dst_die && bytes > 0 {
        return Err(Error::invalid("transfer with payload from a die to itself"));
    }
    let inter = src_node != dst_node;
    let base = if inter {
        plane.base_latency_inter
    } else {
        plane.base_latency_intra
    };
    let latency = plane.startup(mechanism) + base + bytes as f64 / plane.bytes_per_us(inter);
    Ok(TransferEstimate::new(bytes, latency))
}

/// All-to-all style exchange in which every rank of an `ep_degree`-wide
/// group sends `bytes_per_rank` in total. The per-byte cost grows by
/// `fanout_slowdown` for every doubling of the group.
pub fn estimate_ep_exchange(
    ep_degree: usize,
    bytes_per_rank: u64,
    plane: &PlaneSpec,
    mechanism: Mechanism,
) -> TransferEstimate {
    if ep_degree <= 1 {
        return TransferEstimate::ZERO;
    }
    let slowdown = 1.0 + plane.fanout_slowdown * (ep_degree as f64).log2();
    let latency = plane.startup(mechanism)
        + plane.base_latency_inter
        + bytes_per_rank as f64 * slowdown / (plane.link_bandwidth * 1e3);
    TransferEstimate::new(bytes_per_rank, latency)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllGather,
    AllToAll,
    Broadcast,
}

/// Closed-form collective cost, assuming inter-node routes and AIV-direct
/// writes.
///
/// * all-gather / all-to-all (pairwise exchange):
///   `startup + base_inter + (P - 1) * (bytes_per_rank / P) / bw_inter`
/// * broadcast (binomial tree):
///   `ceil(log2 P) * (startup + base_inter + bytes_per_rank / bw_inter)`
///
/// `bytes_per_rank` is the size of the full per-rank buffer (for all-gather,
/// the gathered output).
pub fn estimate_collective(
    kind: CollectiveKind,
    participants: usize,
    bytes_per_rank: u64,
    plane: &PlaneSpec,
) -> Result<TransferEstimate> {
    if participants == 0 {
        return Err(Error::invalid("collective needs at least one participant"));
    }
    if participants == 1 {
        return Ok(TransferEstimate::ZERO);
    }
    let p = participants as f64;
    let hop = plane.aiv_direct_startup + plane.base_latency_inter;
    let bw = plane.bytes_per_us(true);
    let latency = match kind {
        CollectiveKind::AllGather | CollectiveKind::AllToAll => {
            hop + (p - 1.0) * (bytes_per_rank as f64 / p) / bw
        }
        CollectiveKind::Broadcast => {
            let rounds = (participants as f64).log2().ceil();
            rounds * (hop + bytes_per_rank as f64 / bw)
        }
    };
    Ok(TransferEstimate::new(bytes_per_rank, latency))
}

/// One row of an EP-degree sweep: latency and achieved per-rank bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpMeasurement {
    pub ep_degree: usize,
    pub latency: f64,
    pub bandwidth: f64,
}

impl EpMeasurement {
    pub const fn new(ep_degree: usize, latency: f64, bandwidth: f64) -> Self {
        EpMeasurement {
            ep_degree,
            latency,
            bandwidth,
        }
    }

    /// Payload moved per rank, implied by latency x bandwidth.
    pub fn payload_bytes(&self) -> f64 {
        self.latency * self.bandwidth * 1e3
    }
}

/// Fits link bandwidth and fanout slowdown of `template` to measurements.
///
/// Startup and base latency come from the template. For each measurement
/// the time left after them is divided by the implied payload, giving a
/// per-byte cost, and a least-squares line of that cost against
/// `log2(ep_degree)` yields `1 / link_bandwidth` (intercept) and the
/// slowdown (slope / intercept). With two measurements the fit passes
/// through both points.
pub fn calibrate_plane(measurements: &[EpMeasurement], template: &PlaneSpec) -> Result<PlaneSpec> {
    if measurements.len() < 2 {
        return Err(Error::DegenerateCalibration(format!(
            "got {} measurement(s)",
            measurements.len()
        )));
    }
    let fixed = template.aiv_direct_startup + template.base_latency_inter;
    let mut xs = Vec::with_capacity(measurements.len());
    let mut ys = Vec::with_capacity(measurements.len());
    for m in measurements {
        if m.ep_degree < 2 || !(m.latency > fixed) || !(m.bandwidth > 0.0) {
            return Err(Error::invalid(format!(
                "measurement {m:?} is not usable (ep >= 2, latency > {fixed}us, bandwidth > 0)"
            )));
        }
        xs.push((m.ep_degree as f64).log2());
        ys.push((m.latency - fixed) / m.payload_bytes());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= f64::EPSILON {
        return Err(Error::DegenerateCalibration(
            "all measurements share one EP degree".into(),
        ));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    if !(intercept > 0.0) {
        return Err(Error::DegenerateCalibration(
            "fit yields a non-positive base per-byte cost".into(),
        ));
    }
    Ok(PlaneSpec {
        link_bandwidth: 1.0 / (intercept * 1e3),
        fanout_slowdown: slope / intercept,
        ..template.clone()
    })
}

/// Parses `ep_degree,latency,bandwidth` rows (header optional).
pub fn parse_measurements_csv(text: &str) -> Result<Vec<EpMeasurement>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Config(format!("csv row {}: {e}", i + 1)))?;
        if rec.len() != 3 {
            return Err(Error::Config(format!(
                "csv row {}: expected 3 fields, got {}",
                i + 1,
                rec.len()
            )));
        }
        let ep = rec[0].parse::<usize>();
        if ep.is_err() && i == 0 {
            // header
            continue;
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Config(format!("csv row {}: `{s}`: {e}", i + 1)))
        };
        let ep = ep.map_err(|e| Error::Config(format!("csv row {}: {e}", i + 1)))?;
        out.push(EpMeasurement::new(ep, parse(&rec[1])?, parse(&rec[2])?));
    }
    Ok(out)
}

/// Per-die send serialization: a die issues one transfer at a time.
#[derive(Debug, Default, Clone)]
pub struct EndpointClock {
    free_at: std::collections::HashMap<u32, f64>,
}

impl EndpointClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Books a transfer of `duration` on `die` no earlier than `ready`,
    /// returning its completion time.
    pub fn book(&mut self, die: u32, ready: f64, duration: f64) -> f64 {
        let slot = self.free_at.entry(die).or_insert(0.0);
        let start = slot.max(ready);
        *slot = start + duration;
        *slot
    }
}
