//! Prefill-side parallelism and the prefill to decode handoff.
//!
//! MLA prefill runs in three stages over the same group of dies: sequence
//! parallel down-projection over a packed token stream, an all-gather, tensor
//! parallel attention with heads split across dies, an all-to-all back to
//! the sequence layout, and sequence parallel output work.
//!
//! Decode ranks pull KV caches from prefill ranks along a fixed mapping:
//!
//! ```text
//! ratio             = prefill_tp_size / decode_tp_size
//! group_size        = decode_dp_size / ratio
//! group_id          = decode_dp_rank_id / group_size
//! prefill_tp_rank_id = group_id * decode_tp_size + decode_tp_rank_id
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::interconnect::{estimate_collective, CollectiveKind, Mechanism, PlaneKind, PlaneSpec};
use crate::pipeline::EventQueue;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub request: u64,
    /// Token range within the request, half open.
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PackedBatch {
    pub requests: Vec<(u64, u32)>,
    pub rank_token_counts: Vec<u64>,
    pub segment_map: Vec<Vec<Segment>>,
}

impl PackedBatch {
    pub fn total_tokens(&self) -> u64 {
        self.rank_token_counts.iter().sum()
    }

    pub fn num_ranks(&self) -> usize {
        self.rank_token_counts.len()
    }
}

/// Concatenates prompts in order and cuts the result into `num_ranks`
/// contiguous pieces; the first `total % num_ranks` ranks get one extra
/// token. With fewer tokens than ranks the trailing ranks stay empty.
pub fn pack_sequences(requests: &[(u64, u32)], num_ranks: usize) -> Result<PackedBatch> {
    if requests.is_empty() {
        return Err(Error::invalid("no requests to pack"));
    }
    if num_ranks == 0 {
        return Err(Error::invalid("num_ranks must be at least 1"));
    }
    let total: u64 = requests.iter().map(|r| r.1 as u64).sum();
    let n = num_ranks as u64;
    let counts: Vec<u64> = (0..n).map(|r| total / n + u64::from(r < total % n)).collect();

    let mut segment_map = vec![Vec::new(); num_ranks];
    let mut rank = 0usize;
    let mut room = counts[0];
    for &(id, len) in requests {
        let mut pos = 0u32;
        while pos < len {
            while room == 0 {
                rank += 1;
                room = counts[rank];
            }
            let take = (room).min((len - pos) as u64) as u32;
            segment_map[rank].push(Segment {
                request: id,
                start: pos,
                end: pos + take,
            });
            pos += take;
            room -= take as u64;
        }
    }
    Ok(PackedBatch {
        requests: requests.to_vec(),
        rank_token_counts: counts,
        segment_map,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImbalanceReport {
    /// Max over mean per-rank tokens with whole requests per rank; `None`
    /// when some ranks get no request.
    pub dp_imbalance: Option<f64>,
    pub dp_idle_ranks: usize,
    pub hybrid_imbalance: f64,
}

fn max_over_mean(loads: &[u64]) -> f64 {
    let total: u64 = loads.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let mean = total as f64 / loads.len() as f64;
    *loads.iter().max().expect("nonempty") as f64 / mean
}

/// Pure data parallelism places whole requests round-robin on ranks; the
/// hybrid scheme packs tokens.
pub fn compare_dp_vs_hybrid(prompt_lens: &[u32], num_ranks: usize) -> Result<ImbalanceReport> {
    let reqs: Vec<(u64, u32)> = prompt_lens.iter().enumerate().map(|(i, &l)| (i as u64, l)).collect();
    let packed = pack_sequences(&reqs, num_ranks)?;
    let mut dp = vec![0u64; num_ranks];
    for (i, &l) in prompt_lens.iter().enumerate() {
        dp[i % num_ranks] += l as u64;
    }
    let idle = num_ranks.saturating_sub(prompt_lens.len());
    Ok(ImbalanceReport {
        dp_imbalance: (idle == 0).then(|| max_over_mean(&dp)),
        dp_idle_ranks: idle,
        hybrid_imbalance: max_over_mean(&packed.rank_token_counts),
    })
}

/// Widths used to size the two collectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlaConfig {
    pub hidden_dim: u32,
    pub num_heads: u32,
    /// Bytes per token after the down-projection (the all-gather payload):
    /// 1536 query + 576 latent KV values in BF16.
    pub gather_bytes_per_token: u64,
    /// Bytes per token per head of attention output (128 values in BF16).
    pub head_out_bytes: u64,
}

impl Default for MlaConfig {
    fn default() -> Self {
        MlaConfig {
            hidden_dim: 7168,
            num_heads: 128,
            gather_bytes_per_token: 2112 * 2,
            head_out_bytes: 128 * 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollectiveStep {
    pub kind: CollectiveKind,
    /// Total bytes moved across the group.
    pub volume: u64,
    /// Microseconds; zero when skipped.
    pub latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StagePlan {
    pub stage1_tokens: Vec<u64>,
    pub collective_a: CollectiveStep,
    pub heads_per_rank: Vec<u32>,
    pub collective_b: CollectiveStep,
    pub stage3_tokens: Vec<u64>,
}

impl StagePlan {
    pub fn comm_latency(&self) -> f64 {
        self.collective_a.latency + self.collective_b.latency
    }
}

/// Plans the three stages over the packed group. The all-gather collects
/// every token's down-projected state on every die
/// (`volume = tokens * gather_bytes_per_token`); the all-to-all returns
/// each die's head outputs to the token owners
/// (`volume = tokens * num_heads * head_out_bytes`, zero for one die).
pub fn plan_mla_stages(packed: &PackedBatch, tp_degree: usize, cfg: &MlaConfig, plane: &PlaneSpec) -> Result<StagePlan> {
    if tp_degree == 0 {
        return Err(Error::invalid("tp_degree must be at least 1"));
    }
    if tp_degree > cfg.num_heads as usize {
        return Err(Error::invalid(format!(
            "tp_degree {tp_degree} exceeds {} heads",
            cfg.num_heads
        )));
    }
    if packed.num_ranks() != tp_degree {
        return Err(Error::Shape(format!(
            "batch packed over {} ranks, TP group has {tp_degree}",
            packed.num_ranks()
        )));
    }
    let h = cfg.num_heads as usize;
    let heads_per_rank: Vec<u32> = (0..tp_degree)
        .map(|r| (h / tp_degree + usize::from(r < h % tp_degree)) as u32)
        .collect();
    let tokens = packed.total_tokens();
    let gather_volume = tokens * cfg.gather_bytes_per_token;
    let a2a_volume = if tp_degree > 1 {
        tokens * cfg.num_heads as u64 * cfg.head_out_bytes
    } else {
        0
    };
    let gather = estimate_collective(CollectiveKind::AllGather, tp_degree, gather_volume, plane)?;
    let a2a = if a2a_volume > 0 {
        estimate_collective(CollectiveKind::AllToAll, tp_degree, a2a_volume / tp_degree as u64, plane)?
    } else {
        crate::interconnect::TransferEstimate::ZERO
    };
    Ok(StagePlan {
        stage1_tokens: packed.rank_token_counts.clone(),
        collective_a: CollectiveStep {
            kind: CollectiveKind::AllGather,
            volume: gather_volume,
            latency: gather.latency,
        },
        heads_per_rank,
        collective_b: CollectiveStep {
            kind: CollectiveKind::AllToAll,
            volume: a2a_volume,
            latency: a2a.latency,
        },
        stage3_tokens: packed.rank_token_counts.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdConnection {
    pub prefill_tp_size: usize,
    pub decode_tp_size: usize,
    pub decode_dp_size: usize,
    pub ratio: usize,
    pub group_size: usize,
    /// `mapping[dp][tp]` is the prefill TP rank serving that decode rank.
    pub mapping: Vec<Vec<usize>>,
}

impl PdConnection {
    pub fn prefill_rank(&self, decode_dp_rank: usize, decode_tp_rank: usize) -> usize {
        self.mapping[decode_dp_rank][decode_tp_rank]
    }

    /// Decode ranks served by each prefill rank.
    pub fn load_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.prefill_tp_size];
        for row in &self.mapping {
            for &p in row {
                h[p] += 1;
            }
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("decode_dp_rank,decode_tp_rank,group_id,prefill_tp_rank\n");
        for (dp, row) in self.mapping.iter().enumerate() {
            for (tp, &p) in row.iter().enumerate() {
                let _ = writeln!(s, "{dp},{tp},{},{p}", dp / self.group_size);
            }
        }
        s
    }
}

pub fn map_connections(prefill_tp_size: usize, decode_tp_size: usize, decode_dp_size: usize) -> Result<PdConnection> {
    if prefill_tp_size == 0 || decode_tp_size == 0 || decode_dp_size == 0 {
        return Err(Error::invalid("parallel sizes must be positive"));
    }
    if !prefill_tp_size.is_multiple_of(decode_tp_size) {
        return Err(Error::Divisibility(format!(
            "prefill_tp_size {prefill_tp_size} is not divisible by decode_tp_size {decode_tp_size}"
        )));
    }
    let ratio = prefill_tp_size / decode_tp_size;
    if !decode_dp_size.is_multiple_of(ratio) {
        return Err(Error::Divisibility(format!(
            "decode_dp_size {decode_dp_size} is not divisible by ratio {ratio}"
        )));
    }
    let group_size = decode_dp_size / ratio;
    let mapping = (0..decode_dp_size)
        .map(|dp| {
            let group_id = dp / group_size;
            (0..decode_tp_size).map(|tp| group_id * decode_tp_size + tp).collect()
        })
        .collect();
    Ok(PdConnection {
        prefill_tp_size,
        decode_tp_size,
        decode_dp_size,
        ratio,
        group_size,
        mapping,
    })
}

/// KV receive buffer of a decode instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeInstance {
    pub id: u32,
    pub buffer_capacity: u64,
    pub buffer_used: u64,
}

impl DecodeInstance {
    pub fn new(id: u32, buffer_capacity: u64) -> Self {
        DecodeInstance {
            id,
            buffer_capacity,
            buffer_used: 0,
        }
    }

    fn allocate(&mut self, bytes: u64) -> Result<()> {
        let free = self.buffer_capacity - self.buffer_used;
        if bytes > free {
            return Err(Error::AllocationFailed { needed: bytes, free });
        }
        self.buffer_used += bytes;
        Ok(())
    }

    pub fn release(&mut self, bytes: u64) {
        self.buffer_used = self.buffer_used.saturating_sub(bytes);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum HandoffStep {
    /// Decode side reserves the KV buffer.
    Allocate,
    /// Request handed to the prefill instance.
    PrefillDispatch,
    PrefillDone,
    TransferStart,
    TransferDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct HandoffEvent {
    pub request: u64,
    pub prefill_instance: u32,
    pub decode_instance: u32,
    pub step: HandoffStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KvTransfer {
    pub request: u64,
    pub kv_bytes: u64,
    /// Microseconds on the RDMA plane.
    pub latency: f64,
    pub rdma_bytes: u64,
    pub ub_bytes: u64,
    /// Microseconds, absolute.
    pub done_at: u64,
}

/// Schedules the handoff of one request: the destination buffer is
/// reserved before prefill starts, and the KV cache moves over the RDMA
/// plane after prefill ends, off the decode critical path.
#[allow(clippy::too_many_arguments)]
pub fn schedule_kv_transfer(
    queue: &mut EventQueue<HandoffEvent>,
    request: u64,
    prompt_len: u32,
    kv_bytes_per_token: u64,
    prefill_instance: u32,
    prefill_latency: u64,
    dst: &mut DecodeInstance,
    rdma: &PlaneSpec,
) -> Result<KvTransfer> {
    if rdma.kind != PlaneKind::Rdma {
        return Err(Error::invalid(format!(
            "KV handoff runs on the RDMA plane, got {}",
            rdma.kind.name()
        )));
    }
    let kv_bytes = prompt_len as u64 * kv_bytes_per_token;
    dst.allocate(kv_bytes)?;
    let ev = |step| HandoffEvent {
        request,
        prefill_instance,
        decode_instance: dst.id,
        step,
    };
    let now = queue.now();
    let latency = rdma.remote_access(kv_bytes, Mechanism::Sdma).latency;
    let prefill_done = now + prefill_latency;
    let done_at = prefill_done + latency.ceil() as u64;
    queue.schedule(now, ev(HandoffStep::Allocate))?;
    queue.schedule(now, ev(HandoffStep::PrefillDispatch))?;
    queue.schedule(prefill_done, ev(HandoffStep::PrefillDone))?;
    queue.schedule(prefill_done, ev(HandoffStep::TransferStart))?;
    queue.schedule(done_at, ev(HandoffStep::TransferDone))?;
    Ok(KvTransfer {
        request,
        kv_bytes,
        latency,
        rdma_bytes: kv_bytes,
        ub_bytes: 0,
        done_at,
    })
}
