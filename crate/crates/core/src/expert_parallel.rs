//! Expert placement, top-K routing, load balancing with redundant experts,
//! and a cost model of the fused dispatch / combine operators.
//!
//! Buffer sizing follows
//!
//! ```text
//! max_tokens  = local_batch * min(top_k, experts_per_die)
//! buffer_size = rank_num * max_tokens * msg_size
//! ```
//!
//! Shared experts are replicated and served locally, so they never appear
//! in dispatch traffic.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::interconnect::{estimate_ep_exchange, Mechanism, PlaneSpec};
use crate::{Error, Result};

/// 7 KB INT8 hidden state plus a 512 B slot for its scale.
pub const DISPATCH_MSG_BYTES: u64 = 7 * 1024 + 512;
/// 7168 BF16 values.
pub const COMBINE_MSG_BYTES: u64 = 14 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpertSlot {
    /// Copy index of the shared expert.
    Shared(u32),
    /// Primary instance of a router expert.
    Router(u32),
    /// Extra replica of a router expert.
    Redundant(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertPlacement {
    pub ep_degree: usize,
    pub experts_per_die: usize,
    pub assignment: Vec<Vec<ExpertSlot>>,
    pub shared_copies: usize,
    pub router_count: usize,
    pub redundant_count: usize,
    /// Ranks hosting each router expert, primary first.
    replicas: Vec<Vec<usize>>,
}

impl ExpertPlacement {
    pub fn replicas(&self, expert: u32) -> &[usize] {
        &self.replicas[expert as usize]
    }

    pub fn total_slots(&self) -> usize {
        self.assignment.iter().map(Vec::len).sum()
    }
}

/// Lays out experts slot-round by slot-round: round `j` fills slot `j` of
/// ranks `0..ep_degree`. Shared copies come first, then router experts in id
/// order, then redundant replicas chosen by [`eplb_rebalance`] on
/// `initial_load` (uniform when absent). A replica avoids ranks that already
/// host its expert when possible.
pub fn build_placement(
    ep_degree: usize,
    shared_copies: usize,
    router_count: usize,
    redundant_count: usize,
    initial_load: Option<&[f64]>,
) -> Result<ExpertPlacement> {
    if ep_degree == 0 || router_count == 0 {
        return Err(Error::Placement("ep_degree and router_count must be positive".into()));
    }
    let total = shared_copies + router_count + redundant_count;
    if !total.is_multiple_of(ep_degree) {
        return Err(Error::Placement(format!(
            "{shared_copies} shared + {router_count} router + {redundant_count} redundant = {total} experts \
             do not fill {ep_degree} ranks evenly"
        )));
    }
    let experts_per_die = total / ep_degree;
    let uniform;
    let load = match initial_load {
        Some(l) if l.len() == router_count => l,
        Some(l) => {
            return Err(Error::Placement(format!(
                "initial load has {} entries for {router_count} router experts",
                l.len()
            )))
        }
        None => {
            uniform = vec![1.0; router_count];
            &uniform[..]
        }
    };

    let mut assignment: Vec<Vec<ExpertSlot>> = vec![Vec::with_capacity(experts_per_die); ep_degree];
    let mut replicas: Vec<Vec<usize>> = vec![Vec::new(); router_count];
    let mut next = 0usize;
    let slot_rank = |i: usize| i % ep_degree;
    for c in 0..shared_copies {
        assignment[slot_rank(next)].push(ExpertSlot::Shared(c as u32));
        next += 1;
    }
    for (e, reps) in replicas.iter_mut().enumerate() {
        let r = slot_rank(next);
        assignment[r].push(ExpertSlot::Router(e as u32));
        reps.push(r);
        next += 1;
    }
    let mut free: Vec<usize> = (next..total).map(slot_rank).collect();
    for e in eplb_rebalance(load, redundant_count) {
        let pos = free
            .iter()
            .position(|r| !replicas[e as usize].contains(r))
            .unwrap_or(0);
        let r = free.remove(pos);
        assignment[r].push(ExpertSlot::Redundant(e));
        replicas[e as usize].push(r);
    }
    Ok(ExpertPlacement {
        ep_degree,
        experts_per_die,
        assignment,
        shared_copies,
        router_count,
        redundant_count,
        replicas,
    })
}

/// Chooses which experts receive the `redundant_count` extra replicas:
/// repeatedly duplicate the expert with the highest load per replica,
/// lowest id on ties.
pub fn eplb_rebalance(load: &[f64], redundant_count: usize) -> Vec<u32> {
    if load.is_empty() {
        return Vec::new();
    }
    let mut copies = vec![1usize; load.len()];
    let mut out = Vec::with_capacity(redundant_count);
    for _ in 0..redundant_count {
        let mut best = 0usize;
        for e in 1..load.len() {
            if load[e] / copies[e] as f64 > load[best] / copies[best] as f64 {
                best = e;
            }
        }
        copies[best] += 1;
        out.push(best as u32);
    }
    out
}

/// Highest load per replica after adding `replicas` (one entry per extra copy).
pub fn max_effective_load(load: &[f64], replicas: &[u32]) -> f64 {
    let mut copies = vec![1usize; load.len()];
    for &e in replicas {
        copies[e as usize] += 1;
    }
    load.iter()
        .zip(&copies)
        .map(|(l, c)| l / *c as f64)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BufferPlan {
    pub rank_num: u64,
    pub local_batch: u64,
    pub top_k: u64,
    pub experts_per_die: u64,
    pub dispatch_msg_size: u64,
    pub combine_msg_size: u64,
    pub max_tokens: u64,
    pub dispatch_buffer: u64,
    pub combine_buffer: u64,
    pub double_buffered: bool,
}

impl BufferPlan {
    pub fn total(&self) -> u64 {
        self.dispatch_buffer + self.combine_buffer
    }
}

pub fn plan_buffers(
    rank_num: u64,
    local_batch: u64,
    top_k: u64,
    experts_per_die: u64,
    dispatch_msg_size: u64,
    combine_msg_size: u64,
) -> BufferPlan {
    let max_tokens = local_batch * top_k.min(experts_per_die);
    BufferPlan {
        rank_num,
        local_batch,
        top_k,
        experts_per_die,
        dispatch_msg_size,
        combine_msg_size,
        max_tokens,
        dispatch_buffer: rank_num * max_tokens * dispatch_msg_size,
        combine_buffer: rank_num * max_tokens * combine_msg_size,
        double_buffered: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenRoute {
    /// Router expert ids, highest score first.
    pub experts: Vec<u32>,
    /// Softmax over the selected scores.
    pub weights: Vec<f64>,
    /// Rank serving each selected expert.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingBatch {
    pub src_rank: usize,
    pub decisions: Vec<TokenRoute>,
    /// Token-expert arrivals per destination rank.
    pub histogram: Vec<usize>,
}

impl RoutingBatch {
    pub fn tokens(&self) -> usize {
        self.decisions.len()
    }
}

/// Routes each token of `src_rank` to its `top_k` best router experts (ties
/// by lower id). Replicated experts are chosen round-robin, starting at an
/// offset given by the source rank.
pub fn route_tokens(
    gate_scores: &[Vec<f64>],
    placement: &ExpertPlacement,
    top_k: usize,
    src_rank: usize,
) -> Result<RoutingBatch> {
    let n_exp = placement.router_count;
    if top_k > n_exp {
        return Err(Error::invalid(format!("top_k {top_k} exceeds {n_exp} router experts")));
    }
    let mut rr: HashMap<u32, usize> = HashMap::new();
    let mut histogram = vec![0usize; placement.ep_degree];
    let mut decisions = Vec::with_capacity(gate_scores.len());
    let mut order: Vec<u32> = Vec::with_capacity(n_exp);
    for (t, scores) in gate_scores.iter().enumerate() {
        if scores.len() != n_exp {
            return Err(Error::Shape(format!(
                "token {t} has {} gate scores, expected {n_exp}",
                scores.len()
            )));
        }
        order.clear();
        order.extend(0..n_exp as u32);
        let cmp = |a: &u32, b: &u32| {
            scores[*b as usize]
                .total_cmp(&scores[*a as usize])
                .then(a.cmp(b))
        };
        if top_k > 0 && top_k < n_exp {
            order.select_nth_unstable_by(top_k - 1, cmp);
        }
        let mut experts: Vec<u32> = order[..top_k].to_vec();
        experts.sort_by(cmp);
        let top = experts.first().map_or(0.0, |&e| scores[e as usize]);
        let exps: Vec<f64> = experts.iter().map(|&e| (scores[e as usize] - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        let weights = exps.iter().map(|x| x / z).collect();
        let ranks = experts
            .iter()
            .map(|&e| {
                let reps = placement.replicas(e);
                let c = rr.entry(e).or_insert(src_rank);
                let r = reps[*c % reps.len()];
                *c += 1;
                histogram[r] += 1;
                r
            })
            .collect();
        decisions.push(TokenRoute {
            experts,
            weights,
            ranks,
        });
    }
    Ok(RoutingBatch {
        src_rank,
        decisions,
        histogram,
    })
}

/// Uniform random gate scores for `tokens` tokens.
pub fn random_gate_scores(tokens: usize, router_count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..tokens)
        .map(|_| (0..router_count).map(|_| rng.random::<f64>()).collect())
        .collect()
}

/// Routes `tokens_per_rank` random tokens on every rank; rank `r` draws from
/// stream `r` of `seed`.
pub fn random_routing(
    placement: &ExpertPlacement,
    tokens_per_rank: usize,
    top_k: usize,
    seed: u64,
) -> Result<Vec<RoutingBatch>> {
    (0..placement.ep_degree)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let scores = random_gate_scores(tokens_per_rank, placement.router_count, &mut rng);
            route_tokens(&scores, placement, top_k, r)
        })
        .collect()
}

/// Max over mean of per-rank arrivals.
pub fn load_imbalance(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let mean = total as f64 / histogram.len() as f64;
    *histogram.iter().max().unwrap() as f64 / mean
}

/// Per-message stage times of the send pipeline, microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DispatchConfig {
    /// Copy of the next token into the local staging buffer.
    pub copy_us: f64,
    /// Offset computation and INT8 quantization.
    pub quantize_us: f64,
    /// Barrier wait after the last write, excluding the flag write.
    pub barrier_us: f64,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        DispatchConfig {
            copy_us: 0.02,
            quantize_us: 0.03,
            barrier_us: 1.0,
        }
    }
}

/// Everything combine needs to know about a dispatch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispatchStats {
    pub ep_degree: usize,
    pub top_k: usize,
    pub local_batch: Vec<usize>,
    /// `sent[src][dst]` token-expert messages.
    pub sent: Vec<Vec<usize>>,
    pub received: Vec<usize>,
    /// Per source rank, per token: `(dst rank, expert, weight)`.
    pub contributions: Vec<Vec<Vec<(usize, u32, f64)>>>,
}

impl DispatchStats {
    pub fn total_sent(&self) -> usize {
        self.sent.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseResult {
    pub per_rank_latency: Vec<f64>,
    /// Bytes each rank puts on the wire.
    pub per_rank_bytes: Vec<u64>,
}

impl PhaseResult {
    pub fn max_latency(&self) -> f64 {
        self.per_rank_latency.iter().copied().fold(0.0, f64::max)
    }

    /// Bandwidth of the slowest rank's sends, GB/s.
    pub fn per_rank_bandwidth(&self) -> f64 {
        let lat = self.max_latency();
        let bytes = self.per_rank_bytes.iter().copied().max().unwrap_or(0);
        if lat > 0.0 {
            bytes as f64 / lat / 1e3
        } else {
            0.0
        }
    }
}

/// Time of `messages` passes through the copy / quantize / write pipeline:
/// fill plus `(n - 1)` times the slowest stage, after the write startup.
/// The final flag write and the barrier follow.
fn send_phase_latency(
    ep_degree: usize,
    messages: usize,
    msg_bytes: u64,
    local_stages: &[f64],
    plane: &PlaneSpec,
    cfg: &DispatchConfig,
) -> f64 {
    let flag = plane.aiv_direct_startup + plane.base_latency_inter;
    let sync = cfg.barrier_us + flag;
    if messages == 0 {
        return sync;
    }
    let exchange = estimate_ep_exchange(ep_degree.max(2), messages as u64 * msg_bytes, plane, Mechanism::AivDirect);
    let startup = plane.aiv_direct_startup + plane.base_latency_inter;
    let write = (exchange.latency - startup) / messages as f64;
    let fill: f64 = local_stages.iter().sum::<f64>() + write;
    let slowest = local_stages.iter().copied().fold(write, f64::max);
    startup + fill + (messages - 1) as f64 * slowest + sync
}

/// Dispatch of one routing batch per rank. Fails if any source would write
/// more than `max_tokens` messages into one peer's buffer.
pub fn simulate_dispatch(
    batches: &[RoutingBatch],
    plan: &BufferPlan,
    plane: &PlaneSpec,
    cfg: &DispatchConfig,
) -> Result<(PhaseResult, DispatchStats)> {
    let p = batches.len();
    let top_k = batches
        .iter()
        .flat_map(|b| b.decisions.first())
        .map(|d| d.experts.len())
        .next()
        .unwrap_or(plan.top_k as usize);
    let mut sent = vec![vec![0usize; p]; p];
    let mut received = vec![0usize; p];
    let mut contributions = Vec::with_capacity(p);
    for (src, b) in batches.iter().enumerate() {
        let mut per_token = Vec::with_capacity(b.decisions.len());
        for d in &b.decisions {
            let mut c = Vec::with_capacity(d.experts.len());
            for ((&e, &w), &dst) in d.experts.iter().zip(&d.weights).zip(&d.ranks) {
                if dst >= p {
                    return Err(Error::invalid(format!("route to rank {dst} outside {p} ranks")));
                }
                sent[src][dst] += 1;
                received[dst] += 1;
                c.push((dst, e, w));
            }
            per_token.push(c);
        }
        contributions.push(per_token);
        for (dst, &n) in sent[src].iter().enumerate() {
            if n as u64 > plan.max_tokens {
                return Err(Error::BufferOverflow {
                    src,
                    dst,
                    tokens: n,
                    max_tokens: plan.max_tokens as usize,
                });
            }
        }
    }
    let stages = [cfg.copy_us, cfg.quantize_us];
    let mut lat = Vec::with_capacity(p);
    let mut bytes = Vec::with_capacity(p);
    for row in &sent {
        let n: usize = row.iter().sum();
        lat.push(send_phase_latency(p, n, plan.dispatch_msg_size, &stages, plane, cfg));
        bytes.push(n as u64 * plan.dispatch_msg_size);
    }
    let stats = DispatchStats {
        ep_degree: p,
        top_k,
        local_batch: batches.iter().map(RoutingBatch::tokens).collect(),
        sent,
        received,
        contributions,
    };
    Ok((
        PhaseResult {
            per_rank_latency: lat,
            per_rank_bytes: bytes,
        },
        stats,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CombineResult {
    pub phase: PhaseResult,
    /// Tokens reconstructed per rank.
    pub outputs_per_rank: Vec<usize>,
    /// Sum of combine weights per token; 1 when every contribution arrived.
    pub weight_sums: Vec<Vec<f64>>,
}

/// Combine: every expert output travels back to its token's home rank and
/// is accumulated there. Each token must collect exactly `top_k`
/// contributions.
pub fn simulate_combine(
    stats: &DispatchStats,
    plan: &BufferPlan,
    plane: &PlaneSpec,
    cfg: &DispatchConfig,
) -> Result<CombineResult> {
    let p = stats.ep_degree;
    let mut outputs = vec![0usize; p];
    let mut weight_sums = Vec::with_capacity(p);
    for (rank, tokens) in stats.contributions.iter().enumerate() {
        let mut sums = Vec::with_capacity(tokens.len());
        for (t, c) in tokens.iter().enumerate() {
            if c.len() != stats.top_k {
                return Err(Error::MissingContributions {
                    rank,
                    token: t,
                    got: c.len(),
                    expected: stats.top_k,
                });
            }
            sums.push(c.iter().map(|x| x.2).sum());
        }
        outputs[rank] = tokens.len();
        weight_sums.push(sums);
    }
    // Combine sends back what dispatch delivered; the write stage adds the
    // atomic accumulate, the copy stage reads the expert output.
    let stages = [cfg.copy_us];
    let lat = stats
        .received
        .iter()
        .map(|&n| send_phase_latency(p, n, plan.combine_msg_size, &stages, plane, cfg))
        .collect();
    let bytes = stats.received.iter().map(|&n| n as u64 * plan.combine_msg_size).collect();
    Ok(CombineResult {
        phase: PhaseResult {
            per_rank_latency: lat,
            per_rank_bytes: bytes,
        },
        outputs_per_rank: outputs,
        weight_sums,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum BufferRegion {
    Dispatch,
    Combine,
}

impl BufferRegion {
    fn name(self) -> &'static str {
        match self {
            BufferRegion::Dispatch => "dispatch",
            BufferRegion::Combine => "combine",
        }
    }
}

/// Tracks which batch currently owns each rank's dispatch and combine
/// buffers, so overlapping phases can be checked for aliasing.
#[derive(Debug, Clone, Default)]
pub struct BufferLedger {
    owner: HashMap<(usize, BufferRegion), u64>,
}

impl BufferLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Batch `batch` starts writing `region` on `rank`.
    pub fn write(&mut self, rank: usize, region: BufferRegion, batch: u64) -> Result<()> {
        match self.owner.get(&(rank, region)) {
            Some(&b) if b != batch => Err(Error::BufferAliasing {
                rank,
                region: region.name(),
            }),
            _ => {
                self.owner.insert((rank, region), batch);
                Ok(())
            }
        }
    }

    /// The consumer of `region` on `rank` is done with `batch`.
    pub fn release(&mut self, rank: usize, region: BufferRegion, batch: u64) {
        if self.owner.get(&(rank, region)) == Some(&batch) {
            self.owner.remove(&(rank, region));
        }
    }

    pub fn owner(&self, rank: usize, region: BufferRegion) -> Option<u64> {
        self.owner.get(&(rank, region)).copied()
    }
}

/// One row of a dispatch / combine sweep over EP degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpSweepRow {
    pub ep_degree: usize,
    pub dispatch_latency: f64,
    pub dispatch_bandwidth: f64,
    pub combine_latency: f64,
    pub combine_bandwidth: f64,
}

/// Uniform random routing of `tokens_per_rank` tokens over `router_count`
/// router experts spread evenly across `ep_degree` ranks, no shared or
/// redundant experts.
#[allow(clippy::too_many_arguments)]
pub fn ep_sweep_point(
    ep_degree: usize,
    router_count: usize,
    tokens_per_rank: usize,
    top_k: usize,
    dispatch_plane: &PlaneSpec,
    combine_plane: &PlaneSpec,
    cfg: &DispatchConfig,
    seed: u64,
) -> Result<EpSweepRow> {
    let placement = build_placement(ep_degree, 0, router_count, 0, None)?;
    let plan = plan_buffers(
        ep_degree as u64,
        tokens_per_rank as u64,
        top_k as u64,
        placement.experts_per_die as u64,
        DISPATCH_MSG_BYTES,
        COMBINE_MSG_BYTES,
    );
    let batches = random_routing(&placement, tokens_per_rank, top_k, seed)?;
    let (d, stats) = simulate_dispatch(&batches, &plan, dispatch_plane, cfg)?;
    let c = simulate_combine(&stats, &plan, combine_plane, cfg)?;
    Ok(EpSweepRow {
        ep_degree,
        dispatch_latency: d.max_latency(),
        dispatch_bandwidth: d.per_rank_bandwidth(),
        combine_latency: c.phase.max_latency(),
        combine_bandwidth: c.phase.per_rank_bandwidth(),
    })
}
