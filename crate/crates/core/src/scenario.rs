//! Scenario configuration, end-to-end runs and parameter sweeps.
//!
//! A run follows requests through the serving path: the workload generator
//! produces prompts, prefill batches look up reusable prefixes in the
//! pool-backed context cache, compute the remaining tokens, write their KV
//! blocks back, and hand the KV cache to a decode instance over RDMA.
//! Decode latency comes from the calibrated stage-table model and the
//! expert-parallel exchange from the dispatch/combine simulation.

use std::hash::Hash;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context_cache::{split_into_blocks, ContextCache};
use crate::expert_parallel::{
    build_placement, plan_buffers, random_routing, simulate_combine, simulate_dispatch, DispatchConfig,
    COMBINE_MSG_BYTES, DISPATCH_MSG_BYTES,
};
use crate::hash::Fnv64;
use crate::interconnect::{Mechanism, PlaneKind, PlaneSpec};
use crate::mempool::{MemoryPool, NamespaceSpec, PoolConfig};
use crate::pipeline::{
    decode_layer_latency, default_decode_streams, default_prefill_stages, prefill_layer_latency, DecodeLatencyModel,
    DieResources, EventQueue, MtpConfig, PrefillStages, StreamSpec, TpotPoint, DEFAULT_SERIAL_FRACTION,
};
use crate::prefill_hybrid::{pack_sequences, plan_mla_stages, schedule_kv_transfer, DecodeInstance, MlaConfig};
use crate::workload::{generate_workload, validate_specs, Arrival, ClusterSpec, MoEModelSpec, Request, WorkloadSpec};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_name() -> String {
    "scenario".into()
}

fn default_seed() -> u64 {
    0x5eed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanesConfig {
    /// Scale-up plane as seen by dispatch and by pool access.
    pub ub: PlaneSpec,
    /// Scale-up plane as seen by combine.
    pub ub_combine: PlaneSpec,
    pub rdma: PlaneSpec,
    pub vpc: PlaneSpec,
}

impl Default for PlanesConfig {
    fn default() -> Self {
        PlanesConfig {
            ub: PlaneSpec::ub(),
            ub_combine: PlaneSpec::ub_combine(),
            rdma: PlaneSpec::rdma(),
            vpc: PlaneSpec::vpc(),
        }
    }
}

impl PlanesConfig {
    pub fn get(&self, kind: PlaneKind) -> &PlaneSpec {
        match kind {
            PlaneKind::Ub => &self.ub,
            PlaneKind::Rdma => &self.rdma,
            PlaneKind::Vpc => &self.vpc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeploymentConfig {
    pub prefill_instances: u32,
    pub prefill_dies_per_instance: u32,
    /// Dies sharing one prefill batch through the staged MLA parallelism.
    pub prefill_tp: u32,
    pub decode_instances: u32,
    pub decode_ep_degree: u32,
    /// Requests per die in one decode step.
    pub decode_batch: u32,
    pub shared_expert_copies: u32,
    /// `None` fills the remaining slots so every die hosts the same number
    /// of experts.
    pub redundant_experts: Option<u32>,
    /// KV receive buffer per decode instance, bytes.
    pub decode_kv_buffer: u64,
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        DeploymentConfig {
            prefill_instances: 6,
            prefill_dies_per_instance: 32,
            prefill_tp: 4,
            decode_instances: 1,
            decode_ep_degree: 320,
            decode_batch: 96,
            shared_expert_copies: 32,
            redundant_experts: None,
            decode_kv_buffer: 64 << 30,
        }
    }
}

/// Prefill compute model for one die. A request whose tokens
/// `cached..len` must be computed costs
/// `linear_us_per_token * (len - cached) + attention_us_per_position * Σ p`
/// over those positions; a batch adds `batch_overhead_us`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefillConfig {
    /// Prompt tokens per die per batch.
    pub batch_tokens_per_die: u32,
    pub linear_us_per_token: f64,
    pub attention_us_per_position: f64,
    pub batch_overhead_us: f64,
    pub microbatch: bool,
    pub stages: PrefillStages,
    pub mla: MlaConfig,
}

impl Default for PrefillConfig {
    fn default() -> Self {
        PrefillConfig {
            batch_tokens_per_die: 8192,
            linear_us_per_token: 100.0,
            attention_us_per_position: 0.018,
            batch_overhead_us: 500_000.0,
            microbatch: true,
            stages: default_prefill_stages(),
            mla: MlaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub microbatch: bool,
    pub attention_stream: StreamSpec,
    pub moe_stream: StreamSpec,
    pub die: DieResources,
    pub serial_fraction: f64,
    /// The stage tables describe the first point; the second fixes the
    /// per-request slope.
    pub calibration: [TpotPoint; 2],
    pub dispatch: DispatchConfig,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        let (s0, s1) = default_decode_streams();
        DecodeConfig {
            microbatch: true,
            attention_stream: s0,
            moe_stream: s1,
            die: DieResources::default(),
            serial_fraction: DEFAULT_SERIAL_FRACTION,
            calibration: [
                TpotPoint { batch: 96, tpot_ms: 49.4 },
                TpotPoint { batch: 8, tpot_ms: 14.9 },
            ],
            dispatch: DispatchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    pub enabled: bool,
    /// Plane the prefill dies use to reach the pool.
    pub access_plane: PlaneKind,
    pub block_size: u32,
    pub pool_servers: u32,
    pub dram_per_server: u64,
    pub ssd_per_server: u64,
    /// Quota of the context-cache namespace; `None` is unlimited.
    pub namespace_quota: Option<u64>,
    pub pool: PoolConfig,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            enabled: true,
            access_plane: PlaneKind::Ub,
            block_size: 128,
            pool_servers: 16,
            dram_per_server: 64 << 30,
            ssd_per_server: 1 << 40,
            namespace_quota: None,
            pool: PoolConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    /// Seeds the workload and the routing; replaces `workload.seed`.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub model: MoEModelSpec,
    #[serde(default)]
    pub cluster: ClusterSpec,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub planes: PlanesConfig,
    #[serde(default)]
    pub deployment: DeploymentConfig,
    #[serde(default)]
    pub prefill: PrefillConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub mtp: MtpConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            schema_version: SCHEMA_VERSION,
            name: default_name(),
            seed: default_seed(),
            model: MoEModelSpec::default(),
            cluster: ClusterSpec::default(),
            workload: WorkloadSpec::default(),
            planes: PlanesConfig::default(),
            deployment: DeploymentConfig::default(),
            prefill: PrefillConfig::default(),
            decode: DecodeConfig::default(),
            cache: CacheConfig::default(),
            mtp: MtpConfig::default(),
        }
    }
}

impl ScenarioConfig {
    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            v.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        v.extend(validate_specs(&self.model, &self.cluster, self.deployment.decode_ep_degree as u64).violations);
        let mut w = self.workload.clone();
        w.num_requests = w.num_requests.max(1);
        if let Err(e) = w.validate() {
            v.push(format!("workload: {e}"));
        }
        if let Err(e) = self.mtp.validate() {
            v.push(format!("mtp: {e}"));
        }
        for (name, p) in [
            ("planes.ub", &self.planes.ub),
            ("planes.ub_combine", &self.planes.ub_combine),
            ("planes.rdma", &self.planes.rdma),
            ("planes.vpc", &self.planes.vpc),
        ] {
            if let Err(e) = p.validate() {
                v.push(format!("{name}: {e}"));
            }
        }
        if self.planes.rdma.kind != PlaneKind::Rdma {
            v.push("planes.rdma must describe an rdma plane".into());
        }
        let d = &self.deployment;
        for (name, val) in [
            ("deployment.prefill_instances", d.prefill_instances),
            ("deployment.prefill_dies_per_instance", d.prefill_dies_per_instance),
            ("deployment.prefill_tp", d.prefill_tp),
            ("deployment.decode_instances", d.decode_instances),
            ("deployment.decode_ep_degree", d.decode_ep_degree),
            ("deployment.decode_batch", d.decode_batch),
            ("prefill.batch_tokens_per_die", self.prefill.batch_tokens_per_die),
            ("cache.pool_servers", self.cache.pool_servers),
        ] {
            if val == 0 {
                v.push(format!("{name} must be positive"));
            }
        }
        if d.prefill_tp > d.prefill_dies_per_instance {
            v.push("deployment.prefill_tp exceeds deployment.prefill_dies_per_instance".into());
        }
        let p = &self.prefill;
        if !(p.linear_us_per_token >= 0.0 && p.attention_us_per_position >= 0.0 && p.batch_overhead_us >= 0.0) {
            v.push("prefill cost coefficients must be nonnegative".into());
        }
        if !(crate::context_cache::MIN_BLOCK_SIZE..=crate::context_cache::MAX_BLOCK_SIZE)
            .contains(&self.cache.block_size)
        {
            v.push(format!(
                "cache.block_size {} outside [{}, {}]",
                self.cache.block_size,
                crate::context_cache::MIN_BLOCK_SIZE,
                crate::context_cache::MAX_BLOCK_SIZE
            ));
        }
        if self.cache.block_size != self.workload.block_size {
            v.push("workload.block_size must equal cache.block_size".into());
        }
        if self.cache.access_plane == PlaneKind::Rdma {
            v.push("cache.access_plane must be ub or vpc".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Redundant experts actually placed at the configured EP degree.
    pub fn redundant_experts(&self) -> u32 {
        let d = &self.deployment;
        d.redundant_experts.unwrap_or_else(|| {
            let base = d.shared_expert_copies + self.model.num_router_experts;
            let ep = d.decode_ep_degree.max(1);
            (ep - base % ep) % ep
        })
    }
}

/// Parses and validates a TOML scenario; unknown keys are errors.
pub fn parse_config_str(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Io(format!("config file not found: {}", path.display()))
        } else {
            Error::Io(format!("{}: {e}", path.display()))
        }
    })?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub metrics: Vec<Metric>,
    /// Digest of the KV handoff event trace, hex.
    pub trace_digest: Option<String>,
}

impl MetricReport {
    fn new(cfg: &ScenarioConfig) -> Self {
        MetricReport {
            schema_version: SCHEMA_VERSION,
            scenario: cfg.name.clone(),
            seed: cfg.seed,
            metrics: Vec::new(),
            trace_digest: None,
        }
    }

    fn push(&mut self, name: &str, value: f64, unit: &str) {
        self.metrics.push(Metric {
            name: name.into(),
            value,
            unit: unit.into(),
        });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct PrefillTotals {
    batches: u64,
    busy_us: f64,
    prompt_tokens: u64,
    cached_tokens: u64,
    ttft_sum_us: f64,
    ttft_max_us: f64,
    fetch_us: f64,
    store_us: f64,
    comm_us: f64,
    kv_transfer_sum_us: f64,
    blocks_stored: u64,
    blocks_deduplicated: u64,
}

fn positions_sum(from: u64, to: u64) -> f64 {
    // Σ p for p in from..to
    if to <= from {
        return 0.0;
    }
    ((to - 1) * to / 2 - if from == 0 { 0 } else { (from - 1) * from / 2 }) as f64
}

struct PrefillRun {
    totals: PrefillTotals,
    trace_digest: u64,
}

fn simulate_prefill(cfg: &ScenarioConfig, requests: &[Request]) -> Result<PrefillRun> {
    let p = &cfg.prefill;
    let tp = cfg.deployment.prefill_tp as usize;
    let kv_per_token = cfg.model.kv_bytes_per_token;
    let access_plane = cfg.planes.get(cfg.cache.access_plane).clone();
    let block_size = cfg.cache.block_size;

    let overlap = if p.microbatch {
        prefill_layer_latency(&p.stages, true) / prefill_layer_latency(&p.stages, false)
    } else {
        1.0
    };

    let mut pool = MemoryPool::uniform(
        cfg.cache.pool.clone(),
        cfg.cache.pool_servers,
        cfg.cache.dram_per_server,
        cfg.cache.ssd_per_server,
        access_plane.clone(),
    );
    const NS: u32 = 1;
    pool.create_namespace(NamespaceSpec {
        id: NS,
        quota: cfg.cache.namespace_quota.unwrap_or(u64::MAX),
    })?;
    let mut cache = ContextCache::new(NS, block_size, kv_per_token)?;
    let block_write = |bytes: u64| access_plane.remote_access(bytes, Mechanism::Sdma).latency;

    let mut decode: Vec<DecodeInstance> = (0..cfg.deployment.decode_instances)
        .map(|i| DecodeInstance::new(i, cfg.deployment.decode_kv_buffer))
        .collect();
    let mut next_decode = 0usize;
    let mut digest = Fnv64::default();

    let budget = p.batch_tokens_per_die as u64 * tp as u64;
    let mut t = PrefillTotals::default();
    let mut clock = 0.0f64;
    let mut i = 0usize;
    while i < requests.len() {
        let mut batch = vec![&requests[i]];
        let mut tokens = requests[i].prompt_len as u64;
        i += 1;
        while i < requests.len() && tokens + requests[i].prompt_len as u64 <= budget {
            tokens += requests[i].prompt_len as u64;
            batch.push(&requests[i]);
            i += 1;
        }
        let start = match cfg.workload.arrival {
            Arrival::ClosedLoop => clock,
            Arrival::Poisson { .. } => clock.max(batch.iter().map(|r| r.arrival_time).max().unwrap_or(0) as f64),
        };
        pool.set_time(start as u64);

        let mut compute = 0.0;
        let mut fetch = 0.0;
        let mut uncached = Vec::with_capacity(batch.len());
        let mut blocks_per_request = Vec::with_capacity(batch.len());
        for r in &batch {
            let blocks = cache.blocks_for(&r.token_hashes)?;
            let cached = if cfg.cache.enabled {
                let keys = split_into_blocks(&r.token_hashes, block_size)?;
                let hit = cache.lookup_prefix(&keys).min(blocks.len());
                let report = cache.fetch_prefix(&mut pool, &blocks[..hit])?;
                fetch += report.latency;
                report.tokens.min(r.prompt_len as u64)
            } else {
                0
            };
            let len = r.prompt_len as u64;
            compute += p.linear_us_per_token * (len - cached) as f64
                + p.attention_us_per_position * positions_sum(cached, len);
            t.cached_tokens += cached;
            t.prompt_tokens += len;
            uncached.push((r.id, (len - cached) as u32));
            blocks_per_request.push(blocks);
        }

        let mut store = 0.0;
        if cfg.cache.enabled {
            for blocks in &blocks_per_request {
                let fresh: Vec<u64> = blocks.iter().filter(|b| !cache.contains(&b.key)).map(|b| b.size).collect();
                let report = cache.store_blocks(&mut pool, blocks);
                t.blocks_stored += report.stored as u64;
                t.blocks_deduplicated += report.deduplicated as u64;
                store += fresh.iter().take(report.stored).map(|&b| block_write(b)).sum::<f64>();
            }
        }

        let comm = {
            let work: Vec<(u64, u32)> = uncached.iter().copied().filter(|u| u.1 > 0).collect();
            if work.is_empty() || tp == 1 {
                0.0
            } else {
                let packed = pack_sequences(&work, tp)?;
                plan_mla_stages(&packed, tp, &p.mla, &cfg.planes.ub)?.comm_latency() * cfg.model.num_layers as f64
            }
        };

        let latency = p.batch_overhead_us + overlap * compute / tp as f64 + comm + (fetch + store) / tp as f64;
        let end = start + latency;
        t.busy_us += latency;
        t.fetch_us += fetch / tp as f64;
        t.store_us += store / tp as f64;
        t.comm_us += comm;
        t.batches += 1;

        let mut queue = EventQueue::new();
        for r in &batch {
            let admitted = match cfg.workload.arrival {
                Arrival::ClosedLoop => start,
                Arrival::Poisson { .. } => r.arrival_time as f64,
            };
            let ttft = end - admitted;
            t.ttft_sum_us += ttft;
            t.ttft_max_us = t.ttft_max_us.max(ttft);
            let instances = decode.len();
            let dst = &mut decode[next_decode];
            next_decode = (next_decode + 1) % instances;
            let xfer = schedule_kv_transfer(
                &mut queue,
                r.id,
                r.prompt_len,
                kv_per_token,
                0,
                latency.ceil() as u64,
                dst,
                &cfg.planes.rdma,
            )?;
            t.kv_transfer_sum_us += xfer.latency;
        }
        let offset = start.ceil() as u64;
        while let Some(ev) = queue.pop() {
            (offset + ev.time).hash(&mut digest);
            ev.sequence.hash(&mut digest);
            ev.kind.hash(&mut digest);
        }
        for d in &mut decode {
            let used = d.buffer_used;
            d.release(used);
        }
        clock = end;
    }
    Ok(PrefillRun {
        totals: t,
        trace_digest: digest.finish(),
    })
}

struct DecodeRun {
    per_layer_us: f64,
    tpot_ms: f64,
    throughput: f64,
    tokens_per_step: f64,
}

fn simulate_decode(cfg: &ScenarioConfig) -> Result<DecodeRun> {
    let d = &cfg.decode;
    let anchor_layer = decode_layer_latency(&d.attention_stream, &d.moe_stream, true, d.die, d.serial_fraction)?;
    let model = DecodeLatencyModel::calibrate(
        d.calibration[0],
        d.calibration[1],
        anchor_layer,
        cfg.model.num_layers,
        cfg.mtp.clone(),
    )?;
    let batch = cfg.deployment.decode_batch;
    let mut per_layer = model.per_layer(batch);
    if !d.microbatch {
        let sequential = decode_layer_latency(&d.attention_stream, &d.moe_stream, false, d.die, d.serial_fraction)?;
        per_layer *= sequential / anchor_layer;
    }
    let iteration = cfg.mtp.effective_latency(cfg.model.num_layers as f64 * per_layer + model.iteration_overhead);
    let tokens = cfg.mtp.expected_tokens();
    Ok(DecodeRun {
        per_layer_us: per_layer,
        tpot_ms: iteration / tokens / 1e3,
        throughput: batch as f64 * tokens / iteration * 1e6,
        tokens_per_step: tokens,
    })
}

struct ExchangeRun {
    dispatch_us: f64,
    combine_us: f64,
    buffer_bytes: u64,
}

fn simulate_exchange(cfg: &ScenarioConfig) -> Result<ExchangeRun> {
    let ep = cfg.deployment.decode_ep_degree as usize;
    let placement = build_placement(
        ep,
        cfg.deployment.shared_expert_copies as usize,
        cfg.model.num_router_experts as usize,
        cfg.redundant_experts() as usize,
        None,
    )?;
    let batch = cfg.deployment.decode_batch as usize;
    let top_k = cfg.model.top_k as usize;
    let plan = plan_buffers(
        ep as u64,
        batch as u64,
        top_k as u64,
        placement.experts_per_die as u64,
        DISPATCH_MSG_BYTES,
        COMBINE_MSG_BYTES,
    );
    let batches = random_routing(&placement, batch, top_k, cfg.seed)?;
    let (dispatch, stats) = simulate_dispatch(&batches, &plan, &cfg.planes.ub, &cfg.decode.dispatch)?;
    let combine = simulate_combine(&stats, &plan, &cfg.planes.ub_combine, &cfg.decode.dispatch)?;
    Ok(ExchangeRun {
        dispatch_us: dispatch.max_latency(),
        combine_us: combine.phase.max_latency(),
        buffer_bytes: plan.total(),
    })
}

/// Runs one scenario. A workload of zero requests yields an empty report.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<MetricReport> {
    let ctx = |e: Error| Error::Scenario {
        scenario: cfg.name.clone(),
        source: Box::new(e),
    };
    cfg.validate().map_err(ctx)?;
    let mut report = MetricReport::new(cfg);
    if cfg.workload.num_requests == 0 {
        return Ok(report);
    }
    let mut spec = cfg.workload.clone();
    spec.seed = cfg.seed;
    let requests = generate_workload(&spec).map_err(ctx)?;
    let prefill = simulate_prefill(cfg, &requests).map_err(ctx)?;
    let decode = simulate_decode(cfg).map_err(ctx)?;
    let exchange = simulate_exchange(cfg).map_err(ctx)?;

    let t = prefill.totals;
    let n = requests.len() as f64;
    let tp = cfg.deployment.prefill_tp as f64;
    report.push("requests", n, "count");
    report.push("prompt_tokens", t.prompt_tokens as f64, "tokens");
    report.push("cached_tokens", t.cached_tokens as f64, "tokens");
    report.push("token_reuse", t.cached_tokens as f64 / t.prompt_tokens.max(1) as f64, "fraction");
    report.push("prefill_batches", t.batches as f64, "count");
    report.push(
        "prefill_throughput",
        t.prompt_tokens as f64 / tp / (t.busy_us / 1e6),
        "tokens/s/die",
    );
    report.push("ttft_mean", t.ttft_sum_us / n / 1e3, "ms");
    report.push("ttft_max", t.ttft_max_us / 1e3, "ms");
    report.push("cache_fetch_per_batch", t.fetch_us / t.batches as f64 / 1e3, "ms");
    report.push("cache_store_per_batch", t.store_us / t.batches as f64 / 1e3, "ms");
    report.push("mla_comm_per_batch", t.comm_us / t.batches as f64 / 1e3, "ms");
    report.push("blocks_stored", t.blocks_stored as f64, "count");
    report.push("blocks_deduplicated", t.blocks_deduplicated as f64, "count");
    report.push("kv_transfer_mean", t.kv_transfer_sum_us / n / 1e3, "ms");
    report.push("decode_per_layer", decode.per_layer_us, "us");
    report.push("decode_tokens_per_step", decode.tokens_per_step, "tokens");
    report.push("tpot", decode.tpot_ms, "ms");
    report.push("decode_throughput", decode.throughput, "tokens/s/rank");
    report.push("dispatch_latency", exchange.dispatch_us, "us");
    report.push("combine_latency", exchange.combine_us, "us");
    report.push("ep_buffer", exchange.buffer_bytes as f64 / (1u64 << 20) as f64, "MiB");
    report.trace_digest = Some(format!("{:016x}", prefill.trace_digest));
    Ok(report)
}

pub const SWEEP_AXES: [&str; 7] = [
    "batch",
    "ep_degree",
    "reuse_rate",
    "seed",
    "num_requests",
    "access_plane",
    "prefill_tp",
];

fn parse_num<T: std::str::FromStr>(axis: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("value `{v}` is not valid for axis `{axis}`")))
}

/// Copy of `cfg` with one field set.
pub fn apply_axis(cfg: &ScenarioConfig, axis: &str, value: &str) -> Result<ScenarioConfig> {
    let mut c = cfg.clone();
    match axis {
        "batch" => c.deployment.decode_batch = parse_num(axis, value)?,
        "ep_degree" => c.deployment.decode_ep_degree = parse_num(axis, value)?,
        "reuse_rate" => c.workload.reuse_rate = parse_num(axis, value)?,
        "seed" => c.seed = parse_num(axis, value)?,
        "num_requests" => c.workload.num_requests = parse_num(axis, value)?,
        "prefill_tp" => c.deployment.prefill_tp = parse_num(axis, value)?,
        "access_plane" => {
            c.cache.access_plane = match value.trim() {
                "ub" => PlaneKind::Ub,
                "vpc" => PlaneKind::Vpc,
                other => return Err(Error::Config(format!("access_plane must be ub or vpc, got `{other}`"))),
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown sweep axis `{other}` (known: {})",
                SWEEP_AXES.join(", ")
            )))
        }
    }
    c.name = format!("{}[{axis}={}]", cfg.name, value.trim());
    Ok(c)
}

/// One report per value, in input order. Points run in parallel on the
/// global thread pool.
pub fn sweep(cfg: &ScenarioConfig, axis: &str, values: &[String]) -> Result<Vec<MetricReport>> {
    let configs: Vec<ScenarioConfig> = values
        .iter()
        .map(|v| apply_axis(cfg, axis, v))
        .collect::<Result<_>>()?;
    configs.par_iter().map(run_scenario).collect()
}

/// [`sweep`] on a dedicated pool of `threads` workers.
pub fn sweep_with_threads(cfg: &ScenarioConfig, axis: &str, values: &[String], threads: usize) -> Result<Vec<MetricReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    pool.install(|| sweep(cfg, axis, values))
}

/// Long-format CSV: one row per (point, metric).
pub fn sweep_to_csv(axis: &str, values: &[String], reports: &[MetricReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["schema_version", "scenario", "axis", "axis_value", "metric", "value", "unit"])
        .map_err(io)?;
    for (v, r) in values.iter().zip(reports) {
        for m in &r.metrics {
            w.write_record([
                r.schema_version.to_string(),
                r.scenario.clone(),
                axis.to_string(),
                v.trim().to_string(),
                m.name.clone(),
                m.value.to_string(),
                m.unit.clone(),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
