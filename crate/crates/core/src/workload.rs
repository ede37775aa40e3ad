//! Model, cluster and workload descriptions plus the synthetic request
//! generator.
//!
//! Every request draws from its own ChaCha8 stream (`seed`, stream = request
//! id), so a request's lengths and reuse decision do not depend on how many
//! other requests exist or on which parameters they were generated with.
//! Arrival gaps use a separate stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::hash::combine;
use crate::{Error, Result};

/// Mixture-of-experts model shape. Defaults describe a 671B / 37B-active
/// model with 61 layers and MLA (576-wide latent KV per layer, BF16).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoEModelSpec {
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub num_router_experts: u32,
    pub top_k: u32,
    pub num_shared_experts: u32,
    pub total_params: u64,
    pub active_params: u64,
    pub bytes_per_param: u32,
    pub kv_bytes_per_token: u64,
}

impl Default for MoEModelSpec {
    fn default() -> Self {
        MoEModelSpec {
            num_layers: 61,
            hidden_dim: 7168,
            num_router_experts: 256,
            top_k: 8,
            num_shared_experts: 1,
            total_params: 671_000_000_000,
            active_params: 37_000_000_000,
            bytes_per_param: 1,
            kv_bytes_per_token: 576 * 61 * 2,
        }
    }
}

impl MoEModelSpec {
    pub fn model_bytes(&self) -> u64 {
        self.total_params * self.bytes_per_param as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSpec {
    pub num_nodes: u32,
    pub npus_per_node: u32,
    pub dies_per_npu: u32,
    pub aic_per_die: u32,
    pub aiv_per_die: u32,
    pub cpu_dram_per_node: u64,
    pub ssd_per_node: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            num_nodes: 48,
            npus_per_node: 8,
            dies_per_npu: 2,
            aic_per_die: 24,
            aiv_per_die: 48,
            cpu_dram_per_node: 1 << 40,
            ssd_per_node: 8 << 40,
        }
    }
}

impl ClusterSpec {
    pub fn total_dies(&self) -> u64 {
        self.num_nodes as u64 * self.npus_per_node as u64 * self.dies_per_npu as u64
    }

    pub fn topology(&self) -> crate::interconnect::Topology {
        crate::interconnect::Topology {
            num_nodes: self.num_nodes,
            dies_per_node: self.npus_per_node * self.dies_per_npu,
        }
    }
}

/// Outcome of [`validate_specs`]; empty `violations` means ok.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the model and cluster invariants and that a decode deployment of
/// `ep_degree` ranks fits on the cluster's dies.
pub fn validate_specs(model: &MoEModelSpec, cluster: &ClusterSpec, ep_degree: u64) -> ValidationReport {
    let mut v = Vec::new();
    let positive = [
        ("num_layers", model.num_layers as u64),
        ("hidden_dim", model.hidden_dim as u64),
        ("num_router_experts", model.num_router_experts as u64),
        ("top_k", model.top_k as u64),
        ("num_shared_experts", model.num_shared_experts as u64),
        ("total_params", model.total_params),
        ("active_params", model.active_params),
        ("bytes_per_param", model.bytes_per_param as u64),
        ("kv_bytes_per_token", model.kv_bytes_per_token),
        ("num_nodes", cluster.num_nodes as u64),
        ("npus_per_node", cluster.npus_per_node as u64),
        ("dies_per_npu", cluster.dies_per_npu as u64),
        ("aic_per_die", cluster.aic_per_die as u64),
        ("aiv_per_die", cluster.aiv_per_die as u64),
    ];
    for (name, value) in positive {
        if value == 0 {
            v.push(format!("{name} must be positive"));
        }
    }
    if model.top_k > model.num_router_experts {
        v.push("top_k must not exceed num_router_experts".into());
    }
    if model.active_params > model.total_params {
        v.push("active_params must not exceed total_params".into());
    }
    if ep_degree == 0 || ep_degree > cluster.total_dies() {
        v.push(format!(
            "placement infeasible: ep_degree {ep_degree} on {} dies",
            cluster.total_dies()
        ));
    }
    ValidationReport { violations: v }
}

/// Length distribution in tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    Constant { value: u32 },
    /// Inclusive on both ends.
    Uniform { min: u32, max: u32 },
    /// Log-normal with underlying normal (`mu`, `sigma`), truncated to
    /// `[min, max]` by rejection.
    LogNormal { mu: f64, sigma: f64, min: u32, max: u32 },
}

impl LengthDist {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LengthDist::Constant { value: 0 } => {
                Err(Error::InvalidDistribution("constant length must be positive".into()))
            }
            LengthDist::Uniform { min, max } if min == 0 || min > max => Err(
                Error::InvalidDistribution(format!("uniform bounds [{min}, {max}] invalid")),
            ),
            LengthDist::LogNormal { mu, sigma, min, max } => {
                if !(sigma > 0.0) || !mu.is_finite() || min == 0 || min > max {
                    return Err(Error::InvalidDistribution(format!(
                        "log-normal mu={mu} sigma={sigma} [{min}, {max}] invalid"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn support(&self) -> (u32, u32) {
        match *self {
            LengthDist::Constant { value } => (value, value),
            LengthDist::Uniform { min, max } | LengthDist::LogNormal { min, max, .. } => (min, max),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<u32> {
        match *self {
            LengthDist::Constant { value } => Ok(value),
            LengthDist::Uniform { min, max } => Ok(rng.random_range(min..=max)),
            LengthDist::LogNormal { mu, sigma, min, max } => {
                let d = LogNormal::new(mu, sigma)
                    .map_err(|e| Error::InvalidDistribution(e.to_string()))?;
                for _ in 0..10_000 {
                    let x = d.sample(rng).round();
                    if x >= min as f64 && x <= max as f64 {
                        return Ok(x as u32);
                    }
                }
                Err(Error::InvalidDistribution(format!(
                    "log-normal mu={mu} sigma={sigma} has negligible mass in [{min}, {max}]"
                )))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arrival {
    /// Every request is present at time zero.
    ClosedLoop,
    /// Open arrivals with exponential gaps, `rate` requests per second.
    Poisson { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub arrival: Arrival,
    pub prompt_len: LengthDist,
    pub output_len: LengthDist,
    /// Probability that a request reuses a prefix of an earlier request.
    pub reuse_rate: f64,
    /// Share of the shorter of the two prompts that a reusing request copies.
    pub reuse_prefix_fraction: f64,
    /// Reused prefixes are whole multiples of this many tokens.
    pub block_size: u32,
    pub num_requests: u32,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            arrival: Arrival::ClosedLoop,
            prompt_len: LengthDist::Constant { value: 4096 },
            output_len: LengthDist::Constant { value: 256 },
            reuse_rate: 0.0,
            reuse_prefix_fraction: 1.0,
            block_size: 128,
            num_requests: 256,
            seed: 0x5eed,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_requests == 0 {
            return Err(Error::invalid("num_requests must be positive"));
        }
        if !(0.0..=1.0).contains(&self.reuse_rate) {
            return Err(Error::invalid("reuse_rate must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.reuse_prefix_fraction) {
            return Err(Error::invalid("reuse_prefix_fraction must be in [0, 1]"));
        }
        if self.block_size == 0 {
            return Err(Error::invalid("block_size must be positive"));
        }
        if let Arrival::Poisson { rate } = self.arrival {
            if !(rate > 0.0) || !rate.is_finite() {
                return Err(Error::InvalidDistribution(format!("poisson rate {rate} invalid")));
            }
        }
        self.prompt_len.validate()?;
        self.output_len.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    /// Microseconds.
    pub arrival_time: u64,
    pub prompt_len: u32,
    pub output_len: u32,
    pub reused_prefix_len: u32,
    /// One abstract token id per prompt token.
    pub token_hashes: Vec<u64>,
}

const ARRIVAL_STREAM: u64 = u64::MAX;

/// Generates `spec.num_requests` requests sorted by arrival time.
///
/// A reusing request copies the leading tokens of a uniformly chosen earlier
/// request, rounded down to whole blocks and capped one token short of its
/// own prompt, so the final block is always computed.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<Request>> {
    spec.validate()?;
    let n = spec.num_requests as u64;
    let mut arrivals = ChaCha8Rng::seed_from_u64(spec.seed);
    arrivals.set_stream(ARRIVAL_STREAM);
    let gaps = match spec.arrival {
        Arrival::ClosedLoop => None,
        Arrival::Poisson { rate } => {
            Some(Exp::new(rate).map_err(|e| Error::InvalidDistribution(e.to_string()))?)
        }
    };
    let mut clock_s = 0.0f64;
    let mut out: Vec<Request> = Vec::with_capacity(n as usize);
    for id in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(id);
        let prompt_len = spec.prompt_len.sample(&mut rng)?;
        let output_len = spec.output_len.sample(&mut rng)?;
        let u_reuse: f64 = rng.random();
        let u_source: f64 = rng.random();

        let mut reused = 0u32;
        let mut source = None;
        if id > 0 && u_reuse < spec.reuse_rate {
            let src = ((u_source * id as f64) as usize).min(id as usize - 1);
            let shared = out[src].prompt_len.min(prompt_len.saturating_sub(1));
            let want = (shared as f64 * spec.reuse_prefix_fraction).floor() as u32;
            reused = want / spec.block_size * spec.block_size;
            if reused > 0 {
                source = Some(src);
            }
        }

        let base = combine(spec.seed, id);
        let mut token_hashes = Vec::with_capacity(prompt_len as usize);
        if let Some(src) = source {
            token_hashes.extend_from_slice(&out[src].token_hashes[..reused as usize]);
        }
        for pos in token_hashes.len() as u64..prompt_len as u64 {
            token_hashes.push(combine(base, pos));
        }

        if let Some(d) = &gaps {
            clock_s += d.sample(&mut arrivals);
        }
        out.push(Request {
            id,
            arrival_time: (clock_s * 1e6).floor() as u64,
            prompt_len,
            output_len,
            reused_prefix_len: reused,
            token_hashes,
        });
    }
    Ok(out)
}
