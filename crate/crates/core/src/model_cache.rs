//! Model loading and switching under three strategies: no cache, a per-node
//! DRAM cache, and the shared memory pool.
//!
//! Latencies are in seconds and bandwidths in GB/s (1e9 bytes/s).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::hash::{combine, fnv1a};
use crate::mempool::{GetOutcome, MemoryPool, NamespaceId, Payload, ServerId, Tier};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStrategy {
    NoCache,
    LocalDram,
    EmsPool,
}

impl CacheStrategy {
    pub const ALL: [CacheStrategy; 3] = [CacheStrategy::NoCache, CacheStrategy::LocalDram, CacheStrategy::EmsPool];

    pub fn name(self) -> &'static str {
        match self {
            CacheStrategy::NoCache => "no_cache",
            CacheStrategy::LocalDram => "local_dram",
            CacheStrategy::EmsPool => "ems_pool",
        }
    }
}

/// A model version split into pool blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBlockSet {
    pub model_id: String,
    pub version: u32,
    pub total_bytes: u64,
    pub block_size_bytes: u64,
    /// `(pool key, size)` per block.
    pub blocks: Vec<(u64, u64)>,
}

impl ModelBlockSet {
    pub fn new(model_id: &str, version: u32, total_bytes: u64, block_size_bytes: u64) -> Result<Self> {
        if total_bytes == 0 || block_size_bytes == 0 {
            return Err(Error::invalid("model and block sizes must be positive"));
        }
        let base = combine(fnv1a(model_id.as_bytes()), version as u64);
        let n = total_bytes.div_ceil(block_size_bytes);
        let blocks = (0..n)
            .map(|i| {
                let size = block_size_bytes.min(total_bytes - i * block_size_bytes);
                (combine(base, i), size)
            })
            .collect();
        Ok(ModelBlockSet {
            model_id: model_id.to_string(),
            version,
            total_bytes,
            block_size_bytes,
            blocks,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadScenario {
    pub strategy: CacheStrategy,
    pub num_instances: u32,
    /// Object storage bandwidth, GB/s.
    pub obs_bandwidth: f64,
    /// Achieved share of `obs_bandwidth`.
    pub obs_efficiency: f64,
    /// DRAM to NPU load time, seconds.
    pub warm_load_latency: f64,
    pub num_active_models: u32,
}

impl Default for LoadScenario {
    fn default() -> Self {
        LoadScenario {
            strategy: CacheStrategy::EmsPool,
            num_instances: 8,
            obs_bandwidth: 2.5,
            obs_efficiency: 0.839,
            warm_load_latency: 5.0,
            num_active_models: 8,
        }
    }
}

impl LoadScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.obs_bandwidth > 0.0) {
            return Err(Error::invalid("obs_bandwidth must be positive"));
        }
        if !(self.obs_efficiency > 0.0 && self.obs_efficiency <= 1.0) {
            return Err(Error::invalid("obs_efficiency must be in (0, 1]"));
        }
        if self.num_instances == 0 || self.num_active_models == 0 {
            return Err(Error::invalid("instance and model counts must be positive"));
        }
        if self.warm_load_latency < 0.0 {
            return Err(Error::invalid("warm_load_latency must be nonnegative"));
        }
        Ok(())
    }

    /// Achieved object-storage bandwidth in bytes per second.
    fn obs_bytes_per_s(&self) -> f64 {
        self.obs_bandwidth * 1e9 * self.obs_efficiency
    }
}

/// Time to get the model from object storage into every instance. Without
/// the pool each instance fetches its own copy and they split the bucket
/// bandwidth; with the pool one shared fetch serves them all.
pub fn cold_start_latency(s: &LoadScenario, m: &ModelBlockSet) -> Result<f64> {
    s.validate()?;
    let single = m.total_bytes as f64 / s.obs_bytes_per_s();
    Ok(match s.strategy {
        CacheStrategy::NoCache | CacheStrategy::LocalDram => single * s.num_instances as f64,
        CacheStrategy::EmsPool => single,
    })
}

/// Latency of one switch when the target is cached with probability `hit_rate`.
pub fn avg_switch_latency(hit_rate: f64, warm: f64, miss: f64) -> f64 {
    hit_rate * warm + (1.0 - hit_rate) * miss
}

/// DRAM footprint in model-size multiples.
pub fn dram_overhead(strategy: CacheStrategy, num_instances: u32) -> f64 {
    match strategy {
        CacheStrategy::NoCache => 0.0,
        CacheStrategy::LocalDram => num_instances as f64,
        CacheStrategy::EmsPool => 1.0,
    }
}

/// Hit rate of a uniformly random switch among `num_active_models`. A local
/// DRAM cache holds one model; the pool holds `ems_capacity_models`.
pub fn switch_hit_rate(strategy: CacheStrategy, num_active_models: u32, ems_capacity_models: u32) -> Result<f64> {
    if num_active_models == 0 {
        return Err(Error::invalid("num_active_models must be at least 1"));
    }
    let m = num_active_models as f64;
    Ok(match strategy {
        CacheStrategy::NoCache => 0.0,
        CacheStrategy::LocalDram => 1.0 / m,
        CacheStrategy::EmsPool => (ems_capacity_models as f64 / m).min(1.0),
    })
}

/// One column of the strategy comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StrategySummary {
    pub strategy: CacheStrategy,
    pub cold_start: f64,
    /// `None` when there is no cache to start warm from.
    pub warm_start: Option<f64>,
    pub dram_overhead: f64,
    pub hit_rate: f64,
    pub avg_switch: f64,
}

/// Reconstructs every cell for one strategy. A switch miss costs one
/// uncontended object-storage fetch.
pub fn summarize_strategy(s: &LoadScenario, m: &ModelBlockSet, ems_capacity_models: u32) -> Result<StrategySummary> {
    let cold_start = cold_start_latency(s, m)?;
    let miss = cold_start_latency(
        &LoadScenario {
            strategy: CacheStrategy::EmsPool,
            ..s.clone()
        },
        m,
    )?;
    let hit_rate = switch_hit_rate(s.strategy, s.num_active_models, ems_capacity_models)?;
    Ok(StrategySummary {
        strategy: s.strategy,
        cold_start,
        warm_start: (s.strategy != CacheStrategy::NoCache).then_some(s.warm_load_latency),
        dram_overhead: dram_overhead(s.strategy, s.num_instances),
        hit_rate,
        avg_switch: avg_switch_latency(hit_rate, s.warm_load_latency, miss),
    })
}

/// Bandwidths governing a pool-to-NPU model load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadConfig {
    /// Host-to-device ingest bandwidth per target die, GB/s.
    pub die_ingest_bandwidth: f64,
    pub obs_bandwidth: f64,
    pub obs_efficiency: f64,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig {
            // 671 GB into 32 dies in 5 s.
            die_ingest_bandwidth: 4.19375,
            obs_bandwidth: 2.5,
            obs_efficiency: 0.839,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadTimeline {
    /// Seconds.
    pub duration: f64,
    pub bytes_from_dram: u64,
    pub bytes_from_ssd: u64,
    /// Blocks missing from the pool are re-fetched from object storage.
    pub bytes_from_obs: u64,
    pub servers_used: usize,
    /// Seconds of service time per pool server.
    pub server_busy: BTreeMap<ServerId, f64>,
    /// Sum of per-server tier bandwidths over the servers touched, GB/s.
    pub pool_bandwidth: f64,
    pub ingest_bandwidth: f64,
}

impl LoadTimeline {
    /// Achieved end-to-end bandwidth, GB/s.
    pub fn aggregate_bandwidth(&self) -> f64 {
        let total = self.bytes_from_dram + self.bytes_from_ssd + self.bytes_from_obs;
        if self.duration > 0.0 {
            total as f64 / self.duration / 1e9
        } else {
            0.0
        }
    }
}

/// Model versions registered in a pool namespace.
#[derive(Debug, Clone)]
pub struct ModelRegistry {
    namespace: NamespaceId,
    models: BTreeMap<(String, u32), ModelBlockSet>,
}

impl ModelRegistry {
    pub fn new(namespace: NamespaceId) -> Self {
        ModelRegistry {
            namespace,
            models: BTreeMap::new(),
        }
    }

    pub fn namespace(&self) -> NamespaceId {
        self.namespace
    }

    /// Writes every block into the pool and records the version.
    pub fn register(&mut self, pool: &mut MemoryPool, model: ModelBlockSet) -> Result<()> {
        for &(key, size) in &model.blocks {
            pool.put(self.namespace, key, Payload::Synthetic(size))?;
        }
        self.models.insert((model.model_id.clone(), model.version), model);
        Ok(())
    }

    pub fn get(&self, model_id: &str, version: u32) -> Result<&ModelBlockSet> {
        self.models
            .get(&(model_id.to_string(), version))
            .ok_or_else(|| Error::UnknownModel {
                model: model_id.to_string(),
                version,
            })
    }

    /// Pulls every block of `model_id@version` from the pool into
    /// `target_dies` dies. Blocks are served in parallel by their owning
    /// servers; the load ends when both the slowest server and the ingest
    /// side are done. Reading an SSD-resident block promotes it to DRAM.
    pub fn prefetch_and_load(
        &self,
        pool: &mut MemoryPool,
        model_id: &str,
        version: u32,
        target_dies: u32,
        cfg: &LoadConfig,
    ) -> Result<LoadTimeline> {
        if target_dies == 0 {
            return Err(Error::invalid("target_dies must be positive"));
        }
        let model = self.get(model_id, version)?;
        let dram_bw = pool.config().dram_bandwidth * 1e9;
        let ssd_bw = pool.config().ssd_bandwidth * 1e9;
        let mut busy: BTreeMap<ServerId, f64> = BTreeMap::new();
        let mut tiers_used: BTreeMap<ServerId, (bool, bool)> = BTreeMap::new();
        let (mut dram, mut ssd, mut obs) = (0u64, 0u64, 0u64);
        for &(key, size) in &model.blocks {
            match pool.get(self.namespace, key)? {
                GetOutcome::Hit { tier, server, .. } => {
                    let (bw, used) = match tier {
                        Tier::Dram => {
                            dram += size;
                            (dram_bw, (true, false))
                        }
                        Tier::Ssd => {
                            ssd += size;
                            (ssd_bw, (false, true))
                        }
                    };
                    *busy.entry(server).or_default() += size as f64 / bw;
                    let t = tiers_used.entry(server).or_default();
                    t.0 |= used.0;
                    t.1 |= used.1;
                }
                GetOutcome::Miss => obs += size,
            }
        }
        let pool_bandwidth: f64 = tiers_used
            .values()
            .map(|&(d, s)| {
                if s {
                    pool.config().ssd_bandwidth
                } else if d {
                    pool.config().dram_bandwidth
                } else {
                    0.0
                }
            })
            .sum();
        let ingest_bandwidth = cfg.die_ingest_bandwidth * target_dies as f64;
        let slowest_server = busy.values().copied().fold(0.0, f64::max);
        let ingest = (dram + ssd + obs) as f64 / (ingest_bandwidth * 1e9);
        let obs_time = obs as f64 / (cfg.obs_bandwidth * 1e9 * cfg.obs_efficiency);
        Ok(LoadTimeline {
            duration: slowest_server.max(ingest) + obs_time,
            bytes_from_dram: dram,
            bytes_from_ssd: ssd,
            bytes_from_obs: obs,
            servers_used: busy.len(),
            server_busy: busy,
            pool_bandwidth,
            ingest_bandwidth,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r1() -> ModelBlockSet {
        ModelBlockSet::new("deepseek-r1", 1, 671_000_000_000, 512 << 20).unwrap()
    }

    fn scenario(strategy: CacheStrategy, n: u32) -> LoadScenario {
        LoadScenario {
            strategy,
            num_instances: n,
            ..Default::default()
        }
    }

    #[test]
    fn block_sizes_sum_to_total() {
        let m = ModelBlockSet::new("m", 1, 1000, 300).unwrap();
        assert_eq!(m.blocks.iter().map(|b| b.1).sum::<u64>(), 1000);
        assert_eq!(m.blocks.last().unwrap().1, 100);
        let v2 = ModelBlockSet::new("m", 2, 1000, 300).unwrap();
        assert!(m.blocks.iter().all(|a| v2.blocks.iter().all(|b| a.0 != b.0)));
    }

    #[test]
    fn cold_start_cells() {
        let m = r1();
        let ems = cold_start_latency(&scenario(CacheStrategy::EmsPool, 8), &m).unwrap();
        let none = cold_start_latency(&scenario(CacheStrategy::NoCache, 8), &m).unwrap();
        assert!((ems - 320.0).abs() / 320.0 < 0.01, "{ems}");
        assert!((none - 2560.0).abs() / 2560.0 < 0.01, "{none}");
        let one = cold_start_latency(&scenario(CacheStrategy::NoCache, 1), &m).unwrap();
        assert_eq!(one, ems);
        let bad = LoadScenario {
            obs_bandwidth: 0.0,
            ..Default::default()
        };
        assert!(cold_start_latency(&bad, &m).is_err());
    }

    #[test]
    fn switch_cells() {
        assert!((avg_switch_latency(0.125, 5.0, 320.0) - 280.625).abs() < 1e-9);
        assert_eq!(avg_switch_latency(1.0, 5.0, 320.0), 5.0);
        assert_eq!(avg_switch_latency(0.0, 5.0, 320.0), 320.0);
        assert_eq!(switch_hit_rate(CacheStrategy::LocalDram, 8, 0).unwrap(), 0.125);
        assert_eq!(switch_hit_rate(CacheStrategy::EmsPool, 8, 8).unwrap(), 1.0);
        assert_eq!(switch_hit_rate(CacheStrategy::LocalDram, 1, 0).unwrap(), 1.0);
        assert_eq!(switch_hit_rate(CacheStrategy::NoCache, 8, 8).unwrap(), 0.0);
        assert!(switch_hit_rate(CacheStrategy::NoCache, 0, 8).is_err());
        assert_eq!(dram_overhead(CacheStrategy::LocalDram, 8), 8.0);
        assert_eq!(dram_overhead(CacheStrategy::EmsPool, 8), 1.0);
        assert_eq!(dram_overhead(CacheStrategy::NoCache, 8), 0.0);
    }

    #[test]
    fn summaries() {
        let m = r1();
        let local = summarize_strategy(&scenario(CacheStrategy::LocalDram, 8), &m, 8).unwrap();
        assert!((local.avg_switch - 281.0).abs() / 281.0 < 0.01);
        let none = summarize_strategy(&scenario(CacheStrategy::NoCache, 8), &m, 8).unwrap();
        assert!(none.warm_start.is_none());
        assert!((none.avg_switch - 320.0).abs() / 320.0 < 0.01);
    }
}
