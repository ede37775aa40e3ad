//! Multiple-token prediction economics: each decode step proposes `k`
//! speculative tokens, each accepted independently with `accept_prob`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtpConfig {
    pub k: u32,
    pub accept_prob: f64,
    /// Launch cost of one compute graph when steps are not pipelined, µs.
    pub graph_launch_overhead: f64,
    pub pipelined: bool,
}

impl Default for MtpConfig {
    fn default() -> Self {
        MtpConfig {
            k: 1,
            accept_prob: 0.7,
            graph_launch_overhead: 700.0,
            pipelined: true,
        }
    }
}

impl MtpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accept_prob) {
            return Err(Error::invalid("accept_prob must be in [0, 1]"));
        }
        if self.graph_launch_overhead < 0.0 {
            return Err(Error::invalid("graph_launch_overhead must be nonnegative"));
        }
        Ok(())
    }

    /// Expected tokens per request per step: `1 + k * p`.
    pub fn expected_tokens(&self) -> f64 {
        1.0 + self.k as f64 * self.accept_prob
    }

    /// Step latency including graph launches when not pipelined.
    pub fn effective_latency(&self, mtp_iter_latency: f64) -> f64 {
        if self.pipelined {
            mtp_iter_latency
        } else {
            mtp_iter_latency + (self.k + 1) as f64 * self.graph_launch_overhead
        }
    }

    /// Throughput of MTP steps relative to plain one-token steps.
    pub fn analytic_ratio(&self, base_iter_latency: f64, mtp_iter_latency: f64) -> f64 {
        self.expected_tokens() / self.effective_latency(mtp_iter_latency) * base_iter_latency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MtpResult {
    pub iterations: u64,
    pub tokens_per_iteration: f64,
    /// Standard error of `tokens_per_iteration`.
    pub std_error: f64,
    pub throughput_ratio: f64,
}

pub fn simulate_mtp(
    cfg: &MtpConfig,
    base_iter_latency: f64,
    mtp_iter_latency: f64,
    iterations: u64,
    seed: u64,
) -> Result<MtpResult> {
    cfg.validate()?;
    if iterations == 0 {
        return Err(Error::invalid("iterations must be at least 1"));
    }
    if !(base_iter_latency > 0.0 && mtp_iter_latency > 0.0) {
        return Err(Error::invalid("iteration latencies must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
    for _ in 0..iterations {
        let mut tokens = 1.0;
        for _ in 0..cfg.k {
            if rng.random::<f64>() < cfg.accept_prob {
                tokens += 1.0;
            }
        }
        sum += tokens;
        sum_sq += tokens * tokens;
    }
    let n = iterations as f64;
    let mean = sum / n;
    let var = if iterations > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(MtpResult {
        iterations,
        tokens_per_iteration: mean,
        std_error: (var / n).sqrt(),
        throughput_ratio: mean / cfg.effective_latency(mtp_iter_latency) * base_iter_latency,
    })
}
