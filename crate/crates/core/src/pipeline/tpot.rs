//! Decode iteration latency, TPOT and throughput.
//!
//! An iteration runs every layer once plus a fixed overhead (scheduling,
//! sampling). Per-layer latency is affine in the per-die batch:
//! `per_layer(b) = per_layer_fixed + per_layer_per_request * b`.

use serde::{Deserialize, Serialize};

use super::mtp::MtpConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecodeIterationResult {
    pub batch: u32,
    /// Microseconds.
    pub per_layer_latency: f64,
    /// Microseconds.
    pub iteration_latency: f64,
    /// Expected tokens per request per iteration.
    pub tokens_emitted: f64,
    /// Milliseconds.
    pub tpot: f64,
    /// Tokens per second across the whole batch.
    pub throughput: f64,
}

/// `iteration_overhead` is in microseconds.
pub fn tpot_and_throughput(
    batch: u32,
    num_layers: u32,
    per_layer_latency: f64,
    mtp: &MtpConfig,
    iteration_overhead: f64,
) -> DecodeIterationResult {
    let tokens = mtp.expected_tokens();
    let iter = num_layers as f64 * per_layer_latency + iteration_overhead;
    DecodeIterationResult {
        batch,
        per_layer_latency,
        iteration_latency: iter,
        tokens_emitted: tokens,
        tpot: iter / tokens / 1e3,
        throughput: if iter > 0.0 { batch as f64 * tokens / iter * 1e6 } else { 0.0 },
    }
}

/// A measured (batch, TPOT in ms) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpotPoint {
    pub batch: u32,
    pub tpot_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeLatencyModel {
    pub num_layers: u32,
    pub per_layer_fixed: f64,
    pub per_layer_per_request: f64,
    pub iteration_overhead: f64,
    pub mtp: MtpConfig,
}

impl DecodeLatencyModel {
    /// Two-point calibration. The per-layer latency at `anchor` is pinned to
    /// `per_layer_at_anchor` (from the stage tables); the iteration overhead
    /// is the residual of the anchor's TPOT, and the per-request slope comes
    /// from the second point.
    pub fn calibrate(
        anchor: TpotPoint,
        other: TpotPoint,
        per_layer_at_anchor: f64,
        num_layers: u32,
        mtp: MtpConfig,
    ) -> Result<Self> {
        if anchor.batch == other.batch {
            return Err(Error::DegenerateCalibration("calibration batches must differ".into()));
        }
        if num_layers == 0 {
            return Err(Error::invalid("num_layers must be positive"));
        }
        let tokens = mtp.expected_tokens();
        let iter_a = anchor.tpot_ms * 1e3 * tokens;
        let iter_b = other.tpot_ms * 1e3 * tokens;
        let overhead = iter_a - num_layers as f64 * per_layer_at_anchor;
        let layer_b = (iter_b - overhead) / num_layers as f64;
        let slope = (per_layer_at_anchor - layer_b) / (anchor.batch as f64 - other.batch as f64);
        let fixed = per_layer_at_anchor - slope * anchor.batch as f64;
        if overhead < 0.0 || fixed < 0.0 || slope < 0.0 {
            return Err(Error::DegenerateCalibration(format!(
                "fit has negative terms: overhead {overhead:.1}us, fixed {fixed:.1}us, slope {slope:.3}us"
            )));
        }
        Ok(DecodeLatencyModel {
            num_layers,
            per_layer_fixed: fixed,
            per_layer_per_request: slope,
            iteration_overhead: overhead,
            mtp,
        })
    }

    pub fn per_layer(&self, batch: u32) -> f64 {
        self.per_layer_fixed + self.per_layer_per_request * batch as f64
    }

    pub fn predict(&self, batch: u32) -> DecodeIterationResult {
        tpot_and_throughput(batch, self.num_layers, self.per_layer(batch), &self.mtp, self.iteration_overhead)
    }
}
