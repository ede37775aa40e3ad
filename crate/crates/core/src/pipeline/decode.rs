//! Two-stream microbatch decode pipeline.
//!
//! Stream 0 runs the attention half of a layer, stream 1 the MoE half; with
//! two microbatches in flight they overlap, so a layer costs the busier
//! stream's time. Without microbatching one stream owns the whole die and
//! runs both halves back to back.
//!
//! Stage latencies are per-layer stream busy times at the stream's own
//! resource allocation.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Matrix work on AIC cores.
    Cube,
    /// Vector work on AIV cores.
    Vector,
    /// Data movement; unaffected by core counts.
    Comm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub kind: StageKind,
    /// Microseconds at the owning stream's allocation.
    pub latency: f64,
}

impl Stage {
    pub fn new(name: &str, kind: StageKind, latency: f64) -> Self {
        Stage {
            name: name.to_string(),
            kind,
            latency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub aic: u32,
    pub aiv: u32,
    pub stages: Vec<Stage>,
}

impl StreamSpec {
    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.latency).sum()
    }
}

/// Core counts of one die.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DieResources {
    pub aic: u32,
    pub aiv: u32,
}

impl Default for DieResources {
    fn default() -> Self {
        DieResources { aic: 24, aiv: 48 }
    }
}

/// Amdahl-style scaling: a `serial_fraction` of the work does not speed up.
///
/// `latency = base * (serial + (1 - serial) * base_resources / new_resources)`
pub fn resource_scaling(base_latency: f64, base_resources: u32, new_resources: u32, serial_fraction: f64) -> Result<f64> {
    if base_resources == 0 || new_resources == 0 {
        return Err(Error::invalid("resource counts must be positive"));
    }
    if !(0.0..=1.0).contains(&serial_fraction) {
        return Err(Error::invalid("serial fraction must be in [0, 1]"));
    }
    Ok(base_latency * (serial_fraction + (1.0 - serial_fraction) * base_resources as f64 / new_resources as f64))
}

pub const DEFAULT_SERIAL_FRACTION: f64 = 0.1;

fn rescale(stage: &Stage, from: &StreamSpec, to: DieResources, serial: f64) -> Result<f64> {
    match stage.kind {
        StageKind::Cube => resource_scaling(stage.latency, from.aic, to.aic, serial),
        StageKind::Vector => resource_scaling(stage.latency, from.aiv, to.aiv, serial),
        StageKind::Comm => Ok(stage.latency),
    }
}

/// Per-layer decode latency, microseconds.
pub fn decode_layer_latency(
    stream0: &StreamSpec,
    stream1: &StreamSpec,
    microbatched: bool,
    die: DieResources,
    serial_fraction: f64,
) -> Result<f64> {
    if microbatched {
        if stream0.aic + stream1.aic > die.aic || stream0.aiv + stream1.aiv > die.aiv {
            return Err(Error::ResourceOversubscribed(format!(
                "streams need {}+{} AIC / {}+{} AIV, die has {} / {}",
                stream0.aic, stream1.aic, stream0.aiv, stream1.aiv, die.aic, die.aiv
            )));
        }
        return Ok(stream0.total().max(stream1.total()));
    }
    let mut total = 0.0;
    for s in [stream0, stream1] {
        for st in &s.stages {
            if st.latency > 0.0 {
                total += rescale(st, s, die, serial_fraction)?;
            }
        }
    }
    Ok(total)
}

/// Stage tables at decode batch 96 per die (with MTP, two tokens per
/// request per step). Attention stream on 16 AIC / 32 AIV, MoE stream on
/// 8 AIC / 16 AIV.
pub fn default_decode_streams() -> (StreamSpec, StreamSpec) {
    use StageKind::*;
    let s0 = StreamSpec {
        aic: 16,
        aiv: 32,
        stages: vec![
            Stage::new("mla_prolog", Cube, 380.0),
            Stage::new("fused_attention", Cube, 640.0),
            Stage::new("o_proj", Cube, 240.0),
        ],
    };
    let s1 = StreamSpec {
        aic: 8,
        aiv: 16,
        stages: vec![
            Stage::new("gate", Cube, 50.0),
            Stage::new("dispatch", Comm, 85.0),
            Stage::new("mlp", Cube, 835.0),
            Stage::new("combine", Comm, 80.0),
        ],
    };
    (s0, s1)
}
