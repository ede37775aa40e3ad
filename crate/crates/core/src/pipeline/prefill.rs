//! Prefill layer pipeline across three engine classes: AIC for the heavy
//! matmuls, AIV for dispatch / combine side computation, SDMA for bulk
//! transfers. Two microbatches interleave so each engine class works on one
//! while the others work on the other.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineStage {
    pub name: String,
    /// Microseconds per layer for the whole batch.
    pub latency: f64,
}

impl EngineStage {
    pub fn new(name: &str, latency: f64) -> Self {
        EngineStage {
            name: name.to_string(),
            latency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefillStages {
    pub aic: Vec<EngineStage>,
    pub aiv: Vec<EngineStage>,
    pub sdma: Vec<EngineStage>,
}

fn busy(stages: &[EngineStage]) -> f64 {
    stages.iter().map(|s| s.latency).sum()
}

impl PrefillStages {
    /// Busy time of each engine class: (AIC, AIV, SDMA).
    pub fn busy(&self) -> (f64, f64, f64) {
        (busy(&self.aic), busy(&self.aiv), busy(&self.sdma))
    }
}

/// Per-layer prefill latency, microseconds. Microbatched, the busiest engine
/// class sets the pace; otherwise every stage runs serially.
pub fn prefill_layer_latency(stages: &PrefillStages, microbatched: bool) -> f64 {
    let (a, v, s) = stages.busy();
    if microbatched {
        a.max(v).max(s)
    } else {
        a + v + s
    }
}

/// Stage tables for a 4K-token prompt.
pub fn default_prefill_stages() -> PrefillStages {
    PrefillStages {
        aic: vec![EngineStage::new("attention", 1400.0), EngineStage::new("mlp", 1200.0)],
        aiv: vec![
            EngineStage::new("dispatch_compute", 180.0),
            EngineStage::new("combine_compute", 160.0),
        ],
        sdma: vec![EngineStage::new("dispatch", 250.0), EngineStage::new("combine", 231.0)],
    }
}
