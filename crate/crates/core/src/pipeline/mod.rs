//! Event engine and the latency models built on stage tables.

pub mod decode;
pub mod engine;
pub mod mtp;
pub mod prefill;
pub mod tpot;

pub use decode::{
    decode_layer_latency, default_decode_streams, resource_scaling, DieResources, Stage, StageKind, StreamSpec,
    DEFAULT_SERIAL_FRACTION,
};
pub use engine::{run_event_loop, Event, EventQueue, EventTrace};
pub use mtp::{simulate_mtp, MtpConfig, MtpResult};
pub use prefill::{default_prefill_stages, prefill_layer_latency, EngineStage, PrefillStages};
pub use tpot::{tpot_and_throughput, DecodeIterationResult, DecodeLatencyModel, TpotPoint};
