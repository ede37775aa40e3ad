//! Deterministic desk-scale simulator and component library for serving a
//! large mixture-of-experts model on a supernode with prefill / decode /
//! caching disaggregation.
//!
//! The crate is organized by subsystem:
//!
//! * [`workload`] - model, cluster and workload specs, synthetic request streams.
//! * [`interconnect`] - UB / RDMA / VPC plane cost models and collectives.
//! * [`mempool`] - consistent-hashed DRAM-over-SSD memory pool.
//! * [`context_cache`] - paged, prefix-chained KV block reuse on top of the pool.
//! * [`model_cache`] - model load / switch latency calculators and pool-backed loading.
//! * [`expert_parallel`] - expert placement, routing, EPLB, fused dispatch/combine.
//! * [`pipeline`] - event engine, decode/prefill microbatch pipelines, MTP, TPOT.
//! * [`prefill_hybrid`] - SP-TP-SP packing and planning, prefill to decode handoff.
//! * [`quantizer`] - INT8 quantization with scale search, clipping and smoothing.
//! * [`scenario`] - configuration, end-to-end runs, sweeps and table validation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod context_cache;
pub mod error;
pub mod expert_parallel;
pub mod hash;
pub mod interconnect;
pub mod mempool;
pub mod model_cache;
pub mod pipeline;
pub mod prefill_hybrid;
pub mod quantizer;
pub mod scenario;
pub mod validation;
pub mod workload;

pub use error::{Error, Result};
