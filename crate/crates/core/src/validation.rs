//! Reference-value checks: closed-form results recomputed by the library
//! and compared with published figures under fixed tolerances.

use serde::Serialize;

use crate::expert_parallel::{plan_buffers, COMBINE_MSG_BYTES, DISPATCH_MSG_BYTES};
use crate::interconnect::{
    calibrate_plane, estimate_ep_exchange, EpMeasurement, Mechanism, PlaneSpec, REFERENCE_COMBINE, REFERENCE_DISPATCH,
};
use crate::model_cache::{summarize_strategy, CacheStrategy, LoadScenario, ModelBlockSet};
use crate::pipeline::{
    decode_layer_latency, default_decode_streams, default_prefill_stages, prefill_layer_latency, simulate_mtp,
    DecodeLatencyModel, DieResources, MtpConfig, Stage, StageKind, StreamSpec, TpotPoint, DEFAULT_SERIAL_FRACTION,
};
use crate::prefill_hybrid::map_connections;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Tolerance {
    Exact,
    Absolute(f64),
    Relative(f64),
}

impl Tolerance {
    pub fn accepts(self, expected: f64, computed: f64) -> bool {
        match self {
            Tolerance::Exact => expected == computed,
            Tolerance::Absolute(t) => (computed - expected).abs() <= t,
            Tolerance::Relative(t) => (computed - expected).abs() <= t * expected.abs(),
        }
    }

    fn describe(self) -> String {
        match self {
            Tolerance::Exact => "exact".into(),
            Tolerance::Absolute(t) => format!("±{t}"),
            Tolerance::Relative(t) => format!("±{}%", t * 100.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableCheck {
    pub name: String,
    pub expected: f64,
    pub computed: f64,
    pub unit: &'static str,
    pub tolerance: Tolerance,
    pub pass: bool,
}

impl TableCheck {
    fn new(name: impl Into<String>, expected: f64, computed: f64, unit: &'static str, tolerance: Tolerance) -> Self {
        TableCheck {
            name: name.into(),
            expected,
            computed,
            unit,
            tolerance,
            pass: tolerance.accepts(expected, computed),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<40} expected {:>12.4} computed {:>12.4} {:<10} ({})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.expected,
            self.computed,
            self.unit,
            self.tolerance.describe()
        )
    }
}

const MIB: f64 = (1u64 << 20) as f64;

fn buffer_checks(out: &mut Vec<TableCheck>) {
    let b = plan_buffers(320, 96, 8, 1, DISPATCH_MSG_BYTES, COMBINE_MSG_BYTES);
    for (name, expected, got) in [
        ("ep320 dispatch buffer", 225.0, b.dispatch_buffer),
        ("ep320 combine buffer", 420.0, b.combine_buffer),
        ("ep320 total buffer", 645.0, b.total()),
    ] {
        out.push(TableCheck::new(name, expected, got as f64 / MIB, "MiB", Tolerance::Absolute(1.0 / 1024.0)));
    }
}

fn model_cache_checks(out: &mut Vec<TableCheck>) -> Result<()> {
    let model = ModelBlockSet::new("deepseek-r1-int8", 1, 671_000_000_000, 1 << 30)?;
    let rows = [
        (CacheStrategy::NoCache, 2560.0, None, 0.0, 0.0, 320.0),
        (CacheStrategy::LocalDram, 2560.0, Some(5.0), 8.0, 0.125, 281.0),
        (CacheStrategy::EmsPool, 320.0, Some(5.0), 1.0, 1.0, 5.0),
    ];
    for (strategy, cold, warm, overhead, hit, switch) in rows {
        let s = summarize_strategy(
            &LoadScenario {
                strategy,
                ..LoadScenario::default()
            },
            &model,
            8,
        )?;
        let n = strategy.name();
        out.push(TableCheck::new(format!("{n} cold start"), cold, s.cold_start, "s", Tolerance::Relative(0.01)));
        if let (Some(w), Some(got)) = (warm, s.warm_start) {
            out.push(TableCheck::new(format!("{n} warm start"), w, got, "s", Tolerance::Exact));
        }
        out.push(TableCheck::new(format!("{n} dram overhead"), overhead, s.dram_overhead, "x model", Tolerance::Exact));
        out.push(TableCheck::new(format!("{n} switch hit rate"), hit, s.hit_rate, "fraction", Tolerance::Exact));
        out.push(TableCheck::new(format!("{n} average switch"), switch, s.avg_switch, "s", Tolerance::Relative(0.01)));
    }
    Ok(())
}

fn mapping_checks(out: &mut Vec<TableCheck>) -> Result<()> {
    let c = map_connections(16, 4, 8)?;
    out.push(TableCheck::new(
        "pd mapping (dp 5, tp 3)",
        11.0,
        c.prefill_rank(5, 3) as f64,
        "rank",
        Tolerance::Exact,
    ));
    for (p, t, d) in [(16, 4, 8), (32, 4, 32)] {
        let h = map_connections(p, t, d)?.load_histogram();
        let max = *h.iter().max().unwrap_or(&0) as f64;
        let min = *h.iter().min().unwrap_or(&0) as f64;
        out.push(TableCheck::new(
            format!("pd mapping {p}/{t}/{d} load spread"),
            0.0,
            max - min,
            "connections",
            Tolerance::Exact,
        ));
    }
    Ok(())
}

fn mtp_checks(out: &mut Vec<TableCheck>) -> Result<()> {
    let cfg = MtpConfig::default();
    let r = simulate_mtp(&cfg, 874.0, 1260.0, 10_000, 0x5eed)?;
    out.push(TableCheck::new("mtp tokens per step", 1.7, r.tokens_per_iteration, "tokens", Tolerance::Absolute(0.02)));
    out.push(TableCheck::new(
        "mtp throughput ratio",
        1.179,
        cfg.analytic_ratio(874.0, 1260.0),
        "x",
        Tolerance::Absolute(0.001),
    ));
    Ok(())
}

fn pipeline_checks(out: &mut Vec<TableCheck>) -> Result<()> {
    let half = |name: &str| StreamSpec {
        aic: 12,
        aiv: 24,
        stages: vec![Stage::new(name, StageKind::Cube, 600.0)],
    };
    let overlapped = decode_layer_latency(&half("a"), &half("b"), true, DieResources::default(), 0.0)?;
    out.push(TableCheck::new("two 600us streams overlapped", 600.0, overlapped, "us", Tolerance::Exact));

    let (s0, s1) = default_decode_streams();
    let die = DieResources::default();
    let mb = decode_layer_latency(&s0, &s1, true, die, DEFAULT_SERIAL_FRACTION)?;
    let seq = decode_layer_latency(&s0, &s1, false, die, DEFAULT_SERIAL_FRACTION)?;
    out.push(TableCheck::new("decode microbatch reduction", 0.10, 1.0 - mb / seq, "fraction", Tolerance::Absolute(0.03)));

    let stages = default_prefill_stages();
    let reduction = 1.0 - prefill_layer_latency(&stages, true) / prefill_layer_latency(&stages, false);
    out.push(TableCheck::new("prefill microbatch reduction", 0.24, reduction, "fraction", Tolerance::Absolute(0.04)));

    let model = DecodeLatencyModel::calibrate(
        TpotPoint { batch: 96, tpot_ms: 49.4 },
        TpotPoint { batch: 8, tpot_ms: 14.9 },
        mb,
        61,
        MtpConfig::default(),
    )?;
    let p = model.predict(24);
    out.push(TableCheck::new("batch 24 tpot", 24.6, p.tpot, "ms", Tolerance::Relative(0.20)));
    out.push(TableCheck::new("batch 24 throughput", 974.0, p.throughput, "tokens/s", Tolerance::Relative(0.20)));
    Ok(())
}

/// Latency predicted for every interior row of `table` by a plane fitted
/// on its two endpoints, moving the endpoints' mean payload.
pub fn interpolate_ep_table(table: &[EpMeasurement]) -> Result<Vec<(EpMeasurement, f64)>> {
    let (lo, hi) = (table[0], table[table.len() - 1]);
    let plane = calibrate_plane(&[lo, hi], &PlaneSpec::ub_template())?;
    let payload = ((lo.payload_bytes() + hi.payload_bytes()) / 2.0).round() as u64;
    Ok(table[1..table.len() - 1]
        .iter()
        .map(|m| {
            let est = estimate_ep_exchange(m.ep_degree, payload, &plane, Mechanism::AivDirect);
            (*m, est.latency)
        })
        .collect())
}

fn ep_table_checks(out: &mut Vec<TableCheck>) -> Result<()> {
    for (name, table) in [("dispatch", &REFERENCE_DISPATCH), ("combine", &REFERENCE_COMBINE)] {
        for (m, predicted) in interpolate_ep_table(table)? {
            out.push(TableCheck::new(
                format!("ep{} {name} latency", m.ep_degree),
                m.latency,
                predicted,
                "us",
                Tolerance::Relative(0.15),
            ));
        }
    }
    Ok(())
}

/// Runs every check.
pub fn validate_tables() -> Result<Vec<TableCheck>> {
    let mut out = Vec::new();
    buffer_checks(&mut out);
    model_cache_checks(&mut out)?;
    mapping_checks(&mut out)?;
    mtp_checks(&mut out)?;
    pipeline_checks(&mut out)?;
    ep_table_checks(&mut out)?;
    Ok(out)
}
