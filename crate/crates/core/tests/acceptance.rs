//! Exit gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use pdc_sim::expert_parallel::{plan_buffers, COMBINE_MSG_BYTES, DISPATCH_MSG_BYTES};
use pdc_sim::interconnect::{
    calibrate_plane, estimate_ep_exchange, EpMeasurement, Mechanism, PlaneSpec, REFERENCE_COMBINE, REFERENCE_DISPATCH,
};
use pdc_sim::mempool::{GetOutcome, HashRing, MemoryPool, NamespaceSpec, Payload, PoolConfig, Tier};
use pdc_sim::model_cache::{summarize_strategy, CacheStrategy, LoadScenario, ModelBlockSet};
use pdc_sim::pipeline::{
    decode_layer_latency, default_decode_streams, default_prefill_stages, prefill_layer_latency, simulate_mtp,
    DecodeLatencyModel, DieResources, MtpConfig, Stage, StageKind, StreamSpec, TpotPoint, DEFAULT_SERIAL_FRACTION,
};
use pdc_sim::prefill_hybrid::map_connections;
use pdc_sim::quantizer::{
    block_clip_search, compare_recipes, default_alpha_grid, default_scale_grid, outlier_suppress, quantize_per_channel,
    quantize_per_token, scale_search, synthetic_outlier_layer, RealMatrix,
};
use pdc_sim::scenario::{apply_axis, parse_config, run_scenario, sweep, sweep_to_csv, sweep_with_threads, ScenarioConfig};
use pdc_sim::validation::interpolate_ep_table;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_rel(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs()
}

const KIB: u64 = 1024;
const MIB: u64 = 1024 * 1024;

fn c1_buffers() -> Outcome {
    let b = plan_buffers(320, 96, 8, 1, DISPATCH_MSG_BYTES, COMBINE_MSG_BYTES);
    // rank_num * local_batch * min(topK, experts_per_die) * message size.
    let dispatch = 320 * 96 * (7 * KIB + KIB / 2);
    let combine = 320 * 96 * 14 * KIB;
    let kb = |x: u64| x / KIB;
    let ok = kb(b.dispatch_buffer) == kb(dispatch)
        && kb(b.combine_buffer) == kb(combine)
        && dispatch == 225 * MIB
        && combine == 420 * MIB
        && kb(b.total()) == 645 * 1024;
    check(
        ok,
        format!(
            "dispatch {} MiB, combine {} MiB, total {} MiB (exact to the KiB)",
            b.dispatch_buffer as f64 / MIB as f64,
            b.combine_buffer as f64 / MIB as f64,
            b.total() as f64 / MIB as f64
        ),
    )
}

fn c2_model_cache() -> Outcome {
    let model = ModelBlockSet::new("deepseek-r1", 1, 671_000_000_000, 1 << 30).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    // (strategy, cold, warm, overhead, hit rate, average switch)
    for (strategy, cold, warm, overhead, hit, switch) in [
        (CacheStrategy::NoCache, 2560.0, None, 0.0, 0.0, 320.0),
        (CacheStrategy::LocalDram, 2560.0, Some(5.0), 8.0, 0.125, 281.0),
        (CacheStrategy::EmsPool, 320.0, Some(5.0), 1.0, 1.0, 5.0),
    ] {
        let s = summarize_strategy(
            &LoadScenario {
                strategy,
                ..LoadScenario::default()
            },
            &model,
            8,
        )
        .map_err(|e| e.to_string())?;
        ok &= within_rel(s.cold_start, cold, 0.01)
            && s.warm_start == warm
            && s.dram_overhead == overhead
            && s.hit_rate == hit
            && within_rel(s.avg_switch, switch, 0.01);
        lines.push(format!(
            "{} cold {:.1}s switch {:.1}s",
            strategy.name(),
            s.cold_start,
            s.avg_switch
        ));
    }
    check(ok, lines.join("; ") + " (latency ±1%, other cells exact)")
}

fn c3_mapping() -> Outcome {
    let mut ok = true;
    for (p, t, d) in [(16usize, 4usize, 8usize), (32, 4, 32)] {
        let c = map_connections(p, t, d).map_err(|e| e.to_string())?;
        let ratio = p / t;
        let group_size = d / ratio;
        let mut hist = vec![0usize; p];
        for dp in 0..d {
            for tp in 0..t {
                let want = (dp / group_size) * t + tp;
                ok &= c.prefill_rank(dp, tp) == want;
                hist[want] += 1;
            }
        }
        ok &= hist.iter().all(|&h| h == hist[0]) && c.load_histogram() == hist;
    }
    let spot = map_connections(16, 4, 8).map_err(|e| e.to_string())?.prefill_rank(5, 3);
    ok &= spot == 11;
    check(ok, format!("both layouts total and uniform, (dp 5, tp 3) -> rank {spot}"))
}

fn c4_mtp() -> Outcome {
    let cfg = MtpConfig::default();
    let r = simulate_mtp(&cfg, 874.0, 1260.0, 10_000, 0x5eed).map_err(|e| e.to_string())?;
    let ratio = cfg.analytic_ratio(874.0, 1260.0);
    check(
        (r.tokens_per_iteration - 1.7).abs() <= 0.02 && (ratio - 1.179).abs() <= 0.001,
        format!(
            "tokens/iteration {:.4} (1.7 ± 0.02), ratio {:.4} (1.179 ± 0.001)",
            r.tokens_per_iteration, ratio
        ),
    )
}

fn c5_microbatch() -> Outcome {
    let die = DieResources::default();
    let half = |n: &str| StreamSpec {
        aic: 12,
        aiv: 24,
        stages: vec![Stage::new(n, StageKind::Cube, 600.0)],
    };
    let two = decode_layer_latency(&half("a"), &half("b"), true, die, 0.0).map_err(|e| e.to_string())?;
    let (s0, s1) = default_decode_streams();
    let mb = decode_layer_latency(&s0, &s1, true, die, DEFAULT_SERIAL_FRACTION).map_err(|e| e.to_string())?;
    let seq = decode_layer_latency(&s0, &s1, false, die, DEFAULT_SERIAL_FRACTION).map_err(|e| e.to_string())?;
    let decode = 1.0 - mb / seq;
    let p = default_prefill_stages();
    let prefill = 1.0 - prefill_layer_latency(&p, true) / prefill_layer_latency(&p, false);
    check(
        two == 600.0 && (decode - 0.10).abs() <= 0.03 && (prefill - 0.24).abs() <= 0.04,
        format!(
            "overlapped {two} us, decode reduction {:.1}% (10 ± 3), prefill reduction {:.1}% (24 ± 4)",
            decode * 100.0,
            prefill * 100.0
        ),
    )
}

fn c6_tpot() -> Outcome {
    let (s0, s1) = default_decode_streams();
    let per_layer = decode_layer_latency(&s0, &s1, true, DieResources::default(), DEFAULT_SERIAL_FRACTION)
        .map_err(|e| e.to_string())?;
    let m = DecodeLatencyModel::calibrate(
        TpotPoint { batch: 96, tpot_ms: 49.4 },
        TpotPoint { batch: 8, tpot_ms: 14.9 },
        per_layer,
        61,
        MtpConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let p = m.predict(24);
    let tpots: Vec<f64> = (1..=128).map(|b| m.predict(b).tpot).collect();
    let monotone = tpots.windows(2).all(|w| w[1] >= w[0]);
    check(
        within_rel(p.tpot, 24.6, 0.20) && within_rel(p.throughput, 974.0, 0.20) && monotone,
        format!(
            "batch 24: tpot {:.2} ms (24.6 ± 20%), throughput {:.1} tokens/s (974 ± 20%), monotone {monotone}",
            p.tpot, p.throughput
        ),
    )
}

fn c7_ep_table() -> Outcome {
    let mut ok = true;
    let mut worst = 0.0f64;
    for table in [&REFERENCE_DISPATCH, &REFERENCE_COMBINE] {
        for (m, predicted) in interpolate_ep_table(table).map_err(|e| e.to_string())? {
            let err = (predicted / m.latency - 1.0).abs();
            worst = worst.max(err);
            ok &= err <= 0.15;
        }
        let (lo, hi): (EpMeasurement, EpMeasurement) = (table[0], table[table.len() - 1]);
        let plane = calibrate_plane(&[lo, hi], &PlaneSpec::ub_template()).map_err(|e| e.to_string())?;
        let payload = ((lo.payload_bytes() + hi.payload_bytes()) / 2.0).round() as u64;
        let lat: Vec<f64> = [8, 16, 32, 64, 128, 256]
            .iter()
            .map(|&ep| estimate_ep_exchange(ep, payload, &plane, Mechanism::AivDirect).latency)
            .collect();
        ok &= lat.windows(2).all(|w| w[1] >= w[0]);
    }
    check(ok, format!("EP16-128 worst error {:.1}% (±15%), latency nondecreasing in EP", worst * 100.0))
}

fn shipped() -> Result<ScenarioConfig, String> {
    parse_config(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/deepseek_r1_default.toml"))
        .map_err(|e| e.to_string())
}

fn c8_context_cache() -> Outcome {
    let cfg = shipped()?;
    let rates: Vec<String> = ["0", "0.125", "0.25", "0.5", "0.9"].iter().map(|s| s.to_string()).collect();
    let ub = sweep(&cfg, "reuse_rate", &rates).map_err(|e| e.to_string())?;
    let vpc_cfg = apply_axis(&cfg, "access_plane", "vpc").map_err(|e| e.to_string())?;
    let vpc = sweep(&vpc_cfg, "reuse_rate", &rates).map_err(|e| e.to_string())?;
    let get = |r: &pdc_sim::scenario::MetricReport, m: &str| r.get(m).unwrap_or(f64::NAN);
    let tput: Vec<f64> = ub.iter().map(|r| get(r, "prefill_throughput")).collect();
    let ttft: Vec<f64> = ub.iter().map(|r| get(r, "ttft_mean")).collect();
    let vt: Vec<f64> = vpc.iter().map(|r| get(r, "prefill_throughput")).collect();
    let ratio = tput[4] / tput[0];
    let ttft_down = ttft.windows(2).all(|w| w[1] < w[0]);
    let ub_wins = tput.iter().zip(&vt).all(|(u, v)| u > v);
    let best = tput.iter().zip(&vt).map(|(u, v)| u / v).fold(0.0, f64::max);
    check(
        (2.0..=2.6).contains(&ratio) && ttft_down && ub_wins,
        format!(
            "throughput 90%/0% reuse {ratio:.3} ([2.0, 2.6]), ttft decreasing {ttft_down}, \
             ub > vpc everywhere {ub_wins} (up to {best:.2}x)"
        ),
    )
}

fn isolation_holds(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = MemoryPool::uniform(common::unit_config(), 3, 40, 100, PlaneSpec::ub());
    for id in 1..=3 {
        pool.create_namespace(NamespaceSpec { id, quota: 120 }).unwrap();
    }
    for k in 0..8u64 {
        pool.put(3, k, Payload::Synthetic(5)).unwrap();
    }
    let view = |p: &MemoryPool| {
        let tiers: Vec<Vec<u64>> = p
            .server_ids()
            .into_iter()
            .flat_map(|s| [p.tier_keys(s, Tier::Dram, 3).unwrap(), p.tier_keys(s, Tier::Ssd, 3).unwrap()])
            .collect();
        (p.namespace_usage(3).unwrap(), tiers)
    };
    let before = view(&pool);
    for _ in 0..2000 {
        let ns = rng.random_range(1..3);
        let key = rng.random_range(0..32u64);
        match rng.random_range(0..3) {
            0 => {
                let _ = pool.put(ns, key, Payload::Synthetic(rng.random_range(1..20)));
            }
            1 => {
                pool.get(ns, key).unwrap();
            }
            _ => {
                pool.delete(ns, key).unwrap();
            }
        }
        if view(&pool) != before {
            return false;
        }
    }
    true
}

fn c9_mempool() -> Outcome {
    for seed in 0..5 {
        common::replay_lru(seed, 10_000)?;
    }
    let ids: Vec<u32> = (0..16).collect();
    let full = HashRing::new(&ids, 128);
    let mut smaller = full.clone();
    smaller.remove_server(5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let keys: Vec<u64> = (0..100_000).map(|_| rng.random()).collect();
    let moved = keys.iter().filter(|&&k| full.lookup(k).unwrap() != smaller.lookup(k).unwrap()).count();
    let frac = moved as f64 / keys.len() as f64;
    let remap_ok = within_rel(frac, 1.0 / 16.0, 0.20);
    let isolated = (0..8).all(isolation_holds);

    let mut pool = MemoryPool::uniform(PoolConfig::default(), 4, 1 << 30, 1 << 34, PlaneSpec::ub());
    pool.create_namespace(NamespaceSpec { id: 1, quota: 1 << 34 }).unwrap();
    let payloads: Vec<Vec<u8>> = (0..64).map(|i| (0..(100 + i * 37)).map(|_| rng.random()).collect()).collect();
    for (k, p) in payloads.iter().enumerate() {
        pool.put(1, k as u64, Payload::Bytes(p.clone())).map_err(|e| e.to_string())?;
    }
    for id in pool.server_ids() {
        pool.fail_server(id).unwrap();
        pool.recover_server(id).unwrap();
    }
    let round_trip = payloads.iter().enumerate().all(|(k, p)| {
        matches!(pool.get(1, k as u64), Ok(GetOutcome::Hit { payload: Payload::Bytes(b), tier: Tier::Ssd, .. }) if &b == p)
    });
    check(
        remap_ok && isolated && round_trip,
        format!(
            "lru oracle exact on 5 x 10^4 ops, remap {frac:.4} (1/16 ± 20%), isolation {isolated}, \
             fail/recover round trip {round_trip}"
        ),
    )
}

fn c10_quantizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut round_trip = true;
    for _ in 0..1000 {
        let (r, c) = (rng.random_range(1..9), rng.random_range(1..9));
        let mag = 10f64.powf(rng.random_range(-3.0..3.0));
        let m = RealMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0) * mag);
        for q in [quantize_per_token(&m), quantize_per_channel(&m)] {
            let d = q.dequantize();
            for i in 0..r {
                for j in 0..c {
                    round_trip &= (d.get(i, j) - m.get(i, j)).abs() <= q.scale_at(i, j) * 0.5 * (1.0 + 1e-12);
                }
            }
        }
    }
    let sg = default_scale_grid();
    let ag = default_alpha_grid();
    let scale_match = (0..100u64).all(|seed| {
        let (w, x) = common::scale_case(seed);
        scale_search(&w, &x, &sg).map(|r| r.s) == Ok(common::scale_search_oracle(&w, &x, &sg))
    });
    let clip_match = (0..100u64).all(|seed| {
        let (w, x) = common::clip_case(seed);
        block_clip_search(&w, &x, &ag).map(|r| r.alpha) == Ok(common::clip_search_oracle(&w, &x, &ag))
    });
    let mut worst_rel = 0.0f64;
    let mut ordered = true;
    for seed in 0..20 {
        let (w, x) = synthetic_outlier_layer(seed, 16, 16, 8);
        let (w2, x2, _) = outlier_suppress(&w, &x).map_err(|e| e.to_string())?;
        let p = w.matmul(&x).map_err(|e| e.to_string())?;
        worst_rel = worst_rel.max(p.distance(&w2.matmul(&x2).map_err(|e| e.to_string())?) / p.frobenius());
        let r = compare_recipes(&w, &x, &sg, &ag, 4).map_err(|e| e.to_string())?;
        ordered &= r.full_error <= r.search_error && r.search_error <= r.naive_error;
    }
    check(
        round_trip && scale_match && clip_match && worst_rel <= 1e-12 && ordered,
        format!(
            "round trip {round_trip}, scale oracle {scale_match}, clip oracle {clip_match}, \
             suppress rel err {worst_rel:.1e} (<= 1e-12), ordering {ordered}"
        ),
    )
}

fn c11_determinism() -> Outcome {
    let mut cfg = shipped()?;
    cfg.workload.reuse_rate = 0.5;
    let a = run_scenario(&cfg).map_err(|e| e.to_string())?.to_json();
    let b = run_scenario(&cfg).map_err(|e| e.to_string())?.to_json();
    let seeds: Vec<String> = (1..=6).map(|s| s.to_string()).collect();
    let one = sweep_with_threads(&cfg, "seed", &seeds, 1).map_err(|e| e.to_string())?;
    let four = sweep_with_threads(&cfg, "seed", &seeds, 4).map_err(|e| e.to_string())?;
    let same = sweep_to_csv("seed", &seeds, &one).map_err(|e| e.to_string())?
        == sweep_to_csv("seed", &seeds, &four).map_err(|e| e.to_string())?;
    check(
        a == b && same,
        format!("repeat run byte-identical {}, 1 vs 4 thread sweep identical {same}", a == b),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("buffer arithmetic", c1_buffers),
        ("model cache table", c2_model_cache),
        ("connection mapping", c3_mapping),
        ("mtp economics", c4_mtp),
        ("microbatch overlap", c5_microbatch),
        ("tpot prediction", c6_tpot),
        ("ep table interpolation", c7_ep_table),
        ("context cache scaling", c8_context_cache),
        ("memory pool properties", c9_mempool),
        ("quantizer properties", c10_quantizer),
        ("determinism", c11_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail}", i + 1);
    }
    println!("{} criteria, {failed} failed", criteria.len());
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
