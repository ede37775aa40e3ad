use pdc_sim::expert_parallel::{
    build_placement, ep_sweep_point, load_imbalance, plan_buffers, random_routing, route_tokens, simulate_combine,
    simulate_dispatch, BufferLedger, BufferRegion, DispatchConfig, COMBINE_MSG_BYTES, DISPATCH_MSG_BYTES,
};
use pdc_sim::interconnect::{calibrate_plane, PlaneSpec, REFERENCE_COMBINE, REFERENCE_DISPATCH};
use pdc_sim::Error;
use proptest::prelude::*;

fn endpoints_plane(table: &[pdc_sim::interconnect::EpMeasurement]) -> PlaneSpec {
    calibrate_plane(&[table[0], table[table.len() - 1]], &PlaneSpec::ub_template()).unwrap()
}

#[test]
fn uniform_routing_balanced_at_ep256() {
    let placement = build_placement(256, 0, 256, 0, None).unwrap();
    let batches = random_routing(&placement, 10_000 / 256 + 1, 8, 7).unwrap();
    let mut hist = vec![0usize; 256];
    for b in &batches {
        for (h, n) in hist.iter_mut().zip(&b.histogram) {
            *h += n;
        }
    }
    // Independent recount from the decisions.
    let mut recount = vec![0usize; 256];
    for b in &batches {
        for d in &b.decisions {
            for &r in &d.ranks {
                recount[r] += 1;
            }
        }
    }
    assert_eq!(hist, recount);
    let total: usize = hist.iter().sum();
    assert!(total >= 10_000 * 8);
    assert!(load_imbalance(&hist) <= 1.3, "imbalance {}", load_imbalance(&hist));
}

#[test]
fn strictly_decreasing_scores_pick_first_experts() {
    let placement = build_placement(8, 0, 256, 0, None).unwrap();
    let scores = vec![(0..256).map(|i| 1.0 - i as f64 / 256.0).collect::<Vec<f64>>()];
    let batch = route_tokens(&scores, &placement, 8, 0).unwrap();
    assert_eq!(batch.decisions[0].experts, (0..8).collect::<Vec<u32>>());
    let flat = vec![vec![0.5; 256]];
    let batch = route_tokens(&flat, &placement, 8, 0).unwrap();
    assert_eq!(batch.decisions[0].experts, (0..8).collect::<Vec<u32>>());
    assert!(batch.decisions[0].weights.iter().all(|w| (w - 0.125).abs() < 1e-15));
}

#[test]
fn placement_must_fill_ranks() {
    assert!(matches!(build_placement(320, 32, 256, 31, None), Err(Error::Placement(_))));
}

#[test]
fn buffer_arithmetic() {
    let zero = plan_buffers(320, 0, 8, 1, DISPATCH_MSG_BYTES, COMBINE_MSG_BYTES);
    assert_eq!((zero.dispatch_buffer, zero.combine_buffer), (0, 0));
    let two = plan_buffers(320, 96, 8, 2, DISPATCH_MSG_BYTES, COMBINE_MSG_BYTES);
    assert_eq!(two.max_tokens, 192);
    let one = plan_buffers(320, 96, 8, 1, DISPATCH_MSG_BYTES, COMBINE_MSG_BYTES);
    assert_eq!(one.dispatch_buffer, 320 * 96 * (7 * 1024 + 512));
    assert_eq!(one.combine_buffer, 320 * 96 * 14 * 1024);
}

#[test]
fn combine_weights_sum_to_one() {
    let placement = build_placement(32, 32, 256, 32, None).unwrap();
    let plan = plan_buffers(32, 64, 8, placement.experts_per_die as u64, DISPATCH_MSG_BYTES, COMBINE_MSG_BYTES);
    let batches = random_routing(&placement, 64, 8, 3).unwrap();
    let cfg = DispatchConfig::default();
    let (_, stats) = simulate_dispatch(&batches, &plan, &PlaneSpec::ub(), &cfg).unwrap();
    assert_eq!(stats.total_sent(), 32 * 64 * 8);
    let c = simulate_combine(&stats, &plan, &PlaneSpec::ub_combine(), &cfg).unwrap();
    assert!(c.outputs_per_rank.iter().all(|&n| n == 64));
    for sums in &c.weight_sums {
        for s in sums {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn top1_combine_is_weighted_identity() {
    let placement = build_placement(8, 0, 256, 0, None).unwrap();
    let plan = plan_buffers(8, 16, 1, 32, DISPATCH_MSG_BYTES, COMBINE_MSG_BYTES);
    let batches = random_routing(&placement, 16, 1, 4).unwrap();
    let cfg = DispatchConfig::default();
    let (_, stats) = simulate_dispatch(&batches, &plan, &PlaneSpec::ub(), &cfg).unwrap();
    let c = simulate_combine(&stats, &plan, &PlaneSpec::ub_combine(), &cfg).unwrap();
    for rank in &stats.contributions {
        assert!(rank.iter().all(|t| t.len() == 1 && t[0].2 == 1.0));
    }
    assert!(c.weight_sums.iter().flatten().all(|&s| s == 1.0));
}

#[test]
fn adversarial_batch_overflows() {
    let placement = build_placement(8, 0, 256, 0, None).unwrap();
    // Top-1 routing with every token preferring expert 0 on rank 0.
    let plan = plan_buffers(8, 4, 1, 32, DISPATCH_MSG_BYTES, COMBINE_MSG_BYTES);
    let mut s = vec![0.0; 256];
    s[0] = 1.0;
    let scores = vec![s; plan.max_tokens as usize + 1];
    let batch = route_tokens(&scores, &placement, 1, 0).unwrap();
    let mut batches = random_routing(&placement, 0, 1, 1).unwrap();
    batches[0] = batch;
    let err = simulate_dispatch(&batches, &plan, &PlaneSpec::ub(), &DispatchConfig::default()).unwrap_err();
    assert!(matches!(err, Error::BufferOverflow { .. }));
}

#[test]
fn calibrated_plane_reproduces_endpoints() {
    let cfg = DispatchConfig::default();
    let dispatch = endpoints_plane(&REFERENCE_DISPATCH);
    let combine = endpoints_plane(&REFERENCE_COMBINE);
    let ep8 = ep_sweep_point(8, 256, 128, 8, &dispatch, &combine, &cfg, 1).unwrap();
    let ep256 = ep_sweep_point(256, 256, 128, 8, &dispatch, &combine, &cfg, 1).unwrap();
    assert!((ep8.dispatch_latency / 116.0 - 1.0).abs() < 0.15, "{}", ep8.dispatch_latency);
    assert!((ep256.combine_latency / 149.0 - 1.0).abs() < 0.15, "{}", ep256.combine_latency);
}

#[test]
fn double_buffers_never_alias() {
    let mut ledger = BufferLedger::new();
    for batch in 0..16u64 {
        let rank = 3;
        ledger.write(rank, BufferRegion::Dispatch, batch).unwrap();
        if batch > 0 {
            ledger.write(rank, BufferRegion::Combine, batch - 1).unwrap();
            ledger.release(rank, BufferRegion::Combine, batch - 1);
        }
        assert_eq!(ledger.owner(rank, BufferRegion::Dispatch), Some(batch));
        ledger.release(rank, BufferRegion::Dispatch, batch);
    }
    ledger.write(0, BufferRegion::Dispatch, 1).unwrap();
    assert!(ledger.write(0, BufferRegion::Dispatch, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_token_routed_top_k_times(tokens in 1usize..40, top_k in 1usize..9, seed in 0u64..1000) {
        let placement = build_placement(16, 16, 256, 16, None).unwrap();
        let batches = random_routing(&placement, tokens, top_k, seed).unwrap();
        for b in &batches {
            prop_assert_eq!(b.histogram.iter().sum::<usize>(), tokens * top_k);
            for d in &b.decisions {
                let mut e = d.experts.clone();
                e.sort_unstable();
                e.dedup();
                prop_assert_eq!(e.len(), top_k);
                prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (&x, &r) in d.experts.iter().zip(&d.ranks) {
                    prop_assert!(placement.replicas(x).contains(&r));
                }
            }
        }
    }
}
