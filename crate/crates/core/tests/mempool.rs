mod common;

use pdc_sim::interconnect::{Mechanism, PlaneSpec};
use pdc_sim::mempool::{
    FailMode, GetOutcome, HashRing, MemoryPool, NamespaceSpec, Payload, PoolConfig, Tier,
};
use pdc_sim::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{replay_lru, single_server_pool, unit_config, ORACLE_DRAM as DRAM, ORACLE_SSD as SSD};

#[test]
fn lru_matches_oracle_on_10k_ops() {
    for seed in 0..5 {
        replay_lru(seed, 10_000).unwrap();
    }
}

#[test]
fn demoted_object_served_from_ssd_then_promoted() {
    let mut pool = single_server_pool();
    pool.put(1, 1, Payload::Synthetic(30)).unwrap();
    let ack = pool.put(1, 2, Payload::Synthetic(30)).unwrap();
    assert_eq!(ack.demoted, vec![1]);
    assert_eq!(pool.residency(1, 1), Some(Tier::Ssd));
    match pool.get(1, 1).unwrap() {
        GetOutcome::Hit { tier, .. } => assert_eq!(tier, Tier::Ssd),
        GetOutcome::Miss => panic!("demoted object must stay readable"),
    }
    assert_eq!(pool.residency(1, 1), Some(Tier::Dram));
}

#[test]
fn single_server_owns_every_key() {
    let ring = HashRing::new(&[7], 128);
    for k in 0..1000u64 {
        assert_eq!(ring.lookup(k).unwrap(), 7);
    }
    assert!(matches!(HashRing::new(&[], 128).lookup(1), Err(Error::EmptyRing)));
}

#[test]
fn every_server_owns_vnode_count_points() {
    let ids: Vec<u32> = (0..16).collect();
    let ring = HashRing::new(&ids, 128);
    for id in ids {
        assert_eq!(ring.points_of(id), 128);
    }
}

#[test]
fn removal_remaps_about_one_nth() {
    let ids: Vec<u32> = (0..16).collect();
    let full = HashRing::new(&ids, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let keys: Vec<u64> = (0..100_000).map(|_| rng.random()).collect();
    for removed in [0u32, 5, 15] {
        let mut smaller = full.clone();
        assert!(smaller.remove_server(removed));
        let mut moved = 0usize;
        for &k in &keys {
            let before = full.lookup(k).unwrap();
            let after = smaller.lookup(k).unwrap();
            if before != after {
                assert_eq!(before, removed, "only keys of the removed server move");
                moved += 1;
            }
        }
        let frac = moved as f64 / keys.len() as f64;
        let expected = 1.0 / 16.0;
        assert!((frac - expected).abs() <= 0.2 * expected, "remapped {frac}");
    }
}

#[test]
fn load_skew_bounded() {
    let ids: Vec<u32> = (0..16).collect();
    let ring = HashRing::new(&ids, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut load = [0usize; 16];
    for _ in 0..100_000 {
        load[ring.lookup(rng.random()).unwrap() as usize] += 1;
    }
    let mean = 100_000.0 / 16.0;
    let max = *load.iter().max().unwrap() as f64;
    assert!(max / mean <= 1.35, "max/mean {}", max / mean);
}

#[test]
fn quota_error_leaves_pool_unchanged() {
    let mut pool = MemoryPool::uniform(unit_config(), 2, DRAM, SSD, PlaneSpec::ub());
    pool.create_namespace(NamespaceSpec { id: 3, quota: 10 }).unwrap();
    pool.put(3, 1, Payload::Synthetic(8)).unwrap();
    let before = pool.snapshot();
    let err = pool.put(3, 2, Payload::Synthetic(3)).unwrap_err();
    assert!(matches!(err, Error::QuotaExceeded { .. }));
    assert_eq!(pool.snapshot(), before);
    assert_eq!(pool.namespace_usage(3).unwrap(), 8);
    assert!(matches!(pool.put(9, 1, Payload::Synthetic(1)), Err(Error::UnknownNamespace(9))));
    assert!(matches!(pool.get(9, 1), Err(Error::UnknownNamespace(9))));
}

#[test]
fn fail_recover_returns_exact_bytes_from_ssd() {
    let mut pool = MemoryPool::uniform(PoolConfig::default(), 4, 1 << 30, 1 << 34, PlaneSpec::ub());
    pool.create_namespace(NamespaceSpec { id: 1, quota: 1 << 34 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let payloads: Vec<Vec<u8>> = (0..64).map(|i| (0..(100 + i * 37)).map(|_| rng.random()).collect()).collect();
    for (k, p) in payloads.iter().enumerate() {
        pool.put(1, k as u64, Payload::Bytes(p.clone())).unwrap();
    }
    for id in pool.server_ids() {
        pool.fail_server(id).unwrap();
    }
    assert_eq!(pool.get(1, 0).unwrap(), GetOutcome::Miss);
    for id in pool.server_ids() {
        pool.recover_server(id).unwrap();
    }
    for (k, p) in payloads.iter().enumerate() {
        match pool.get(1, k as u64).unwrap() {
            GetOutcome::Hit { payload, tier, .. } => {
                assert_eq!(tier, Tier::Ssd);
                assert_eq!(payload, Payload::Bytes(p.clone()));
            }
            GetOutcome::Miss => panic!("key {k} lost across failure"),
        }
    }
    assert!(matches!(pool.fail_server(99), Err(Error::UnknownServer(99))));
}

#[test]
fn failed_server_error_mode() {
    let cfg = PoolConfig {
        fail_mode: FailMode::Error,
        ..unit_config()
    };
    let mut pool = MemoryPool::uniform(cfg, 1, DRAM, SSD, PlaneSpec::ub());
    pool.create_namespace(NamespaceSpec { id: 1, quota: 100 }).unwrap();
    pool.fail_server(0).unwrap();
    assert!(matches!(pool.get(1, 4), Err(Error::ServerUnavailable(0))));
}

#[test]
fn failed_empty_server_is_noop() {
    let mut pool = single_server_pool();
    let before = pool.snapshot();
    pool.fail_server(0).unwrap();
    pool.recover_server(0).unwrap();
    assert_eq!(pool.snapshot(), before);
}

#[test]
fn ssd_eviction_after_recover_is_a_miss() {
    let mut pool = single_server_pool();
    pool.put(1, 1, Payload::Synthetic(60)).unwrap();
    pool.fail_server(0).unwrap();
    pool.recover_server(0).unwrap();
    let ack = pool.put(1, 2, Payload::Synthetic(60)).unwrap();
    assert_eq!(ack.evicted, vec![1]);
    assert_eq!(pool.get(1, 1).unwrap(), GetOutcome::Miss);
}

#[test]
fn ub_access_faster_than_vpc() {
    let size = 4 << 20;
    let mut lat = Vec::new();
    for plane in [PlaneSpec::ub(), PlaneSpec::vpc()] {
        let mut pool = MemoryPool::uniform(PoolConfig::default(), 2, 1 << 30, 1 << 32, plane);
        pool.create_namespace(NamespaceSpec { id: 1, quota: 1 << 32 }).unwrap();
        pool.put(1, 42, Payload::Synthetic(size)).unwrap();
        match pool.get(1, 42).unwrap() {
            GetOutcome::Hit { latency, .. } => lat.push(latency),
            GetOutcome::Miss => panic!("just written"),
        }
    }
    assert!(lat[0] < lat[1], "{lat:?}");
    assert!(PlaneSpec::ub().remote_access(size, Mechanism::Sdma).latency < lat[0]);
}

#[derive(Debug, Clone)]
enum Op {
    Put(u32, u64, u64),
    Get(u32, u64),
    Delete(u32, u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (1u32..3, 0u64..32, 1u64..20).prop_map(|(n, k, s)| Op::Put(n, k, s)),
        (1u32..3, 0u64..32).prop_map(|(n, k)| Op::Get(n, k)),
        (1u32..3, 0u64..32).prop_map(|(n, k)| Op::Delete(n, k)),
    ]
}

fn namespace_view(pool: &MemoryPool, ns: u32) -> (u64, Vec<Vec<u64>>) {
    let mut tiers = Vec::new();
    for s in pool.server_ids() {
        tiers.push(pool.tier_keys(s, Tier::Dram, ns).unwrap());
        tiers.push(pool.tier_keys(s, Tier::Ssd, ns).unwrap());
    }
    (pool.namespace_usage(ns).unwrap(), tiers)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn namespaces_are_isolated(ops in prop::collection::vec(op(), 1..200)) {
        let mut pool = MemoryPool::uniform(unit_config(), 3, DRAM, SSD, PlaneSpec::ub());
        for id in 1..=3 {
            pool.create_namespace(NamespaceSpec { id, quota: 120 }).unwrap();
        }
        for k in 0..8u64 {
            pool.put(3, k, Payload::Synthetic(5)).unwrap();
        }
        let watched = namespace_view(&pool, 3);
        for op in ops {
            match op {
                Op::Put(n, k, s) => { let _ = pool.put(n, k, Payload::Synthetic(s)); }
                Op::Get(n, k) => { pool.get(n, k).unwrap(); }
                Op::Delete(n, k) => { pool.delete(n, k).unwrap(); }
            }
            prop_assert_eq!(&namespace_view(&pool, 3), &watched);
        }
    }

    #[test]
    fn demotion_keeps_objects_readable(sizes in prop::collection::vec(1u64..30, 1..40)) {
        let mut pool = single_server_pool();
        let mut live: Vec<u64> = Vec::new();
        for (k, s) in sizes.into_iter().enumerate() {
            let ack = pool.put(1, k as u64, Payload::Synthetic(s)).unwrap();
            live.retain(|x| !ack.evicted.contains(x));
            live.push(k as u64);
            for &x in &live {
                prop_assert!(pool.residency(1, x).is_some());
            }
        }
    }
}
