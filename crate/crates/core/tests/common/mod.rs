//! Brute-force oracles shared by the integration suites.
#![allow(dead_code)]

use pdc_sim::interconnect::PlaneSpec;
use pdc_sim::mempool::{GetOutcome, MemoryPool, NamespaceSpec, Payload, PoolConfig, Tier};
use pdc_sim::quantizer::RealMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_DRAM: u64 = 40;
pub const ORACLE_SSD: u64 = 100;

/// Byte-exact pool config for oracle replay.
pub fn unit_config() -> PoolConfig {
    PoolConfig {
        alloc_unit: 1,
        ..PoolConfig::default()
    }
}

pub fn single_server_pool() -> MemoryPool {
    let mut pool = MemoryPool::uniform(unit_config(), 1, ORACLE_DRAM, ORACLE_SSD, PlaneSpec::ub());
    pool.create_namespace(NamespaceSpec { id: 1, quota: u64::MAX / 2 }).unwrap();
    pool
}

/// Two-tier LRU kept as plain vectors, oldest first.
#[derive(Default)]
pub struct LruOracle {
    pub dram: Vec<(u64, u64)>,
    pub ssd: Vec<(u64, u64)>,
}

impl LruOracle {
    fn used(tier: &[(u64, u64)]) -> u64 {
        tier.iter().map(|e| e.1).sum()
    }

    fn drop_key(tier: &mut Vec<(u64, u64)>, key: u64) -> Option<(u64, u64)> {
        let i = tier.iter().position(|e| e.0 == key)?;
        Some(tier.remove(i))
    }

    fn admit(&mut self, key: u64, size: u64) {
        if size > ORACLE_DRAM {
            return;
        }
        while Self::used(&self.dram) + size > ORACLE_DRAM {
            self.dram.remove(0);
        }
        self.dram.push((key, size));
    }

    pub fn put(&mut self, key: u64, size: u64) -> bool {
        if size > ORACLE_SSD {
            return false;
        }
        let others: Vec<(u64, u64)> = self.ssd.iter().copied().filter(|e| e.0 != key).collect();
        let mut used = Self::used(&others);
        let mut victims = Vec::new();
        for e in &others {
            if used + size <= ORACLE_SSD {
                break;
            }
            used -= e.1;
            victims.push(e.0);
        }
        for v in victims {
            Self::drop_key(&mut self.ssd, v);
            Self::drop_key(&mut self.dram, v);
        }
        Self::drop_key(&mut self.ssd, key);
        Self::drop_key(&mut self.dram, key);
        self.ssd.push((key, size));
        self.admit(key, size);
        true
    }

    pub fn get(&mut self, key: u64) -> Option<Tier> {
        let e = Self::drop_key(&mut self.ssd, key)?;
        self.ssd.push(e);
        if let Some(d) = Self::drop_key(&mut self.dram, key) {
            self.dram.push(d);
            Some(Tier::Dram)
        } else {
            self.admit(key, e.1);
            Some(Tier::Ssd)
        }
    }

    pub fn delete(&mut self, key: u64) -> bool {
        let hit = Self::drop_key(&mut self.ssd, key).is_some();
        Self::drop_key(&mut self.dram, key);
        hit
    }

    pub fn keys(tier: &[(u64, u64)]) -> Vec<u64> {
        tier.iter().map(|e| e.0).collect()
    }
}

/// Replays `ops` random put/get/delete operations against the pool and the
/// oracle, comparing both tiers after every step.
pub fn replay_lru(seed: u64, ops: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = single_server_pool();
    let mut oracle = LruOracle::default();
    for step in 0..ops {
        let key = rng.random_range(0..48u64);
        let (got, want) = match rng.random_range(0..10) {
            0..=4 => {
                let size = rng.random_range(1..=24u64);
                (pool.put(1, key, Payload::Synthetic(size)).is_ok(), oracle.put(key, size))
            }
            5..=8 => {
                let tier = match pool.get(1, key).map_err(|e| e.to_string())? {
                    GetOutcome::Hit { tier, .. } => Some(tier),
                    GetOutcome::Miss => None,
                };
                let want = oracle.get(key);
                if tier != want {
                    return Err(format!("step {step}: get served {tier:?}, oracle {want:?}"));
                }
                (true, true)
            }
            _ => (pool.delete(1, key).map_err(|e| e.to_string())?, oracle.delete(key)),
        };
        if got != want {
            return Err(format!("step {step}: pool {got}, oracle {want}"));
        }
        let dram = pool.tier_keys(0, Tier::Dram, 1).map_err(|e| e.to_string())?;
        let ssd = pool.tier_keys(0, Tier::Ssd, 1).map_err(|e| e.to_string())?;
        if dram != LruOracle::keys(&oracle.dram) || ssd != LruOracle::keys(&oracle.ssd) {
            return Err(format!("step {step}: tier contents diverge"));
        }
    }
    Ok(())
}

/// Loss of the int8 product after per-input-channel smoothing by `s`,
/// quantized element by element in float.
pub fn scale_oracle_loss(w: &RealMatrix, x: &RealMatrix, s: &[f64]) -> f64 {
    let (out, inp, tok) = (w.rows, w.cols, x.cols);
    let ws: Vec<Vec<f64>> = (0..out).map(|i| (0..inp).map(|j| w.get(i, j) * s[j]).collect()).collect();
    let xs: Vec<Vec<f64>> = (0..inp).map(|j| (0..tok).map(|t| x.get(j, t) / s[j]).collect()).collect();
    let q = |v: f64, sc: f64| (v / sc).round().clamp(-127.0, 127.0) * sc;
    let scale = |m: f64| if m > 0.0 { m / 127.0 } else { 1.0 };
    let wsc: Vec<f64> = ws.iter().map(|r| scale(r.iter().fold(0.0f64, |a, v| a.max(v.abs())))).collect();
    let xsc: Vec<f64> = (0..tok)
        .map(|t| scale((0..inp).fold(0.0f64, |a, j| a.max(xs[j][t].abs()))))
        .collect();
    let mut err = 0.0;
    for i in 0..out {
        for t in 0..tok {
            let mut approx = 0.0;
            let mut exact = 0.0;
            for j in 0..inp {
                approx += q(ws[i][j], wsc[i]) * q(xs[j][t], xsc[t]);
                exact += w.get(i, j) * x.get(j, t);
            }
            err += (approx - exact).powi(2);
        }
    }
    err.sqrt()
}

/// Coordinate-wise grid search over input channels in order; a channel
/// moves only on strict improvement, ties go to the earlier grid point.
pub fn scale_search_oracle(w: &RealMatrix, x: &RealMatrix, grid: &[f64]) -> Vec<f64> {
    let mut s = vec![1.0; w.cols];
    let mut cur = scale_oracle_loss(w, x, &s);
    for j in 0..w.cols {
        let keep = s[j];
        let mut best: Option<(f64, f64)> = None;
        for &g in grid {
            s[j] = g;
            let l = scale_oracle_loss(w, x, &s);
            if best.is_none_or(|(bl, _)| l < bl) {
                best = Some((l, g));
            }
        }
        let (bl, bg) = best.unwrap();
        if bl < cur {
            s[j] = bg;
            cur = bl;
        } else {
            s[j] = keep;
        }
    }
    s
}

/// Exhaustive clip-ratio search; later grid points win ties.
pub fn clip_search_oracle(w: &RealMatrix, x: &RealMatrix, grid: &[f64]) -> f64 {
    let lo = w.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = w.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exact = w.matmul(x).unwrap();
    let mut best = (f64::INFINITY, 0.0);
    for &a in grid {
        let clipped = RealMatrix::from_fn(w.rows, w.cols, |i, j| w.get(i, j).clamp(a * lo, a * hi));
        let qw = RealMatrix::from_fn(w.rows, w.cols, |i, j| {
            let m = clipped.row(i).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let s = if m > 0.0 { m / 127.0 } else { 1.0 };
            (clipped.get(i, j) / s).round() * s
        });
        let l = qw.matmul(x).unwrap().distance(&exact);
        if l <= best.0 {
            best = (l, a);
        }
    }
    best.1
}

/// Block for the clip oracle: two rows with one inflated weight.
pub fn clip_case(seed: u64) -> (RealMatrix, RealMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = RealMatrix::random(2, 16, &mut rng);
    let c = rng.random_range(0..16);
    w.set(0, c, w.get(0, c) * 30.0);
    let x = RealMatrix::random(16, 4, &mut rng);
    (w, x)
}

pub fn scale_case(seed: u64) -> (RealMatrix, RealMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = RealMatrix::random(8, 8, &mut rng);
    let x = RealMatrix::random(8, 4, &mut rng);
    (w, x)
}
