//! Disaggregated memory pool: consistent-hash placement over pool servers,
//! each with a DRAM tier caching an SSD tier.
//!
//! Every object lives in its owner's SSD tier (the persistent copy); the
//! DRAM tier holds a subset of those objects as hot copies. Both tiers run
//! LRU, with victims chosen only among objects of the namespace doing the
//! write, so one tenant never evicts another. Removing an object from SSD
//! removes it from the pool entirely.
//!
//! Capacity is byte-accounted with sizes rounded up to `alloc_unit`.
//! Namespace quotas count logical object bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::hash::{combine, mix64};
use crate::interconnect::{Mechanism, PlaneSpec};
use crate::{Error, Result};

pub type ServerId = u32;
pub type NamespaceId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId {
    pub namespace: NamespaceId,
    pub key: u64,
}

/// Consistent-hash ring with virtual nodes.
#[derive(Debug, Clone)]
pub struct HashRing {
    vnodes_per_server: u32,
    ring: BTreeMap<u64, ServerId>,
    servers: BTreeSet<ServerId>,
}

impl HashRing {
    pub fn new(servers: &[ServerId], vnodes_per_server: u32) -> Self {
        let mut ring = HashRing {
            vnodes_per_server: vnodes_per_server.max(1),
            ring: BTreeMap::new(),
            servers: BTreeSet::new(),
        };
        for &s in servers {
            ring.add_server(s);
        }
        ring
    }

    pub fn vnodes_per_server(&self) -> u32 {
        self.vnodes_per_server
    }

    pub fn servers(&self) -> impl Iterator<Item = ServerId> + '_ {
        self.servers.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.servers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.servers.is_empty()
    }

    pub fn add_server(&mut self, server: ServerId) {
        if !self.servers.insert(server) {
            return;
        }
        for v in 0..self.vnodes_per_server {
            let mut point = mix64(combine(server as u64, v as u64));
            // Linear re-hash on the (astronomically rare) collision keeps points unique.
            while self.ring.contains_key(&point) {
                point = mix64(point);
            }
            self.ring.insert(point, server);
        }
    }

    pub fn remove_server(&mut self, server: ServerId) -> bool {
        if !self.servers.remove(&server) {
            return false;
        }
        self.ring.retain(|_, s| *s != server);
        true
    }

    pub fn points_of(&self, server: ServerId) -> usize {
        self.ring.values().filter(|&&s| s == server).count()
    }

    /// Owner of the first ring point clockwise from the key's hash.
    pub fn lookup(&self, key: u64) -> Result<ServerId> {
        let h = mix64(key);
        self.ring
            .range(h..)
            .next()
            .or_else(|| self.ring.iter().next())
            .map(|(_, &s)| s)
            .ok_or(Error::EmptyRing)
    }
}

/// Object contents: either a size only, or real bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Synthetic(u64),
    Bytes(Vec<u8>),
}

impl Payload {
    pub fn len(&self) -> u64 {
        match self {
            Payload::Synthetic(n) => *n,
            Payload::Bytes(b) => b.len() as u64,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolObject {
    pub namespace: NamespaceId,
    pub key: u64,
    pub size: u64,
    pub payload: Payload,
    /// Microseconds of simulated time.
    pub last_access: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamespaceSpec {
    pub id: NamespaceId,
    pub quota: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Dram,
    Ssd,
}

/// What a `get` against a failed server returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailMode {
    Miss,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub vnodes_per_server: u32,
    /// Capacity accounting granularity in bytes.
    pub alloc_unit: u64,
    /// Fixed service latency of a DRAM-tier read, microseconds.
    pub dram_access_us: f64,
    /// Fixed service latency of an SSD-tier read, microseconds.
    pub ssd_access_us: f64,
    /// Per-server SSD (EVS) read bandwidth, GB/s.
    pub ssd_bandwidth: f64,
    /// Per-server DRAM service bandwidth for bulk reads, GB/s.
    pub dram_bandwidth: f64,
    pub fail_mode: FailMode,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            vnodes_per_server: 128,
            alloc_unit: 2 << 20,
            dram_access_us: 1.0,
            ssd_access_us: 80.0,
            ssd_bandwidth: 50.0,
            dram_bandwidth: 100.0,
            fail_mode: FailMode::Miss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerSpec {
    pub id: ServerId,
    pub dram_capacity: u64,
    pub ssd_capacity: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ServerStats {
    pub dram_hits: u64,
    pub ssd_hits: u64,
    pub misses: u64,
    pub dram_demotions: u64,
    pub ssd_evictions: u64,
}

#[derive(Debug, Clone, Copy)]
struct TierEntry {
    charged: u64,
    stamp: u64,
}

/// One LRU tier. Recency order is kept per namespace.
#[derive(Debug, Clone)]
struct LruTier {
    capacity: u64,
    used: u64,
    entries: HashMap<ObjectId, TierEntry>,
    order: HashMap<NamespaceId, BTreeMap<u64, u64>>,
}

impl LruTier {
    fn new(capacity: u64) -> Self {
        LruTier {
            capacity,
            used: 0,
            entries: HashMap::new(),
            order: HashMap::new(),
        }
    }

    fn contains(&self, id: &ObjectId) -> bool {
        self.entries.contains_key(id)
    }

    fn charged(&self, id: &ObjectId) -> u64 {
        self.entries.get(id).map_or(0, |e| e.charged)
    }

    fn insert(&mut self, id: ObjectId, charged: u64, stamp: u64) {
        self.remove(&id);
        self.entries.insert(id, TierEntry { charged, stamp });
        self.order.entry(id.namespace).or_default().insert(stamp, id.key);
        self.used += charged;
    }

    fn remove(&mut self, id: &ObjectId) -> bool {
        match self.entries.remove(id) {
            Some(e) => {
                if let Some(o) = self.order.get_mut(&id.namespace) {
                    o.remove(&e.stamp);
                }
                self.used -= e.charged;
                true
            }
            None => false,
        }
    }

    fn touch(&mut self, id: &ObjectId, stamp: u64) {
        if let Some(e) = self.entries.get_mut(id) {
            let o = self.order.entry(id.namespace).or_default();
            o.remove(&e.stamp);
            o.insert(stamp, id.key);
            e.stamp = stamp;
        }
    }

    /// Least-recent-first victims in `ns` (skipping `keep`) whose removal
    /// brings usage to at most `capacity - incoming`, or `None` if the
    /// namespace cannot free enough.
    fn plan_victims(&self, ns: NamespaceId, keep: &ObjectId, incoming: u64) -> Option<Vec<ObjectId>> {
        if incoming > self.capacity {
            return None;
        }
        let mut used = self.used - self.charged(keep);
        let mut victims = Vec::new();
        if used + incoming <= self.capacity {
            return Some(victims);
        }
        for (_, &key) in self.order.get(&ns).into_iter().flatten() {
            let id = ObjectId { namespace: ns, key };
            if id == *keep {
                continue;
            }
            used -= self.entries[&id].charged;
            victims.push(id);
            if used + incoming <= self.capacity {
                return Some(victims);
            }
        }
        None
    }

    /// Keys of `ns` in LRU order, oldest first.
    fn keys_lru(&self, ns: NamespaceId) -> Vec<u64> {
        self.order
            .get(&ns)
            .map(|o| o.values().copied().collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
struct PoolServer {
    spec: ServerSpec,
    dram: LruTier,
    ssd: LruTier,
    failed: bool,
    stats: ServerStats,
}

#[derive(Debug, Clone, Copy)]
struct NamespaceState {
    quota: u64,
    used: u64,
}

#[derive(Debug, Clone)]
struct StoredObject {
    payload: Payload,
    last_access: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PutAck {
    pub server: ServerId,
    pub dram_resident: bool,
    /// Keys whose DRAM copy was dropped to make room.
    pub demoted: Vec<u64>,
    /// Keys removed from the pool to make room on SSD.
    pub evicted: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GetOutcome {
    Hit {
        payload: Payload,
        tier: Tier,
        server: ServerId,
        /// Tier service time plus transfer over the access plane, microseconds.
        latency: f64,
    },
    Miss,
}

impl GetOutcome {
    pub fn is_hit(&self) -> bool {
        matches!(self, GetOutcome::Hit { .. })
    }
}

/// Per-server snapshot for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ServerSnapshot {
    pub id: ServerId,
    pub failed: bool,
    pub dram_used: u64,
    pub dram_capacity: u64,
    pub ssd_used: u64,
    pub ssd_capacity: u64,
    pub stats: ServerStats,
}

#[derive(Debug, Clone)]
pub struct MemoryPool {
    config: PoolConfig,
    access_plane: PlaneSpec,
    ring: HashRing,
    servers: BTreeMap<ServerId, PoolServer>,
    namespaces: BTreeMap<NamespaceId, NamespaceState>,
    objects: HashMap<ObjectId, StoredObject>,
    stamp: u64,
    now: u64,
}

impl MemoryPool {
    pub fn new(config: PoolConfig, servers: &[ServerSpec], access_plane: PlaneSpec) -> Self {
        let ids: Vec<ServerId> = servers.iter().map(|s| s.id).collect();
        let ring = HashRing::new(&ids, config.vnodes_per_server);
        let servers = servers
            .iter()
            .map(|&spec| {
                (
                    spec.id,
                    PoolServer {
                        spec,
                        dram: LruTier::new(spec.dram_capacity),
                        ssd: LruTier::new(spec.ssd_capacity),
                        failed: false,
                        stats: ServerStats::default(),
                    },
                )
            })
            .collect();
        MemoryPool {
            config,
            access_plane,
            ring,
            servers,
            namespaces: BTreeMap::new(),
            objects: HashMap::new(),
            stamp: 0,
            now: 0,
        }
    }

    /// `count` identical servers with ids `0..count`.
    pub fn uniform(config: PoolConfig, count: u32, dram: u64, ssd: u64, access_plane: PlaneSpec) -> Self {
        let specs: Vec<ServerSpec> = (0..count)
            .map(|id| ServerSpec {
                id,
                dram_capacity: dram,
                ssd_capacity: ssd,
            })
            .collect();
        Self::new(config, &specs, access_plane)
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn access_plane(&self) -> &PlaneSpec {
        &self.access_plane
    }

    pub fn set_access_plane(&mut self, plane: PlaneSpec) {
        self.access_plane = plane;
    }

    pub fn ring(&self) -> &HashRing {
        &self.ring
    }

    /// Advances the simulated clock used for `last_access`.
    pub fn set_time(&mut self, now_us: u64) {
        self.now = self.now.max(now_us);
    }

    pub fn create_namespace(&mut self, spec: NamespaceSpec) -> Result<()> {
        if spec.quota == 0 {
            return Err(Error::invalid("namespace quota must be positive"));
        }
        if self.namespaces.contains_key(&spec.id) {
            return Err(Error::invalid(format!("namespace {} already exists", spec.id)));
        }
        self.namespaces.insert(spec.id, NamespaceState { quota: spec.quota, used: 0 });
        Ok(())
    }

    pub fn namespace_usage(&self, ns: NamespaceId) -> Result<u64> {
        self.namespaces
            .get(&ns)
            .map(|s| s.used)
            .ok_or(Error::UnknownNamespace(ns))
    }

    pub fn namespace_remaining(&self, ns: NamespaceId) -> Result<u64> {
        self.namespaces
            .get(&ns)
            .map(|s| s.quota - s.used)
            .ok_or(Error::UnknownNamespace(ns))
    }

    fn charge(&self, size: u64) -> u64 {
        let unit = self.config.alloc_unit.max(1);
        size.div_ceil(unit) * unit
    }

    fn next_stamp(&mut self) -> u64 {
        self.stamp += 1;
        self.stamp
    }

    pub fn owner(&self, key: u64) -> Result<ServerId> {
        self.ring.lookup(key)
    }

    /// Writes to the owner's SSD tier and places a hot copy in DRAM.
    pub fn put(&mut self, ns: NamespaceId, key: u64, payload: Payload) -> Result<PutAck> {
        let ns_state = *self.namespaces.get(&ns).ok_or(Error::UnknownNamespace(ns))?;
        let size = payload.len();
        if size == 0 {
            return Err(Error::invalid("object size must be positive"));
        }
        let id = ObjectId { namespace: ns, key };
        let server_id = self.ring.lookup(key)?;
        let charged = self.charge(size);

        let old_size = self.objects.get(&id).map_or(0, |o| o.payload.len());
        let remaining = ns_state.quota - (ns_state.used - old_size);
        if size > remaining {
            return Err(Error::QuotaExceeded {
                namespace: ns,
                needed: size,
                remaining,
            });
        }

        let server = &self.servers[&server_id];
        if server.failed {
            return Err(Error::ServerUnavailable(server_id));
        }
        if charged > server.spec.ssd_capacity {
            return Err(Error::ObjectTooLarge {
                size: charged,
                capacity: server.spec.ssd_capacity,
            });
        }
        let ssd_victims = server
            .ssd
            .plan_victims(ns, &id, charged)
            .ok_or(Error::CapacityExhausted {
                server: server_id,
                namespace: ns,
            })?;

        // Commit.
        let stamp = self.next_stamp();
        let now = self.now;
        let mut evicted = Vec::with_capacity(ssd_victims.len());
        let mut freed = 0u64;
        {
            let server = self.servers.get_mut(&server_id).expect("ring owner exists");
            for v in &ssd_victims {
                server.ssd.remove(v);
                server.dram.remove(v);
                server.stats.ssd_evictions += 1;
                evicted.push(v.key);
            }
            server.dram.remove(&id);
            server.ssd.insert(id, charged, stamp);
        }
        for v in &ssd_victims {
            if let Some(o) = self.objects.remove(v) {
                freed += o.payload.len();
            }
        }
        self.objects.insert(
            id,
            StoredObject {
                payload,
                last_access: now,
            },
        );
        let st = self.namespaces.get_mut(&ns).expect("checked above");
        st.used = st.used - old_size - freed + size;

        let (dram_resident, demoted) = self.admit_dram(server_id, id, charged, stamp);
        Ok(PutAck {
            server: server_id,
            dram_resident,
            demoted,
            evicted,
        })
    }

    /// Places `id` in the server's DRAM tier, demoting LRU objects of the
    /// same namespace. Returns whether it became resident.
    fn admit_dram(&mut self, server_id: ServerId, id: ObjectId, charged: u64, stamp: u64) -> (bool, Vec<u64>) {
        let server = self.servers.get_mut(&server_id).expect("server exists");
        match server.dram.plan_victims(id.namespace, &id, charged) {
            Some(victims) => {
                let mut demoted = Vec::with_capacity(victims.len());
                for v in victims {
                    server.dram.remove(&v);
                    server.stats.dram_demotions += 1;
                    demoted.push(v.key);
                }
                server.dram.insert(id, charged, stamp);
                (true, demoted)
            }
            None => (false, Vec::new()),
        }
    }

    pub fn get(&mut self, ns: NamespaceId, key: u64) -> Result<GetOutcome> {
        if !self.namespaces.contains_key(&ns) {
            return Err(Error::UnknownNamespace(ns));
        }
        let id = ObjectId { namespace: ns, key };
        let server_id = self.ring.lookup(key)?;
        let fail_mode = self.config.fail_mode;
        {
            let server = self.servers.get_mut(&server_id).expect("ring owner exists");
            if server.failed {
                server.stats.misses += 1;
                return match fail_mode {
                    FailMode::Miss => Ok(GetOutcome::Miss),
                    FailMode::Error => Err(Error::ServerUnavailable(server_id)),
                };
            }
            if !server.ssd.contains(&id) {
                server.stats.misses += 1;
                return Ok(GetOutcome::Miss);
            }
        }
        let stamp = self.next_stamp();
        let size = self.objects[&id].payload.len();
        let charged = self.charge(size);
        let remote = self.access_plane.remote_access(size, Mechanism::Sdma).latency;
        let server = self.servers.get_mut(&server_id).expect("ring owner exists");
        let tier = if server.dram.contains(&id) {
            server.dram.touch(&id, stamp);
            server.ssd.touch(&id, stamp);
            server.stats.dram_hits += 1;
            Tier::Dram
        } else {
            server.ssd.touch(&id, stamp);
            server.stats.ssd_hits += 1;
            self.admit_dram(server_id, id, charged, stamp);
            Tier::Ssd
        };
        let service = match tier {
            Tier::Dram => self.config.dram_access_us,
            Tier::Ssd => self.config.ssd_access_us + size as f64 / (self.config.ssd_bandwidth * 1e3),
        };
        let now = self.now;
        let obj = self.objects.get_mut(&id).expect("present in ssd");
        obj.last_access = now;
        Ok(GetOutcome::Hit {
            payload: obj.payload.clone(),
            tier,
            server: server_id,
            latency: service + remote,
        })
    }

    /// Removes an object from both tiers. Returns whether it existed.
    pub fn delete(&mut self, ns: NamespaceId, key: u64) -> Result<bool> {
        if !self.namespaces.contains_key(&ns) {
            return Err(Error::UnknownNamespace(ns));
        }
        let id = ObjectId { namespace: ns, key };
        let Some(obj) = self.objects.remove(&id) else {
            return Ok(false);
        };
        let server_id = self.ring.lookup(key)?;
        let server = self.servers.get_mut(&server_id).expect("ring owner exists");
        server.dram.remove(&id);
        server.ssd.remove(&id);
        self.namespaces.get_mut(&ns).expect("checked").used -= obj.payload.len();
        Ok(true)
    }

    /// Where the object currently resides, without touching recency.
    pub fn residency(&self, ns: NamespaceId, key: u64) -> Option<Tier> {
        let id = ObjectId { namespace: ns, key };
        let server = self.servers.get(&self.ring.lookup(key).ok()?)?;
        if server.dram.contains(&id) {
            Some(Tier::Dram)
        } else if server.ssd.contains(&id) {
            Some(Tier::Ssd)
        } else {
            None
        }
    }

    pub fn object(&self, ns: NamespaceId, key: u64) -> Option<PoolObject> {
        let id = ObjectId { namespace: ns, key };
        self.objects.get(&id).map(|o| PoolObject {
            namespace: ns,
            key,
            size: o.payload.len(),
            payload: o.payload.clone(),
            last_access: o.last_access,
        })
    }

    /// Drops the server's DRAM tier; SSD contents survive.
    pub fn fail_server(&mut self, id: ServerId) -> Result<()> {
        let server = self.servers.get_mut(&id).ok_or(Error::UnknownServer(id))?;
        server.dram = LruTier::new(server.spec.dram_capacity);
        server.failed = true;
        Ok(())
    }

    pub fn recover_server(&mut self, id: ServerId) -> Result<()> {
        let server = self.servers.get_mut(&id).ok_or(Error::UnknownServer(id))?;
        server.failed = false;
        Ok(())
    }

    /// Keys of `ns` in a server tier, least recently used first.
    pub fn tier_keys(&self, server: ServerId, tier: Tier, ns: NamespaceId) -> Result<Vec<u64>> {
        let s = self.servers.get(&server).ok_or(Error::UnknownServer(server))?;
        Ok(match tier {
            Tier::Dram => s.dram.keys_lru(ns),
            Tier::Ssd => s.ssd.keys_lru(ns),
        })
    }

    pub fn server_ids(&self) -> Vec<ServerId> {
        self.servers.keys().copied().collect()
    }

    pub fn snapshot(&self) -> Vec<ServerSnapshot> {
        self.servers
            .values()
            .map(|s| ServerSnapshot {
                id: s.spec.id,
                failed: s.failed,
                dram_used: s.dram.used,
                dram_capacity: s.dram.capacity,
                ssd_used: s.ssd.used,
                ssd_capacity: s.ssd.capacity,
                stats: s.stats,
            })
            .collect()
    }

    pub fn total_stats(&self) -> ServerStats {
        self.servers.values().fold(ServerStats::default(), |mut acc, s| {
            acc.dram_hits += s.stats.dram_hits;
            acc.ssd_hits += s.stats.ssd_hits;
            acc.misses += s.stats.misses;
            acc.dram_demotions += s.stats.dram_demotions;
            acc.ssd_evictions += s.stats.ssd_evictions;
            acc
        })
    }
}
