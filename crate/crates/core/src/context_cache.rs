//! Paged KV-block reuse on top of the memory pool.
//!
//! Prompts are cut into fixed-size blocks. Each block key chains the hash of
//! everything before it, so two prompts share keys exactly as long as they
//! share tokens; the first divergent token changes every later key.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::hash::{combine, Fnv64};
use crate::mempool::{GetOutcome, MemoryPool, NamespaceId, Payload, Tier};
use crate::{Error, Result};

pub const MIN_BLOCK_SIZE: u32 = 128;
pub const MAX_BLOCK_SIZE: u32 = 512;
pub const DEFAULT_BLOCK_SIZE: u32 = 128;

/// Prefix hash of the first block.
const CHAIN_SEED: u64 = 0x6b76_2d63_6861_696e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockKey {
    pub prefix_hash: u64,
    pub block_hash: u64,
    /// Pool key: `combine(prefix_hash, block_hash)`.
    pub combined: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvBlock {
    pub key: BlockKey,
    pub num_tokens: u32,
    pub size: u64,
}

fn check_block_size(block_size: u32) -> Result<()> {
    if !(MIN_BLOCK_SIZE..=MAX_BLOCK_SIZE).contains(&block_size) {
        return Err(Error::invalid(format!(
            "block_size {block_size} outside [{MIN_BLOCK_SIZE}, {MAX_BLOCK_SIZE}]"
        )));
    }
    Ok(())
}

/// Hash of one block's tokens. The length is included so a partial block
/// never matches a full block that merely starts with it.
pub fn block_hash(tokens: &[u64]) -> u64 {
    let mut h = Fnv64::default();
    h.write_u64(tokens.len() as u64);
    for &t in tokens {
        h.write_u64(t);
    }
    h.finish()
}

pub fn split_into_blocks(token_hashes: &[u64], block_size: u32) -> Result<Vec<BlockKey>> {
    check_block_size(block_size)?;
    if token_hashes.is_empty() {
        return Err(Error::invalid("token list is empty"));
    }
    let mut prefix = CHAIN_SEED;
    Ok(token_hashes
        .chunks(block_size as usize)
        .map(|chunk| {
            let block = block_hash(chunk);
            let combined = combine(prefix, block);
            let key = BlockKey {
                prefix_hash: prefix,
                block_hash: block,
                combined,
            };
            prefix = combined;
            key
        })
        .collect())
}

/// Blocks with sizes, for storing.
pub fn split_into_kv_blocks(token_hashes: &[u64], block_size: u32, kv_bytes_per_token: u64) -> Result<Vec<KvBlock>> {
    let keys = split_into_blocks(token_hashes, block_size)?;
    let n = token_hashes.len();
    Ok(keys
        .into_iter()
        .enumerate()
        .map(|(i, key)| {
            let start = i * block_size as usize;
            let num_tokens = (n - start).min(block_size as usize) as u32;
            KvBlock {
                key,
                num_tokens,
                size: num_tokens as u64 * kv_bytes_per_token,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreReport {
    pub stored: usize,
    pub deduplicated: usize,
    /// Blocks not stored because the pool refused them.
    pub not_stored: usize,
    /// The error that stopped the store, if any.
    pub error: Option<Error>,
}

impl StoreReport {
    pub fn is_partial(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FetchReport {
    pub blocks: usize,
    pub tokens: u64,
    pub bytes_from_dram: u64,
    pub bytes_from_ssd: u64,
    /// Sum of per-block access latencies, microseconds.
    pub latency: f64,
}

/// Block index for one pool namespace.
#[derive(Debug, Clone)]
pub struct ContextCache {
    namespace: NamespaceId,
    block_size: u32,
    kv_bytes_per_token: u64,
    index: HashSet<u64>,
}

impl ContextCache {
    pub fn new(namespace: NamespaceId, block_size: u32, kv_bytes_per_token: u64) -> Result<Self> {
        check_block_size(block_size)?;
        if kv_bytes_per_token == 0 {
            return Err(Error::invalid("kv_bytes_per_token must be positive"));
        }
        Ok(ContextCache {
            namespace,
            block_size,
            kv_bytes_per_token,
            index: HashSet::new(),
        })
    }

    pub fn namespace(&self) -> NamespaceId {
        self.namespace
    }

    pub fn block_size(&self) -> u32 {
        self.block_size
    }

    pub fn kv_bytes_per_token(&self) -> u64 {
        self.kv_bytes_per_token
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, key: &BlockKey) -> bool {
        self.index.contains(&key.combined)
    }

    pub fn blocks_for(&self, token_hashes: &[u64]) -> Result<Vec<KvBlock>> {
        split_into_kv_blocks(token_hashes, self.block_size, self.kv_bytes_per_token)
    }

    /// Length of the longest indexed prefix of `keys`.
    pub fn lookup_prefix(&self, keys: &[BlockKey]) -> usize {
        keys.iter().take_while(|k| self.index.contains(&k.combined)).count()
    }

    /// Puts blocks not already indexed. Stops at the first pool error and
    /// reports how far it got.
    pub fn store_blocks(&mut self, pool: &mut MemoryPool, blocks: &[KvBlock]) -> StoreReport {
        let mut report = StoreReport {
            stored: 0,
            deduplicated: 0,
            not_stored: 0,
            error: None,
        };
        for (i, b) in blocks.iter().enumerate() {
            if self.index.contains(&b.key.combined) {
                report.deduplicated += 1;
                continue;
            }
            match pool.put(self.namespace, b.key.combined, Payload::Synthetic(b.size)) {
                Ok(ack) => {
                    for k in &ack.evicted {
                        self.index.remove(k);
                    }
                    self.index.insert(b.key.combined);
                    report.stored += 1;
                }
                Err(e) => {
                    report.not_stored = blocks[i..]
                        .iter()
                        .filter(|b| !self.index.contains(&b.key.combined))
                        .count();
                    report.error = Some(e);
                    break;
                }
            }
        }
        report
    }

    /// Reads the reusable prefix from the pool. A pool miss ends the prefix
    /// and drops the stale index entry.
    pub fn fetch_prefix(&mut self, pool: &mut MemoryPool, blocks: &[KvBlock]) -> Result<FetchReport> {
        let mut report = FetchReport::default();
        for b in blocks {
            if !self.index.contains(&b.key.combined) {
                break;
            }
            match pool.get(self.namespace, b.key.combined)? {
                GetOutcome::Hit { tier, latency, .. } => {
                    report.blocks += 1;
                    report.tokens += b.num_tokens as u64;
                    match tier {
                        Tier::Dram => report.bytes_from_dram += b.size,
                        Tier::Ssd => report.bytes_from_ssd += b.size,
                    }
                    report.latency += latency;
                }
                GetOutcome::Miss => {
                    if pool.residency(self.namespace, b.key.combined).is_none() {
                        self.index.remove(&b.key.combined);
                    }
                    break;
                }
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Reasoning,
    NonReasoning,
}

/// Which part of a decode output a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeBlockKind {
    Reasoning,
    FinalResponse,
}

/// Whether a decode-generated block is worth storing. Reasoning traces are
/// rarely reused verbatim; final responses are, when approximate reuse is on.
pub fn decode_storage_policy(model: ModelKind, approx_reuse: bool, block: DecodeBlockKind) -> bool {
    match model {
        ModelKind::NonReasoning => true,
        ModelKind::Reasoning => approx_reuse && block == DecodeBlockKind::FinalResponse,
    }
}
