//! Shared-memory pool of pre-sized chunks recycled between producers and
//! consumers, with batching of small tensors into one chunk.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KB: u64 = 1024;
/// Requests at or below this size may be batched.
pub const SMALL_THRESHOLD: u64 = 4 * KB;
pub const BATCH_ALIGN: u64 = 64;
const GRANULE: u64 = 4 * KB;
const POW2_FROM: u64 = 64 * KB;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("distinct chunk classes need {needed} bytes but capacity is {capacity}")]
    CapacityExceeded { needed: u64, capacity: u64 },
    #[error("out of shared memory: {request} bytes requested, {available} unreserved")]
    OutOfSharedMemory { request: u64, available: u64 },
    #[error("chunk {0} is not in use")]
    DoubleFree(usize),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Chunk class for a request: 4 KB granularity up to 64 KB, powers of two
/// above.
pub fn round_size(bytes: u64) -> u64 {
    if bytes <= POW2_FROM {
        bytes.div_ceil(GRANULE).max(1) * GRANULE
    } else {
        bytes.next_power_of_two()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: usize,
    pub offset: u64,
    pub size: u64,
    pub in_use: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    #[serde(rename = "peak_bytes")]
    pub peak_bytes_reserved: u64,
    #[serde(rename = "live_at_peak")]
    pub live_bytes_at_peak: u64,
    pub reuse_hits: u64,
    #[serde(rename = "fresh_allocs")]
    pub fresh_allocations: u64,
    #[serde(rename = "batched")]
    pub batched_count: u64,
}

#[derive(Debug, Clone)]
pub struct MemoryPool {
    pub capacity: u64,
    chunks: Vec<Chunk>,
    /// Free chunk ids per class size.
    free: BTreeMap<u64, BTreeSet<usize>>,
    reserved: u64,
    live: u64,
    pub stats: PoolStats,
}

impl MemoryPool {
    pub fn empty(capacity: u64) -> Self {
        MemoryPool { capacity, chunks: Vec::new(), free: BTreeMap::new(), reserved: 0, live: 0, stats: PoolStats::default() }
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.reserved
    }

    pub fn live_bytes(&self) -> u64 {
        self.live
    }

    pub fn free_bytes(&self) -> u64 {
        self.free.iter().map(|(size, ids)| size * ids.len() as u64).sum()
    }

    /// Free chunk count per class size.
    pub fn classes(&self) -> BTreeMap<u64, usize> {
        self.free.iter().map(|(s, ids)| (*s, ids.len())).collect()
    }

    /// Address ranges of chunks currently in use.
    pub fn live_ranges(&self) -> Vec<(u64, u64)> {
        self.chunks.iter().filter(|c| c.in_use).map(|c| (c.offset, c.offset + c.size)).collect()
    }

    fn carve(&mut self, size: u64) -> Result<usize, PoolError> {
        if self.reserved + size > self.capacity {
            return Err(PoolError::OutOfSharedMemory { request: size, available: self.capacity - self.reserved });
        }
        let id = self.chunks.len();
        self.chunks.push(Chunk { id, offset: self.reserved, size, in_use: false });
        self.reserved += size;
        self.stats.peak_bytes_reserved = self.stats.peak_bytes_reserved.max(self.reserved);
        Ok(id)
    }

    fn take(&mut self, id: usize) {
        let c = &mut self.chunks[id];
        c.in_use = true;
        self.live += c.size;
        self.stats.live_bytes_at_peak = self.stats.live_bytes_at_peak.max(self.live);
    }

    /// Smallest free chunk that holds `request`, otherwise a freshly carved
    /// one.
    pub fn allocate(&mut self, request: u64) -> Result<usize, PoolError> {
        if request == 0 {
            return Err(PoolError::InvalidRequest("zero-byte allocation".into()));
        }
        let hit = self.free.range_mut(request..).find(|(_, ids)| !ids.is_empty()).map(|(size, ids)| {
            let id = *ids.iter().next().unwrap();
            ids.remove(&id);
            (*size, id)
        });
        let id = match hit {
            Some((size, id)) => {
                if self.free.get(&size).is_some_and(BTreeSet::is_empty) {
                    self.free.remove(&size);
                }
                self.stats.reuse_hits += 1;
                id
            }
            None => {
                let id = self.carve(round_size(request))?;
                self.stats.fresh_allocations += 1;
                id
            }
        };
        self.take(id);
        Ok(id)
    }

    pub fn release(&mut self, id: usize) -> Result<(), PoolError> {
        match self.chunks.get_mut(id) {
            Some(c) if c.in_use => {
                c.in_use = false;
                self.live -= c.size;
                self.free.entry(c.size).or_default().insert(id);
                Ok(())
            }
            _ => Err(PoolError::DoubleFree(id)),
        }
    }

    /// Packs small requests contiguously into one chunk; returns the chunk
    /// and each request's offset within it.
    pub fn batch_allocate(&mut self, requests: &[u64]) -> Result<(usize, Vec<u64>), PoolError> {
        if requests.is_empty() {
            return Err(PoolError::InvalidRequest("empty batch".into()));
        }
        if let Some(r) = requests.iter().find(|&&r| r == 0 || r > SMALL_THRESHOLD) {
            return Err(PoolError::InvalidRequest(format!(
                "batched request of {r} bytes outside (0, {SMALL_THRESHOLD}]"
            )));
        }
        let mut offsets = Vec::with_capacity(requests.len());
        let mut end = 0u64;
        for &r in requests {
            let at = end.div_ceil(BATCH_ALIGN) * BATCH_ALIGN;
            offsets.push(at);
            end = at + r;
        }
        let id = self.allocate(end)?;
        self.stats.batched_count += requests.len() as u64;
        Ok((id, offsets))
    }
}

/// Pre-allocates one free chunk per distinct rounded layer size.
pub fn warm_pool(layer_sizes: &[u64], capacity: u64) -> Result<MemoryPool, PoolError> {
    let classes: BTreeSet<u64> = layer_sizes.iter().filter(|&&s| s > 0).map(|&s| round_size(s)).collect();
    let needed: u64 = classes.iter().sum();
    if needed > capacity {
        return Err(PoolError::CapacityExceeded { needed, capacity });
    }
    let mut pool = MemoryPool::empty(capacity);
    for size in classes {
        let id = pool.carve(size)?;
        pool.free.entry(size).or_default().insert(id);
    }
    Ok(pool)
}
