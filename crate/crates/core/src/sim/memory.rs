//! Tensor placement over the shared-memory pool with DDR spill. The plan
//! builder records events through an `Arena`; the simulator replays them
//! through a fresh one.

use std::collections::BTreeMap;

use crate::graph::HardwareDescriptor;
use crate::mempool::{warm_pool, MemoryPool, PoolError, PoolStats};

use super::plan::{AllocEvent, AllocOp, MemoryLevel};
use super::SimError;

const DDR_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, Copy)]
struct Home {
    level: MemoryLevel,
    chunk: Option<usize>,
    address: u64,
    bytes: u64,
}

#[derive(Debug)]
pub struct Arena {
    pool: MemoryPool,
    homes: BTreeMap<String, Home>,
    /// Live tensors per shared chunk.
    refs: BTreeMap<usize, usize>,
    line: u64,
    ddr_cap: u64,
    ddr_cursor: u64,
    ddr_live: u64,
    pub peak_ddr: u64,
}

impl Arena {
    pub fn new(hw: &HardwareDescriptor, warm: &[u64]) -> Self {
        let pool = warm_pool(warm, hw.shared_bytes).unwrap_or_else(|_| MemoryPool::empty(hw.shared_bytes));
        Arena {
            pool,
            homes: BTreeMap::new(),
            refs: BTreeMap::new(),
            line: hw.cache_line_bytes.max(1),
            ddr_cap: hw.ddr_bytes,
            ddr_cursor: 0,
            ddr_live: 0,
            peak_ddr: 0,
        }
    }

    pub fn stats(&self) -> PoolStats {
        self.pool.stats
    }

    pub fn peak_shared(&self) -> u64 {
        self.pool.stats.peak_bytes_reserved
    }

    pub fn location(&self, tensor: &str) -> Option<(MemoryLevel, u64)> {
        self.homes.get(tensor).map(|h| (h.level, h.address))
    }

    fn spill(&mut self, tensor: &str, bytes: u64) -> Result<Home, SimError> {
        if self.ddr_live + bytes > self.ddr_cap {
            return Err(SimError::OutOfMemory(format!(
                "tensor {tensor} ({bytes} bytes) fits neither shared memory nor DDR"
            )));
        }
        let address = DDR_BASE + self.ddr_cursor;
        self.ddr_cursor += bytes.div_ceil(self.line) * self.line;
        self.ddr_live += bytes;
        self.peak_ddr = self.peak_ddr.max(self.ddr_live);
        Ok(Home { level: MemoryLevel::Ddr, chunk: None, address, bytes })
    }

    fn event(op: AllocOp, tensor: &str, h: &Home) -> AllocEvent {
        AllocEvent { op, tensor: tensor.to_string(), bytes: h.bytes, level: h.level, chunk: h.chunk, address: h.address }
    }

    pub fn place(&mut self, tensor: &str, bytes: u64) -> Result<AllocEvent, SimError> {
        let home = match self.pool.allocate(bytes.max(1)) {
            Ok(id) => {
                self.refs.insert(id, 1);
                let c = self.pool.chunks()[id];
                Home { level: MemoryLevel::Shared, chunk: Some(id), address: c.offset, bytes }
            }
            Err(PoolError::OutOfSharedMemory { .. }) => self.spill(tensor, bytes)?,
            Err(e) => return Err(SimError::OutOfMemory(e.to_string())),
        };
        self.homes.insert(tensor.to_string(), home);
        Ok(Self::event(AllocOp::Alloc, tensor, &home))
    }

    /// Packs small tensors into one chunk.
    pub fn place_batch(&mut self, tensors: &[(String, u64)]) -> Result<Vec<AllocEvent>, SimError> {
        let sizes: Vec<u64> = tensors.iter().map(|(_, b)| (*b).max(1)).collect();
        match self.pool.batch_allocate(&sizes) {
            Ok((id, offsets)) => {
                self.refs.insert(id, tensors.len());
                let base = self.pool.chunks()[id].offset;
                Ok(tensors
                    .iter()
                    .zip(offsets)
                    .map(|((t, b), off)| {
                        let h = Home { level: MemoryLevel::Shared, chunk: Some(id), address: base + off, bytes: *b };
                        self.homes.insert(t.clone(), h);
                        Self::event(AllocOp::Batch, t, &h)
                    })
                    .collect())
            }
            Err(PoolError::OutOfSharedMemory { .. }) => tensors.iter().map(|(t, b)| self.place(t, *b)).collect(),
            Err(e) => Err(SimError::OutOfMemory(e.to_string())),
        }
    }

    pub fn release(&mut self, tensor: &str) -> Result<AllocEvent, SimError> {
        let h = self
            .homes
            .remove(tensor)
            .ok_or_else(|| SimError::PlanValidation(format!("release of unplaced tensor {tensor}")))?;
        match h.chunk {
            Some(id) => {
                let r = self.refs.get_mut(&id).expect("chunk has live tensors");
                *r -= 1;
                if *r == 0 {
                    self.refs.remove(&id);
                    self.pool.release(id).map_err(|e| SimError::PlanValidation(e.to_string()))?;
                }
            }
            None => self.ddr_live -= h.bytes,
        }
        Ok(Self::event(AllocOp::Release, tensor, &h))
    }

    /// Replays recorded events, checking each reproduces identically.
    pub fn replay(&mut self, events: &[AllocEvent]) -> Result<(), SimError> {
        let mut i = 0;
        while i < events.len() {
            let e = &events[i];
            let got = match e.op {
                AllocOp::Alloc => vec![self.place(&e.tensor, e.bytes)?],
                AllocOp::Release => vec![self.release(&e.tensor)?],
                AllocOp::Batch => {
                    let n = events[i..].iter().take_while(|x| x.op == AllocOp::Batch && x.chunk == e.chunk).count();
                    let group: Vec<(String, u64)> = events[i..i + n].iter().map(|x| (x.tensor.clone(), x.bytes)).collect();
                    self.place_batch(&group)?
                }
            };
            if got.as_slice() != &events[i..i + got.len()] {
                return Err(SimError::PlanValidation(format!("allocation event for {} does not replay", e.tensor)));
            }
            i += got.len();
        }
        Ok(())
    }
}
