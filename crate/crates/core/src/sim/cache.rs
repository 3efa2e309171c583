//! Set-associative LRU cache model with line-granular accounting.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::graph::HardwareDescriptor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub line_bytes: u64,
    pub sets: usize,
    pub ways: usize,
}

impl CacheGeometry {
    pub fn of(hw: &HardwareDescriptor) -> Self {
        CacheGeometry { line_bytes: hw.cache_line_bytes, sets: hw.cache_sets, ways: hw.cache_ways }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.line_bytes * (self.sets * self.ways) as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub compulsory_misses: u64,
    pub capacity_conflict_misses: u64,
}

impl CacheCounters {
    pub fn misses(&self) -> u64 {
        self.compulsory_misses + self.capacity_conflict_misses
    }

    pub fn accesses(&self) -> u64 {
        self.hits + self.misses()
    }
}

#[derive(Debug, Clone)]
pub struct CacheState {
    pub geometry: CacheGeometry,
    /// Per set, resident line numbers from least to most recently used.
    sets: Vec<Vec<u64>>,
    touched: HashSet<u64>,
    pub counters: CacheCounters,
}

impl CacheState {
    pub fn new(geometry: CacheGeometry) -> Self {
        CacheState {
            geometry,
            sets: vec![Vec::with_capacity(geometry.ways); geometry.sets.max(1)],
            touched: HashSet::new(),
            counters: CacheCounters::default(),
        }
    }

    /// Touches the line holding byte `addr`; returns whether it hit.
    pub fn access(&mut self, addr: u64) -> bool {
        let line = addr / self.geometry.line_bytes;
        let set = &mut self.sets[(line % self.geometry.sets.max(1) as u64) as usize];
        if let Some(pos) = set.iter().position(|&l| l == line) {
            let l = set.remove(pos);
            set.push(l);
            self.counters.hits += 1;
            return true;
        }
        if set.len() >= self.geometry.ways {
            set.remove(0);
        }
        set.push(line);
        if self.touched.insert(line) {
            self.counters.compulsory_misses += 1;
        } else {
            self.counters.capacity_conflict_misses += 1;
        }
        false
    }

    /// Drops every resident line and the first-touch history.
    pub fn flush(&mut self) {
        for s in &mut self.sets {
            s.clear();
        }
        self.touched.clear();
    }
}

/// Replays byte addresses through a cold cache.
pub fn simulate_cache_trace(accesses: impl IntoIterator<Item = u64>, geometry: CacheGeometry) -> CacheState {
    let mut c = CacheState::new(geometry);
    for a in accesses {
        c.access(a);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    const G: CacheGeometry = CacheGeometry { line_bytes: 64, sets: 256, ways: 4 };

    #[test]
    fn sequential_floats() {
        let c = simulate_cache_trace((0..64u64).map(|i| i * 4), G);
        assert_eq!(c.counters.misses(), 4);
        assert_eq!(c.counters.hits, 60);
    }

    #[test]
    fn empty_trace() {
        let c = simulate_cache_trace(std::iter::empty(), G);
        assert_eq!(c.counters, CacheCounters::default());
    }

    #[test]
    fn channel_first_over_row_major() {
        // 4 channels of 4×4 floats, read channel-innermost per pixel.
        let trace: Vec<u64> = (0..16u64).flat_map(|p| (0..4u64).map(move |c| (c * 16 + p) * 4)).collect();
        let tiny = CacheGeometry { line_bytes: 64, sets: 1, ways: 1 };
        let c = simulate_cache_trace(trace.iter().copied(), tiny);
        assert_eq!(c.counters.misses(), 64);
        assert_eq!(c.counters.compulsory_misses, 4);
        let big = simulate_cache_trace(trace, G);
        assert_eq!(big.counters.misses(), 4);
    }

    #[test]
    fn lru_eviction_is_capacity_conflict() {
        let g = CacheGeometry { line_bytes: 64, sets: 1, ways: 2 };
        let c = simulate_cache_trace([0, 64, 128, 0], g);
        assert_eq!(c.counters.compulsory_misses, 3);
        assert_eq!(c.counters.capacity_conflict_misses, 1);
    }
}
