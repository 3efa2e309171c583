//! Profiling output of a simulated plan run.

use serde::{Deserialize, Serialize};

use crate::mempool::PoolStats;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Stated in every report so readers know how cycles combine.
pub const COST_MODEL: &str =
    "per-unit cycles = ceil(MACs / mac_per_cycle) + miss stalls + parameter and write traffic; \
     stalls add to compute without overlap; each layer ends at a barrier (max over units)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer: String,
    pub unit_cycles: Vec<u64>,
    pub unit_compute: Vec<u64>,
    pub unit_stall: Vec<u64>,
    pub unit_hits: Vec<u64>,
    pub unit_misses: Vec<u64>,
    /// Barrier time: the slowest unit.
    pub cycles: u64,
    pub compute_cycles: u64,
    pub stall_cycles: u64,
    pub hits: u64,
    pub misses: u64,
}

impl LayerProfile {
    pub fn new(layer: &str, units: usize) -> Self {
        LayerProfile {
            layer: layer.to_string(),
            unit_cycles: vec![0; units],
            unit_compute: vec![0; units],
            unit_stall: vec![0; units],
            unit_hits: vec![0; units],
            unit_misses: vec![0; units],
            cycles: 0,
            compute_cycles: 0,
            stall_cycles: 0,
            hits: 0,
            misses: 0,
        }
    }

    pub(crate) fn close(&mut self) {
        for u in 0..self.unit_cycles.len() {
            self.unit_cycles[u] = self.unit_compute[u] + self.unit_stall[u];
        }
        self.cycles = self.unit_cycles.iter().copied().max().unwrap_or(0);
        self.compute_cycles = self.unit_compute.iter().sum();
        self.stall_cycles = self.unit_stall.iter().sum();
        self.hits = self.unit_hits.iter().sum();
        self.misses = self.unit_misses.iter().sum();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub simulated_cycles: u64,
    pub compute_cycles: u64,
    pub stall_cycles: u64,
    pub hits: u64,
    pub misses: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryProfile {
    pub pool: PoolStats,
    pub peak_l2_bytes: u64,
    pub peak_shared_bytes: u64,
    pub peak_ddr_bytes: u64,
    /// Extra bytes read because partitioned windows overlap.
    pub halo_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub format_version: u32,
    pub graph_ref: String,
    pub plan: String,
    pub units: usize,
    pub cost_model: String,
    pub layers: Vec<LayerProfile>,
    pub totals: Totals,
    pub memory: MemoryProfile,
}

impl ProfileReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per layer and unit: `layer,unit,cycles,hits,misses`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "unit", "cycles", "hits", "misses"]).expect("in-memory csv");
        for l in &self.layers {
            for u in 0..l.unit_cycles.len() {
                w.write_record([
                    l.layer.clone(),
                    u.to_string(),
                    l.unit_cycles[u].to_string(),
                    l.unit_hits[u].to_string(),
                    l.unit_misses[u].to_string(),
                ])
                .expect("in-memory csv");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

/// Outcome of timing two equivalent plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub graph_ref: String,
    pub base: String,
    pub opt: String,
    pub base_cycles: u64,
    pub opt_cycles: u64,
    pub speedup: f64,
    pub max_abs_diff: f32,
    pub base_misses: u64,
    pub opt_misses: u64,
}
