use serde::{Deserialize, Serialize};

use super::format::FORMAT_VERSION;
use super::GraphError;

/// Memory hierarchy and throughput of one multi-unit device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareDescriptor {
    #[serde(default = "version")]
    pub format_version: u32,
    pub unit_count: usize,
    /// Private per-unit memory; also the link and split threshold.
    pub l2_bytes: u64,
    pub shared_bytes: u64,
    pub ddr_bytes: u64,
    pub cache_line_bytes: u64,
    pub cache_sets: usize,
    pub cache_ways: usize,
    pub lat_l2: u64,
    pub lat_shared: u64,
    pub lat_ddr: u64,
    pub mac_per_cycle: u64,
}

fn version() -> u32 {
    FORMAT_VERSION
}

impl Default for HardwareDescriptor {
    /// Eight units with 512 KB L2 and 4 MB shared memory. Cache geometry and
    /// latencies are illustrative.
    fn default() -> Self {
        HardwareDescriptor {
            format_version: FORMAT_VERSION,
            unit_count: 8,
            l2_bytes: 512 * 1024,
            shared_bytes: 4 * 1024 * 1024,
            ddr_bytes: 512 * 1024 * 1024,
            cache_line_bytes: 64,
            cache_sets: 256,
            cache_ways: 4,
            lat_l2: 4,
            lat_shared: 24,
            lat_ddr: 120,
            mac_per_cycle: 8,
        }
    }
}

impl HardwareDescriptor {
    pub fn validate(&self) -> Result<(), GraphError> {
        let fail = |m: &str| Err(GraphError::Validation(format!("hardware descriptor: {m}")));
        if self.format_version != FORMAT_VERSION {
            return Err(GraphError::Parse(format!("unsupported format_version {}", self.format_version)));
        }
        if self.unit_count == 0 {
            return fail("unit_count must be ≥ 1");
        }
        if self.l2_bytes == 0 || self.shared_bytes == 0 || self.ddr_bytes == 0 {
            return fail("memory sizes must be positive");
        }
        if !(self.l2_bytes < self.shared_bytes && self.shared_bytes < self.ddr_bytes) {
            return fail("require l2_bytes < shared_bytes < ddr_bytes");
        }
        if !self.cache_line_bytes.is_power_of_two() {
            return fail("cache_line_bytes must be a power of two");
        }
        if self.cache_sets == 0 || self.cache_ways == 0 || self.mac_per_cycle == 0 {
            return fail("cache geometry and throughput must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let hw: HardwareDescriptor = serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
        hw.validate()?;
        Ok(hw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hardware descriptor serializes")
    }

    pub fn with_units(mut self, p: usize) -> Self {
        self.unit_count = p;
        self
    }
}
