//! Feature-map partition across units.
//!
//! Work is sliced first by output channel, then the leftover kernels by
//! rows, then the leftover rows by columns; the last few columns go to
//! distinct randomly chosen units. All ranges are 0-based and half-open over
//! the output grid (channels × rows × columns).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::cost::macs_per_output;
use crate::graph::{infer_output, GraphError, OpKind, OperatorNode, TensorShape};
use crate::kernels::supports_regions;
use crate::tensor::Region;

/// One block of output work: channels `k`, rows `h`, columns `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkItem {
    pub k: (usize, usize),
    pub h: (usize, usize),
    pub w: (usize, usize),
}

impl WorkItem {
    pub fn elements(&self) -> usize {
        (self.k.1 - self.k.0) * (self.h.1 - self.h.0) * (self.w.1 - self.w.0)
    }

    pub fn region(&self) -> Region {
        Region { c: self.k.0..self.k.1, h: self.h.0..self.h.1, w: self.w.0..self.w.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum HaloMode {
    ReplicateRows,
    ReplicateCols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaloPolicy {
    pub mode: HaloMode,
    pub halo_extent: usize,
}

impl HaloPolicy {
    /// Overlap between neighbouring input windows: `max(0, window − stride)`.
    pub fn for_node(node: &OperatorNode, mode: HaloMode) -> Self {
        let (r, s, stride) = window(node);
        let extent = match mode {
            HaloMode::ReplicateRows => r,
            HaloMode::ReplicateCols => s,
        };
        HaloPolicy { mode, halo_extent: extent.saturating_sub(stride) }
    }
}

/// Kernel window `(R, S)` and stride of the spatial operator feeding the
/// output grid.
pub fn window(node: &OperatorNode) -> (usize, usize, usize) {
    let root = node.root();
    match root.kind {
        OpKind::Conv => {
            let (r, s) = node.kernel_window().unwrap_or((1, 1));
            (r, s, root.attrs.stride)
        }
        k if k.is_pool() => (root.attrs.window, root.attrs.window, root.attrs.stride),
        _ => (1, 1, 1),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitWork {
    pub work: Vec<WorkItem>,
}

impl UnitWork {
    pub fn kernel_slices(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self.work.iter().map(|w| w.k).collect();
        out.dedup();
        out
    }

    pub fn elements(&self) -> usize {
        self.work.iter().map(WorkItem::elements).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionScheme {
    pub node: String,
    /// Output grid `(channels, rows, columns)`.
    pub grid: (usize, usize, usize),
    pub per_unit: Vec<UnitWork>,
    pub slice_by_c: usize,
    pub slice_by_h: usize,
    pub slice_by_w: usize,
    /// `(column, unit)` pairs from the random phase.
    pub remainder_assignments: Vec<(usize, usize)>,
    pub seed: u64,
    pub halo_rows: HaloPolicy,
    pub halo_cols: HaloPolicy,
}

impl PartitionScheme {
    /// Whole output on unit 0.
    pub fn single(node: &OperatorNode, grid: (usize, usize, usize), units: usize, seed: u64) -> Self {
        let mut per_unit = vec![UnitWork { work: Vec::new() }; units.max(1)];
        per_unit[0].work.push(WorkItem { k: (0, grid.0), h: (0, grid.1), w: (0, grid.2) });
        PartitionScheme {
            node: node.id.clone(),
            grid,
            per_unit,
            slice_by_c: 0,
            slice_by_h: 0,
            slice_by_w: 0,
            remainder_assignments: Vec::new(),
            seed,
            halo_rows: HaloPolicy::for_node(node, HaloMode::ReplicateRows),
            halo_cols: HaloPolicy::for_node(node, HaloMode::ReplicateCols),
        }
    }

    pub fn units(&self) -> usize {
        self.per_unit.len()
    }
}

/// Whether the operator's output can be divided among units.
pub fn partitionable(node: &OperatorNode) -> bool {
    supports_regions(node)
}

/// Partitions the output of `node` over `units` following the
/// channel / row / column / random order.
pub fn partition_feature_map(
    node: &OperatorNode,
    inputs: &[TensorShape],
    units: usize,
    seed: u64,
) -> Result<PartitionScheme, GraphError> {
    let out = infer_output(node, inputs)?;
    let grid = out.grid();
    Ok(partition_grid(node, grid, units, seed))
}

/// The partition algorithm over an explicit output grid.
pub fn partition_grid(node: &OperatorNode, grid: (usize, usize, usize), units: usize, seed: u64) -> PartitionScheme {
    let p = units.max(1);
    if p == 1 || !partitionable(node) {
        return PartitionScheme::single(node, grid, p, seed);
    }
    let (k, h, w) = grid;
    let mut per_unit = vec![UnitWork { work: Vec::new() }; p];

    let slice_by_c = k / p;
    if slice_by_c > 0 {
        for (i, u) in per_unit.iter_mut().enumerate() {
            u.work.push(WorkItem { k: (i * slice_by_c, (i + 1) * slice_by_c), h: (0, h), w: (0, w) });
        }
    }
    let kr = (p * slice_by_c, k);
    let mut slice_by_h = 0;
    let mut slice_by_w = 0;
    let mut remainder = Vec::new();
    if kr.0 < kr.1 {
        slice_by_h = h / p;
        let rest_h = p * slice_by_h;
        if slice_by_h > 0 {
            for (i, u) in per_unit.iter_mut().enumerate() {
                u.work.push(WorkItem { k: kr, h: (i * slice_by_h, (i + 1) * slice_by_h), w: (0, w) });
            }
        }
        if rest_h < h {
            slice_by_w = w / p;
            let rest_w = p * slice_by_w;
            if slice_by_w > 0 {
                for (i, u) in per_unit.iter_mut().enumerate() {
                    u.work.push(WorkItem { k: kr, h: (rest_h, h), w: (i * slice_by_w, (i + 1) * slice_by_w) });
                }
            }
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            let mut order: Vec<usize> = (0..p).collect();
            for col in rest_w..w {
                let slot = (col - rest_w) % p;
                if slot == 0 {
                    order.shuffle(&mut rng);
                }
                let unit = order[slot];
                per_unit[unit].work.push(WorkItem { k: kr, h: (rest_h, h), w: (col, col + 1) });
                remainder.push((col, unit));
            }
        }
    }
    PartitionScheme {
        node: node.id.clone(),
        grid,
        per_unit,
        slice_by_c,
        slice_by_h,
        slice_by_w,
        remainder_assignments: remainder,
        seed,
        halo_rows: HaloPolicy::for_node(node, HaloMode::ReplicateRows),
        halo_cols: HaloPolicy::for_node(node, HaloMode::ReplicateCols),
    }
}

/// Per-unit MAC counts under `scheme`.
pub fn unit_macs(scheme: &PartitionScheme, node: &OperatorNode, inputs: &[TensorShape]) -> Vec<u64> {
    let per = macs_per_output(node, inputs);
    scheme.per_unit.iter().map(|u| u.elements() as u64 * per).collect()
}

/// `(max − min) / mean` of per-unit MACs; zero when there is no work.
pub fn load_imbalance(scheme: &PartitionScheme, node: &OperatorNode, inputs: &[TensorShape]) -> f64 {
    let macs = unit_macs(scheme, node, inputs);
    let total: u64 = macs.iter().sum();
    if total == 0 || macs.len() < 2 {
        return 0.0;
    }
    let mean = total as f64 / macs.len() as f64;
    let max = *macs.iter().max().unwrap() as f64;
    let min = *macs.iter().min().unwrap() as f64;
    (max - min) / mean
}

/// Input rows `[lo, hi)` read to produce output rows `[oh0, oh1)`, clipped
/// to the input, for a window `r` with `stride` and `pad`.
pub fn input_span(out: (usize, usize), r: usize, stride: usize, pad: usize, extent: usize) -> (usize, usize) {
    if out.0 >= out.1 {
        return (0, 0);
    }
    let lo = (out.0 * stride).saturating_sub(pad);
    let hi = ((out.1 - 1) * stride + r).saturating_sub(pad).min(extent);
    (lo.min(hi), hi)
}
