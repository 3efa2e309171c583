//! Execution plans: ordered layers of per-unit tasks with layouts and
//! memory placements.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::{ComputationGraph, GraphDocument, HardwareDescriptor};
use crate::layout::LayoutDescriptor;
use crate::partition::{PartitionScheme, WorkItem};
use crate::split::SplitPlan;

use super::SimError;

pub const PLAN_FORMAT_VERSION: u32 = 1;

/// Which optimization passes ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassFlags {
    pub fuse: bool,
    pub link: bool,
    pub split: bool,
    pub partition: bool,
    pub layout: bool,
}

impl PassFlags {
    pub const ALL: PassFlags = PassFlags { fuse: true, link: true, split: true, partition: true, layout: true };
    pub const VANILLA: PassFlags = PassFlags { fuse: false, link: false, split: false, partition: false, layout: false };
    /// Split and partition only.
    pub const HORIZONTAL: PassFlags = PassFlags { fuse: false, link: false, split: true, partition: true, layout: false };
    /// Fuse, link and layout only.
    pub const VERTICAL: PassFlags = PassFlags { fuse: true, link: true, split: false, partition: false, layout: true };

    pub fn label(&self) -> String {
        let names = [("fuse", self.fuse), ("link", self.link), ("split", self.split), ("partition", self.partition), ("layout", self.layout)];
        let on: Vec<&str> = names.iter().filter(|(_, b)| *b).map(|(n, _)| *n).collect();
        if on.is_empty() {
            "vanilla".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryLevel {
    L2,
    Shared,
    Ddr,
}

impl MemoryLevel {
    pub fn latency(self, hw: &HardwareDescriptor) -> u64 {
        match self {
            MemoryLevel::L2 => hw.lat_l2,
            MemoryLevel::Shared => hw.lat_shared,
            MemoryLevel::Ddr => hw.lat_ddr,
        }
    }
}

/// One operator (or part of its output) assigned to a unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub unit: usize,
    pub node: String,
    /// Output block; `None` computes the whole output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub work: Option<WorkItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocOp {
    Alloc,
    Batch,
    Release,
}

/// Allocation step on the plan timeline. Shared-memory events carry the
/// pool chunk; DDR placements have none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocEvent {
    pub op: AllocOp,
    pub tensor: String,
    pub bytes: u64,
    pub level: MemoryLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunk: Option<usize>,
    pub address: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLayer {
    pub node: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionScheme>,
    /// Layout of this layer's output, written for its linked consumer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<LayoutDescriptor>,
    pub tasks: Vec<Task>,
    /// Tensor (output or `node:param`) to memory level.
    pub placements: BTreeMap<String, MemoryLevel>,
    pub alloc_events: Vec<AllocEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub format_version: u32,
    /// Name of the source graph.
    pub graph_ref: String,
    pub flags: PassFlags,
    pub seed: u64,
    pub hw: HardwareDescriptor,
    /// The rewritten graph the layers refer to.
    pub graph: GraphDocument,
    /// Layer sizes the shared-memory pool is warmed with.
    pub pool_warm: Vec<u64>,
    /// Allocations made before the first layer (graph inputs).
    pub prologue: Vec<AllocEvent>,
    pub layers: Vec<PlanLayer>,
}

impl ExecutionPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let plan: ExecutionPlan = serde_json::from_str(text).map_err(|e| SimError::PlanValidation(format!("parse: {e}")))?;
        if plan.format_version != PLAN_FORMAT_VERSION {
            return Err(SimError::PlanValidation(format!("unsupported format_version {}", plan.format_version)));
        }
        Ok(plan)
    }

    pub fn build_graph(&self) -> Result<ComputationGraph, SimError> {
        Ok(self.graph.clone().into_graph()?)
    }

    /// Checks task units, node coverage, dependency order and placements.
    pub fn validate(&self, graph: &ComputationGraph) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::PlanValidation(m));
        self.hw.validate()?;
        let mut done: BTreeSet<&str> = graph.inputs.iter().map(|i| i.name.as_str()).collect();
        let mut placed: BTreeSet<&str> = self.prologue.iter().map(|e| e.tensor.as_str()).collect();
        for layer in &self.layers {
            let mut here = BTreeSet::new();
            for t in &layer.tasks {
                if t.unit >= self.hw.unit_count {
                    return fail(format!("layer {}: task on unit {} of {}", layer.node, t.unit, self.hw.unit_count));
                }
                if !graph.nodes.contains_key(&t.node) {
                    return fail(format!("layer {}: unknown node {}", layer.node, t.node));
                }
                if done.contains(t.node.as_str()) {
                    return fail(format!("node {} scheduled in two layers", t.node));
                }
                for p in graph.producers(&t.node) {
                    if !done.contains(p) {
                        return fail(format!("node {} runs before its producer {p}", t.node));
                    }
                }
                here.insert(t.node.as_str());
            }
            for e in &layer.alloc_events {
                placed.insert(e.tensor.as_str());
            }
            for n in &here {
                if !placed.contains(n) {
                    return fail(format!("tensor {n} has no placement"));
                }
            }
            done.extend(here);
        }
        if let Some(n) = graph.nodes.keys().find(|n| !done.contains(n.as_str())) {
            return fail(format!("node {n} is never executed"));
        }
        Ok(())
    }
}
