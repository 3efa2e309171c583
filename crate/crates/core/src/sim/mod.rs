//! Reference and plan execution on a simulated multi-unit device.

mod cache;
mod engine;
mod memory;
mod plan;
mod reference;
mod report;

use thiserror::Error;

use crate::graph::GraphError;

pub use cache::{simulate_cache_trace, CacheCounters, CacheGeometry, CacheState};
pub use engine::{compare_plans, execute_plan, execute_plan_numeric, simulate_plan, TOLERANCE};
pub use memory::Arena;
pub use plan::{AllocEvent, AllocOp, ExecutionPlan, MemoryLevel, PassFlags, PlanLayer, Task, PLAN_FORMAT_VERSION};
pub use reference::{execute_reference, max_abs_diff, random_inputs, TensorMap};
pub use report::{Comparison, LayerProfile, MemoryProfile, ProfileReport, Totals, COST_MODEL};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid plan: {0}")]
    PlanValidation(String),
    #[error("out of memory: {0}")]
    OutOfMemory(String),
    #[error("outputs differ from the reference by {max_abs_diff:e}")]
    EquivalenceFailure { max_abs_diff: f32 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}
