//! Dataflow-centric optimizer and simulator for neural-network inference on
//! memory-constrained multi-unit edge devices.

pub mod cost;
pub mod dist;
pub mod fixtures;
pub mod fuse_link;
pub mod graph;
pub mod kernels;
pub mod layout;
pub mod mempool;
pub mod partition;
pub mod pipeline;
pub mod sim;
pub mod split;
pub mod tensor;
