//! Straightforward single-threaded reference interpreter; the equivalence
//! oracle for every optimized plan.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::graph::{ComputationGraph, GraphError};
use crate::kernels;
use crate::tensor::{derive_seed, ParamValues, Tensor};

pub type TensorMap = BTreeMap<String, Tensor>;

/// Ensures every data-less parameter carries a generation origin.
pub(crate) fn with_origins(graph: &ComputationGraph) -> Cow<'_, ComputationGraph> {
    let missing = graph
        .nodes
        .values()
        .flat_map(|n| n.all_params())
        .any(|p| p.data.is_none() && p.origin.is_none());
    if missing {
        let mut g = graph.clone();
        g.assign_param_origins();
        Cow::Owned(g)
    } else {
        Cow::Borrowed(graph)
    }
}

/// Random inputs for every graph input, uniform in `[-1, 1)`.
pub fn random_inputs(graph: &ComputationGraph, seed: u64) -> TensorMap {
    graph
        .inputs
        .iter()
        .enumerate()
        .map(|(i, inp)| (inp.name.clone(), Tensor::random(inp.shape.clone(), derive_seed(seed, "input", i))))
        .collect()
}

pub(crate) fn check_inputs(graph: &ComputationGraph, inputs: &TensorMap) -> Result<(), GraphError> {
    for inp in &graph.inputs {
        let t = inputs
            .get(&inp.name)
            .ok_or_else(|| GraphError::Validation(format!("missing input tensor {}", inp.name)))?;
        if !t.shape.same_extents(&inp.shape) {
            return Err(GraphError::Validation(format!(
                "input {} has shape {}, expected {}",
                inp.name, t.shape, inp.shape
            )));
        }
    }
    Ok(())
}

/// Evaluates `graph` in topological order. Generated parameters are drawn
/// from `seed`; returns the tensors named by `graph.outputs`.
pub fn execute_reference(graph: &ComputationGraph, inputs: &TensorMap, seed: u64) -> Result<TensorMap, GraphError> {
    check_inputs(graph, inputs)?;
    let graph = with_origins(graph);
    let mut values = ParamValues::new(seed);
    let mut env: TensorMap = inputs.clone();
    for id in graph.topological_order()? {
        let node = &graph.nodes[&id];
        let producers = graph.producers(&id);
        let operands: Vec<&Tensor> = producers.iter().map(|p| &env[*p]).collect();
        let out = kernels::evaluate(node, &operands, &mut values)?;
        env.insert(id, out);
    }
    Ok(graph.outputs.iter().map(|o| (o.clone(), env[o].clone())).collect())
}

/// Largest elementwise difference across all named outputs.
pub fn max_abs_diff(a: &TensorMap, b: &TensorMap) -> f32 {
    let mut worst = 0.0f32;
    for (k, ta) in a {
        match b.get(k) {
            Some(tb) => worst = worst.max(ta.max_abs_diff(tb)),
            None => return f32::INFINITY,
        }
    }
    if a.len() != b.len() {
        return f32::INFINITY;
    }
    worst
}
