//! Computation-graph representation, shape inference and hardware descriptor.

mod format;
mod hardware;
mod infer;
mod node;
mod shape;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{emit_graph, load_graph, GraphDocument, FORMAT_VERSION};
pub use hardware::HardwareDescriptor;
pub use infer::infer_output;
pub use node::{Attrs, OpKind, OperatorNode, Param, ParamOrigin, ALL_KINDS};
pub use shape::{Axis, AxisLabel, ElementType, TensorShape};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("graph contains a cycle through {0}")]
    Cycle(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// A tensor edge between two nodes, or from a graph input to a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub shape: TensorShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphInput {
    pub name: String,
    pub shape: TensorShape,
}

/// Directed acyclic graph of operators. Edges are kept in insertion order;
/// the order of edges into a node defines its operand order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComputationGraph {
    pub name: String,
    pub nodes: BTreeMap<String, OperatorNode>,
    pub edges: Vec<Edge>,
    pub inputs: Vec<GraphInput>,
    pub outputs: Vec<String>,
    shapes: BTreeMap<String, TensorShape>,
}

impl ComputationGraph {
    pub fn new(name: &str) -> Self {
        ComputationGraph { name: name.to_string(), ..Default::default() }
    }

    pub fn add_input(&mut self, name: &str, shape: TensorShape) {
        self.inputs.push(GraphInput { name: name.to_string(), shape });
    }

    pub fn add_node(&mut self, node: OperatorNode) {
        self.nodes.insert(node.id.clone(), node);
    }

    /// Adds an edge with a placeholder shape; `validate` fills it in.
    pub fn connect(&mut self, from: &str, to: &str) {
        self.edges.push(Edge {
            from: from.to_string(),
            to: to.to_string(),
            shape: TensorShape::new(&[]),
        });
    }

    pub fn add_output(&mut self, id: &str) {
        self.outputs.push(id.to_string());
    }

    pub fn node(&self, id: &str) -> Option<&OperatorNode> {
        self.nodes.get(id)
    }

    pub fn is_input(&self, name: &str) -> bool {
        self.inputs.iter().any(|i| i.name == name)
    }

    /// Operand sources of `id` in operand order.
    pub fn producers(&self, id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|e| e.to == id)
            .map(|e| e.from.as_str())
            .collect()
    }

    /// Distinct consumer nodes of `id`, in edge order.
    pub fn consumers(&self, id: &str) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in self.edges.iter().filter(|e| e.from == id) {
            if !out.contains(&e.to.as_str()) {
                out.push(&e.to);
            }
        }
        out
    }

    /// Number of uses of `id`'s output: outgoing edges plus graph-output uses.
    pub fn use_count(&self, id: &str) -> usize {
        self.edges.iter().filter(|e| e.from == id).count()
            + self.outputs.iter().filter(|o| *o == id).count()
    }

    /// Inferred shape of a node output or graph input.
    pub fn shape_of(&self, name: &str) -> Option<&TensorShape> {
        self.shapes
            .get(name)
            .or_else(|| self.inputs.iter().find(|i| i.name == name).map(|i| &i.shape))
    }

    pub fn output_shapes(&self) -> &BTreeMap<String, TensorShape> {
        &self.shapes
    }

    /// Deterministic topological order; ties broken by lexicographic node id.
    pub fn topological_order(&self) -> Result<Vec<String>, GraphError> {
        let mut indegree: BTreeMap<&str, usize> = self.nodes.keys().map(|k| (k.as_str(), 0)).collect();
        for e in &self.edges {
            if self.nodes.contains_key(&e.from) {
                if let Some(d) = indegree.get_mut(e.to.as_str()) {
                    *d += 1;
                }
            }
        }
        let mut ready: BTreeSet<&str> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(k, _)| *k)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(next) = ready.pop_first() {
            order.push(next.to_string());
            for e in self.edges.iter().filter(|e| e.from == next) {
                if let Some(d) = indegree.get_mut(e.to.as_str()) {
                    *d -= 1;
                    if *d == 0 {
                        ready.insert(e.to.as_str());
                    }
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = indegree
                .iter()
                .find(|(k, d)| **d > 0 && !order.iter().any(|o| o == *k))
                .map(|(k, _)| k.to_string())
                .unwrap_or_default();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Checks structure, infers every node's output shape, and writes the
    /// inferred shapes onto the edges. Edges that already carry a non-empty
    /// shape must agree with inference.
    pub fn validate(&mut self) -> Result<(), GraphError> {
        if self.outputs.is_empty() {
            return Err(GraphError::Validation("graph has no outputs".into()));
        }
        for input in &self.inputs {
            input.shape.validate()?;
            if self.nodes.contains_key(&input.name) {
                return Err(GraphError::Validation(format!(
                    "input name {} collides with a node id",
                    input.name
                )));
            }
        }
        for (id, node) in &self.nodes {
            if id != &node.id {
                return Err(GraphError::Validation(format!("node key {id} != id {}", node.id)));
            }
        }
        for e in &self.edges {
            if !self.nodes.contains_key(&e.from) && !self.is_input(&e.from) {
                return Err(GraphError::Validation(format!("dangling edge from {}", e.from)));
            }
            if !self.nodes.contains_key(&e.to) {
                return Err(GraphError::Validation(format!("dangling edge to {}", e.to)));
            }
        }
        for o in &self.outputs {
            if !self.nodes.contains_key(o) {
                return Err(GraphError::Validation(format!("output {o} is not a node")));
            }
        }
        let order = self.topological_order().map_err(|e| match e {
            GraphError::Cycle(n) => GraphError::Validation(format!("cycle through {n}")),
            other => other,
        })?;

        let mut shapes: BTreeMap<String, TensorShape> = BTreeMap::new();
        for id in &order {
            let node = &self.nodes[id];
            let operand_shapes: Vec<TensorShape> = self
                .producers(id)
                .iter()
                .map(|p| {
                    shapes
                        .get(*p)
                        .cloned()
                        .or_else(|| self.inputs.iter().find(|i| i.name == *p).map(|i| i.shape.clone()))
                        .expect("producer precedes consumer in topological order")
                })
                .collect();
            let out = infer_output(node, &operand_shapes)?;
            out.validate()?;
            shapes.insert(id.clone(), out);
        }
        for e in &mut self.edges {
            let inferred = shapes
                .get(&e.from)
                .cloned()
                .or_else(|| self.inputs.iter().find(|i| i.name == e.from).map(|i| i.shape.clone()))
                .expect("checked above");
            if e.shape.rank() == 0 {
                e.shape = inferred;
            } else if !e.shape.same_extents(&inferred) {
                return Err(GraphError::Validation(format!(
                    "edge {}→{} declares {} but producer yields {}",
                    e.from, e.to, e.shape, inferred
                )));
            }
        }
        self.shapes = shapes;
        Ok(())
    }

    /// Replaces the path `chain` (in dataflow order) by `node`. Edges into the
    /// first member are redirected to `node`, edges out of the last member
    /// leave from `node`, and edges inside the chain are dropped.
    pub fn replace_chain(&mut self, chain: &[String], node: OperatorNode) {
        let first = &chain[0];
        let last = &chain[chain.len() - 1];
        let inside = |id: &str| chain.iter().any(|c| c == id);
        self.edges.retain(|e| !(inside(&e.from) && inside(&e.to)));
        for e in &mut self.edges {
            if &e.to == first {
                e.to = node.id.clone();
            }
            if &e.from == last {
                e.from = node.id.clone();
            }
        }
        for o in &mut self.outputs {
            if o == last {
                *o = node.id.clone();
            }
        }
        for id in chain {
            self.nodes.remove(id);
            self.shapes.remove(id);
        }
        self.add_node(node);
    }

    /// Fills in generated-parameter provenance for parameters that carry no
    /// explicit data, so later slicing can recover the right values.
    pub fn assign_param_origins(&mut self) {
        fn visit(node: &mut OperatorNode, counter: &mut usize, owner: &str) {
            for p in &mut node.params {
                if p.data.is_none() && p.origin.is_none() {
                    p.origin = Some(ParamOrigin {
                        node: owner.to_string(),
                        index: *counter,
                        full: p.shape.clone(),
                        ranges: p.shape.dims().iter().map(|&d| (0, d)).collect(),
                    });
                }
                *counter += 1;
            }
            let owner_id = owner.to_string();
            for m in &mut node.members {
                visit(m, counter, &owner_id);
            }
        }
        for node in self.nodes.values_mut() {
            let id = node.id.clone();
            let mut counter = 0;
            visit(node, &mut counter, &id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu(id: &str) -> OperatorNode {
        OperatorNode::new(id, OpKind::Relu)
    }

    #[test]
    fn chain_order() {
        let mut g = ComputationGraph::new("chain");
        g.add_input("x", TensorShape::chw(2, 2, 2));
        let w = TensorShape::new(&[(AxisLabel::K, 2), (AxisLabel::C, 2), (AxisLabel::R, 1), (AxisLabel::S, 1)]);
        g.add_node(OperatorNode::new("conv", OpKind::Conv).with_param("w", w));
        g.add_node(
            OperatorNode::new("bn", OpKind::Bn)
                .with_param("scale", TensorShape::new(&[(AxisLabel::K, 2)]))
                .with_param("shift", TensorShape::new(&[(AxisLabel::K, 2)])),
        );
        g.add_node(relu("relu"));
        g.connect("x", "conv");
        g.connect("conv", "bn");
        g.connect("bn", "relu");
        g.add_output("relu");
        g.validate().unwrap();
        assert_eq!(g.topological_order().unwrap(), vec!["conv", "bn", "relu"]);
    }

    #[test]
    fn diamond_tie_break() {
        let mut g = ComputationGraph::new("diamond");
        g.add_input("x", TensorShape::chw(1, 2, 2));
        for id in ["a", "c", "b"] {
            g.add_node(relu(id));
        }
        g.add_node(OperatorNode::new("d", OpKind::Add));
        g.connect("x", "a");
        g.connect("a", "c");
        g.connect("a", "b");
        g.connect("b", "d");
        g.connect("c", "d");
        g.add_output("d");
        g.validate().unwrap();
        assert_eq!(g.topological_order().unwrap(), vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn back_edge_is_cycle() {
        let mut g = ComputationGraph::new("cyc");
        g.add_node(relu("a"));
        g.add_node(relu("b"));
        g.connect("a", "b");
        g.connect("b", "a");
        g.add_output("b");
        assert!(matches!(g.topological_order(), Err(GraphError::Cycle(_))));
        assert!(matches!(g.validate(), Err(GraphError::Validation(_))));
    }

    #[test]
    fn no_outputs_rejected() {
        let mut g = ComputationGraph::new("empty");
        assert!(matches!(g.validate(), Err(GraphError::Validation(_))));
    }

    #[test]
    fn inference_is_idempotent() {
        let mut g = ComputationGraph::new("chain");
        g.add_input("x", TensorShape::chw(3, 5, 5));
        g.add_node(OperatorNode::new("p", OpKind::Maxpool).with_attrs(Attrs::pool(2, 2)));
        g.connect("x", "p");
        g.add_output("p");
        g.validate().unwrap();
        let first = g.clone();
        g.validate().unwrap();
        assert_eq!(first, g);
    }
}
