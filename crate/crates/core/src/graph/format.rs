//! JSON graph document (format version 1).

use serde::{Deserialize, Serialize};

use super::node::{Attrs, OpKind, OperatorNode, Param};
use super::{ComputationGraph, Edge, GraphError, GraphInput};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDocument {
    pub id: String,
    pub kind: String,
    #[serde(default)]
    pub attrs: Attrs,
    #[serde(default)]
    pub params: Vec<Param>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<NodeDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeDocument {
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<super::TensorShape>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDocument {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    pub nodes: Vec<NodeDocument>,
    pub edges: Vec<EdgeDocument>,
    #[serde(default)]
    pub inputs: Vec<GraphInput>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl NodeDocument {
    fn into_node(self) -> Result<OperatorNode, GraphError> {
        let kind = OpKind::from_name(&self.kind).ok_or_else(|| {
            GraphError::Validation(format!("node {}: unknown operator kind {:?}", self.id, self.kind))
        })?;
        let members = self
            .members
            .into_iter()
            .map(NodeDocument::into_node)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(OperatorNode { id: self.id, kind, attrs: self.attrs, params: self.params, members })
    }

    fn from_node(node: &OperatorNode) -> Self {
        NodeDocument {
            id: node.id.clone(),
            kind: node.kind.name().to_string(),
            attrs: node.attrs.clone(),
            params: node.params.clone(),
            members: node.members.iter().map(NodeDocument::from_node).collect(),
        }
    }
}

impl GraphDocument {
    pub fn from_graph(g: &ComputationGraph) -> Self {
        GraphDocument {
            format_version: FORMAT_VERSION,
            name: g.name.clone(),
            nodes: g.nodes.values().map(NodeDocument::from_node).collect(),
            edges: g
                .edges
                .iter()
                .map(|e| EdgeDocument { from: e.from.clone(), to: e.to.clone(), shape: Some(e.shape.clone()) })
                .collect(),
            inputs: g.inputs.clone(),
            outputs: g.outputs.clone(),
        }
    }

    /// Builds and validates the graph.
    pub fn into_graph(self) -> Result<ComputationGraph, GraphError> {
        if self.format_version != FORMAT_VERSION {
            return Err(GraphError::Parse(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut g = ComputationGraph::new(&self.name);
        g.inputs = self.inputs;
        for nd in self.nodes {
            let node = nd.into_node()?;
            if g.nodes.contains_key(&node.id) {
                return Err(GraphError::Validation(format!("duplicate node id {}", node.id)));
            }
            g.add_node(node);
        }
        g.edges = self
            .edges
            .into_iter()
            .map(|e| Edge {
                from: e.from,
                to: e.to,
                shape: e.shape.unwrap_or_else(|| super::TensorShape::new(&[])),
            })
            .collect();
        g.outputs = self.outputs;
        g.validate()?;
        Ok(g)
    }
}

/// Parses and validates a graph document.
pub fn load_graph(text: &str) -> Result<ComputationGraph, GraphError> {
    let doc: GraphDocument = serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
    doc.into_graph()
}

pub fn emit_graph(g: &ComputationGraph) -> String {
    serde_json::to_string_pretty(&GraphDocument::from_graph(g)).expect("graph document serializes")
}
