//! Static catalog of linkable patterns and the matcher that reports them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::{ComputationGraph, OpKind, OperatorNode};

/// One position of a chain pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Conv,
    Matmul,
    Pool,
}

impl Step {
    fn accepts(self, node: &OperatorNode) -> bool {
        match self {
            Step::Conv => node.is_conv_like(),
            Step::Matmul => node.is_matmul_like(),
            Step::Pool => node.kind.is_pool(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternShape {
    /// Operators connected by direct edges, in order.
    Chain(&'static [Step]),
    /// A conv-like fork whose branches reconverge at an add.
    Shortcut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatternRow {
    pub name: &'static str,
    pub shape: PatternShape,
}

pub const CATALOG: &[PatternRow] = &[
    PatternRow { name: "ConvX -> ConvY", shape: PatternShape::Chain(&[Step::Conv, Step::Conv]) },
    PatternRow {
        name: "ConvX -> ConvY -> ZPooling",
        shape: PatternShape::Chain(&[Step::Conv, Step::Conv, Step::Pool]),
    },
    PatternRow {
        name: "ConvX -> ZPooling -> ConvY",
        shape: PatternShape::Chain(&[Step::Conv, Step::Pool, Step::Conv]),
    },
    PatternRow { name: "ConvX -> ZPooling", shape: PatternShape::Chain(&[Step::Conv, Step::Pool]) },
    PatternRow { name: "Shortcut Connection", shape: PatternShape::Shortcut },
    PatternRow { name: "MatmulX -> MatmulY", shape: PatternShape::Chain(&[Step::Matmul, Step::Matmul]) },
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternMatch {
    pub pattern: String,
    pub nodes: Vec<String>,
}

fn chains(g: &ComputationGraph, steps: &[Step], prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    if prefix.len() == steps.len() {
        out.push(prefix.clone());
        return;
    }
    let last = prefix.last().unwrap().clone();
    for c in g.consumers(&last) {
        if steps[prefix.len()].accepts(&g.nodes[c]) {
            prefix.push(c.to_string());
            chains(g, steps, prefix, out);
            prefix.pop();
        }
    }
}

fn descendants(g: &ComputationGraph, from: &str) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from.to_string()];
    while let Some(n) = stack.pop() {
        for c in g.consumers(&n) {
            if seen.insert(c.to_string()) {
                stack.push(c.to_string());
            }
        }
    }
    seen
}

/// First add (in topological order) reachable from every branch of `fork`,
/// with the nodes strictly between the two.
fn shortcut(g: &ComputationGraph, fork: &str, rank: &BTreeMap<&str, usize>) -> Option<Vec<String>> {
    let branches = g.consumers(fork);
    if branches.len() < 2 {
        return None;
    }
    let reach: Vec<BTreeSet<String>> = branches
        .iter()
        .map(|b| {
            let mut s = descendants(g, b);
            s.insert(b.to_string());
            s
        })
        .collect();
    let join = reach[0]
        .iter()
        .filter(|n| g.nodes[*n].kind == OpKind::Add && reach.iter().all(|r| r.contains(*n)))
        .min_by_key(|n| rank[n.as_str()])?
        .clone();
    let mut between: Vec<String> = reach
        .iter()
        .flatten()
        .filter(|n| **n != join && descendants(g, n).contains(&join))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    between.sort_by_key(|n| rank[n.as_str()]);
    let mut nodes = vec![fork.to_string()];
    nodes.extend(between);
    nodes.push(join);
    Some(nodes)
}

/// Every catalog match, including overlapping ones, in catalog order and
/// then topological order of the first node.
pub fn identify_patterns(g: &ComputationGraph) -> Vec<PatternMatch> {
    let Ok(order) = g.topological_order() else {
        return Vec::new();
    };
    let rank: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut out = Vec::new();
    for row in CATALOG {
        for id in &order {
            let node = &g.nodes[id];
            match row.shape {
                PatternShape::Chain(steps) => {
                    if !steps[0].accepts(node) {
                        continue;
                    }
                    let mut found = Vec::new();
                    chains(g, steps, &mut vec![id.clone()], &mut found);
                    out.extend(found.into_iter().map(|nodes| PatternMatch { pattern: row.name.into(), nodes }));
                }
                PatternShape::Shortcut => {
                    if !node.is_conv_like() {
                        continue;
                    }
                    if let Some(nodes) = shortcut(g, id, &rank) {
                        out.push(PatternMatch { pattern: row.name.into(), nodes });
                    }
                }
            }
        }
    }
    out
}
