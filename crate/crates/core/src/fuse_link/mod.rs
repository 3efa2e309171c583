//! Operator fusion and linking.
//!
//! Fusion folds elementwise epilogues (bn, bias, relu, add/mul with a
//! constant operand) into the conv or matmul that produces their input.
//! Linking marks adjacent operators whose dataflow can be restructured, and
//! merges a fused conv with its pooling consumer where a compound kind exists.

mod patterns;

use serde::{Deserialize, Serialize};

use crate::graph::{ComputationGraph, HardwareDescriptor, OpKind, OperatorNode};

pub use patterns::{identify_patterns, PatternMatch, PatternRow, PatternShape, Step, CATALOG};

/// A matched fusion: the kinds of the folded chain and the compound produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionRule {
    pub pattern_kinds: Vec<OpKind>,
    pub result_kind: OpKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedGroup {
    pub id: String,
    pub members: Vec<String>,
    pub rule: FusionRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkAnnotation {
    pub producer: String,
    pub consumer: String,
    pub pattern: String,
    pub threshold_bytes: u64,
}

fn fusion_root(node: &OperatorNode) -> bool {
    matches!(node.kind, OpKind::Conv | OpKind::Matmul | OpKind::FullyConnected)
}

fn fusable_epilogue(node: &OperatorNode) -> bool {
    match node.kind {
        OpKind::Bn | OpKind::Bias | OpKind::Relu => true,
        OpKind::Add | OpKind::Mul => node.params.len() == 1,
        _ => false,
    }
}

/// Maximal single-consumer epilogue chain starting at `root`.
fn epilogue_chain(g: &ComputationGraph, root: &str) -> Vec<String> {
    let mut chain = vec![root.to_string()];
    loop {
        let tail = chain.last().unwrap();
        if g.use_count(tail) != 1 {
            break;
        }
        let Some(next) = g.consumers(tail).first().map(|s| s.to_string()) else {
            break;
        };
        let node = &g.nodes[&next];
        if !fusable_epilogue(node) || g.producers(&next).len() != 1 {
            break;
        }
        chain.push(next);
    }
    chain
}

/// Fuses every maximal conv/matmul-rooted epilogue chain into one `cbr`
/// compound. The compound takes the id of the chain's last member so
/// downstream references are unchanged. Generated parameters keep their
/// original provenance.
pub fn fuse_pass(graph: &ComputationGraph) -> (ComputationGraph, Vec<FusedGroup>) {
    let mut g = graph.clone();
    g.assign_param_origins();
    let Ok(order) = g.topological_order() else {
        return (g, Vec::new());
    };
    let chains: Vec<Vec<String>> = order
        .iter()
        .filter(|id| fusion_root(&g.nodes[*id]))
        .map(|id| epilogue_chain(&g, id))
        .filter(|c| c.len() >= 2)
        .collect();

    let mut groups = Vec::new();
    for chain in chains {
        let members: Vec<OperatorNode> = chain.iter().map(|id| g.nodes[id].clone()).collect();
        let id = chain.last().unwrap().clone();
        let rule = FusionRule {
            pattern_kinds: members.iter().map(|m| m.kind).collect(),
            result_kind: OpKind::Cbr,
        };
        let mut node = OperatorNode::new(&id, OpKind::Cbr);
        node.members = members;
        g.replace_chain(&chain, node);
        log::debug!("fused {} into {id}", chain.join(" -> "));
        groups.push(FusedGroup { id, members: chain, rule });
    }
    if !groups.is_empty() {
        g.validate().expect("fusion preserves shapes");
    }
    (g, groups)
}

/// Merges a fused `cbr` and its pooling consumer into `cbrm`/`cbra`. The
/// compound takes the pool's id. No size check is applied.
pub fn link_compound(g: &mut ComputationGraph, producer: &str, pool: &str) -> Option<String> {
    let p = g.node(producer)?;
    let q = g.node(pool)?;
    let kind = match q.kind {
        OpKind::Maxpool => OpKind::Cbrm,
        OpKind::Avgpool => OpKind::Cbra,
        _ => return None,
    };
    if p.kind != OpKind::Cbr || !p.is_conv_like() || g.use_count(producer) != 1 || g.producers(pool) != [producer] {
        return None;
    }
    let mut node = OperatorNode::new(pool, kind);
    node.members = p.members.clone();
    node.members.push(q.clone());
    g.replace_chain(&[producer.to_string(), pool.to_string()], node);
    g.validate().expect("linking preserves shapes");
    Some(pool.to_string())
}

/// Consumers whose read order the layout pass can derive.
pub fn linkable_consumer(node: &OperatorNode) -> bool {
    node.is_conv_like() || node.is_matmul_like() || node.kind.is_pool()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkOutcome {
    /// Ids of the cbrm/cbra compounds formed.
    pub compounds: Vec<String>,
    pub annotations: Vec<LinkAnnotation>,
    pub matches: Vec<PatternMatch>,
}

/// Links operators of a fused graph. A pair qualifies only when each
/// operator's own parameter bytes are strictly below `hw.l2_bytes`.
pub fn link_pass(graph: &ComputationGraph, hw: &HardwareDescriptor) -> (ComputationGraph, LinkOutcome) {
    let threshold = hw.l2_bytes;
    let small = |n: &OperatorNode| n.param_byte_size() < threshold;
    let mut g = graph.clone();
    let mut annotations = Vec::new();
    let mut compounds = Vec::new();

    let order = g.topological_order().unwrap_or_default();
    for id in order {
        let Some(node) = g.node(&id) else { continue };
        if node.kind != OpKind::Cbr || !node.is_conv_like() || !small(node) || g.use_count(&id) != 1 {
            continue;
        }
        let consumer = g.consumers(&id)[0].to_string();
        let c = &g.nodes[&consumer];
        if !c.kind.is_pool() || !small(c) {
            continue;
        }
        if let Some(new_id) = link_compound(&mut g, &id, &consumer) {
            annotations.push(LinkAnnotation {
                producer: id.clone(),
                consumer: consumer.clone(),
                pattern: "ConvX -> ZPooling".into(),
                threshold_bytes: threshold,
            });
            compounds.push(new_id);
        }
    }

    let matches = identify_patterns(&g);
    for m in &matches {
        for pair in m.nodes.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let (Some(pa), Some(pb)) = (g.node(a), g.node(b)) else { continue };
            if g.producers(b) != [a.as_str()] || g.use_count(a) != 1 || !linkable_consumer(pb) {
                continue;
            }
            if !small(pa) || !small(pb) {
                continue;
            }
            if annotations.iter().any(|x: &LinkAnnotation| &x.producer == a && &x.consumer == b) {
                continue;
            }
            annotations.push(LinkAnnotation {
                producer: a.clone(),
                consumer: b.clone(),
                pattern: m.pattern.clone(),
                threshold_bytes: threshold,
            });
        }
    }
    (g, LinkOutcome { compounds, annotations, matches })
}

/// JSON pass report for the fuse and link passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub threshold_bytes: u64,
    pub fused_groups: Vec<FusedGroup>,
    pub compounds: Vec<String>,
    pub link_annotations: Vec<LinkAnnotation>,
    pub pattern_matches: Vec<PatternMatch>,
}

impl PassReport {
    pub fn new(threshold_bytes: u64, fused_groups: Vec<FusedGroup>, link: LinkOutcome) -> Self {
        PassReport {
            threshold_bytes,
            fused_groups,
            compounds: link.compounds,
            link_annotations: link.annotations,
            pattern_matches: link.matches,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pass report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, GraphBuilder};
    use crate::graph::{AxisLabel, TensorShape};
    use crate::sim::{execute_reference, max_abs_diff, random_inputs};

    fn cbr_chain() -> ComputationGraph {
        GraphBuilder::new("chain")
            .input("x", TensorShape::chw(8, 6, 6))
            .conv("conv", "x", 16, 8, 1, 1, 0, 1)
            .bn("bn", "conv", 16)
            .bias("bias", "bn", TensorShape::new(&[(AxisLabel::K, 16)]))
            .relu("relu", "bias")
            .output("relu")
            .build()
    }

    #[test]
    fn conv_bn_bias_relu_becomes_one_cbr() {
        let (g, groups) = fuse_pass(&cbr_chain());
        assert_eq!(g.nodes.len(), 1);
        let n = &g.nodes["relu"];
        assert_eq!(n.kind, OpKind::Cbr);
        assert_eq!(groups[0].rule.pattern_kinds, vec![OpKind::Conv, OpKind::Bn, OpKind::Bias, OpKind::Relu]);
    }

    #[test]
    fn lone_relu_unchanged() {
        let g = GraphBuilder::new("r").input("x", TensorShape::chw(2, 2, 2)).relu("r", "x").output("r").build();
        let (f, groups) = fuse_pass(&g);
        assert!(groups.is_empty());
        assert_eq!(f.nodes, g.nodes);
    }

    #[test]
    fn fan_out_blocks_fusion() {
        let g = GraphBuilder::new("fan")
            .input("x", TensorShape::chw(4, 4, 4))
            .conv("conv", "x", 4, 4, 1, 1, 0, 1)
            .relu("relu", "conv")
            .relu("other", "conv")
            .output("relu")
            .output("other")
            .build();
        let (f, groups) = fuse_pass(&g);
        assert!(groups.is_empty());
        assert_eq!(f.nodes.len(), 3);
    }

    #[test]
    fn fusion_is_idempotent_and_preserves_outputs() {
        for g in fixtures::suite() {
            let (once, _) = fuse_pass(&g);
            let (twice, again) = fuse_pass(&once);
            assert!(again.is_empty(), "{}", g.name);
            assert_eq!(once, twice, "{}", g.name);
            assert!(once.nodes.len() <= g.nodes.len());
            let x = random_inputs(&g, 3);
            let a = execute_reference(&g, &x, 11).unwrap();
            let b = execute_reference(&once, &x, 11).unwrap();
            assert!(max_abs_diff(&a, &b) <= 1e-5, "{}", g.name);
        }
    }

    #[test]
    fn cbr_and_avgpool_link_into_cbra() {
        let g = fixtures::mobilenet_block();
        let (f, _) = fuse_pass(&g);
        let (l, outcome) = link_pass(&f, &HardwareDescriptor::default());
        assert_eq!(outcome.compounds, vec!["pool".to_string()]);
        assert_eq!(l.nodes["pool"].kind, OpKind::Cbra);
        assert!(outcome
            .annotations
            .iter()
            .any(|a| a.producer == "dw_relu" && a.consumer == "pool" && a.pattern == "ConvX -> ConvY"));
        let x = random_inputs(&g, 5);
        let a = execute_reference(&g, &x, 2).unwrap();
        let b = execute_reference(&l, &x, 2).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-5);
    }

    #[test]
    fn conv3x3_to_conv1x1_annotated() {
        let g = GraphBuilder::new("pair")
            .input("x", TensorShape::chw(8, 8, 8))
            .conv("a", "x", 8, 8, 3, 1, 1, 1)
            .conv("b", "a", 4, 8, 1, 1, 0, 1)
            .output("b")
            .build();
        let (_, outcome) = link_pass(&g, &HardwareDescriptor::default());
        assert_eq!(
            outcome.annotations,
            vec![LinkAnnotation {
                producer: "a".into(),
                consumer: "b".into(),
                pattern: "ConvX -> ConvY".into(),
                threshold_bytes: 512 * 1024
            }]
        );
    }

    #[test]
    fn threshold_is_strict() {
        // 128×256×1×1 float32 = exactly 128 KiB.
        let g = GraphBuilder::new("edge")
            .input("x", TensorShape::chw(256, 2, 2))
            .conv("a", "x", 256, 256, 1, 1, 0, 1)
            .conv("b", "a", 128, 256, 1, 1, 0, 1)
            .output("b")
            .build();
        let at = HardwareDescriptor { l2_bytes: 128 * 1024, ..Default::default() };
        let (_, outcome) = link_pass(&g, &at);
        assert!(outcome.annotations.is_empty());
        let above = HardwareDescriptor { l2_bytes: 256 * 1024 + 1, ..Default::default() };
        let (_, outcome) = link_pass(&g, &above);
        assert_eq!(outcome.annotations.len(), 1);
    }

    #[test]
    fn large_kernel_cbr_is_not_linked_by_threshold() {
        let (f, _) = fuse_pass(&fixtures::mobilenet_tail());
        let (l, outcome) = link_pass(&f, &HardwareDescriptor::default());
        assert!(outcome.compounds.is_empty());
        assert_eq!(l.nodes["relu"].kind, OpKind::Cbr);
        let mut forced = f.clone();
        assert_eq!(link_compound(&mut forced, "relu", "pool").as_deref(), Some("pool"));
        assert_eq!(forced.nodes["pool"].kind, OpKind::Cbra);
        assert_eq!(forced.nodes.len(), 1);
    }

    #[test]
    fn annotations_respect_threshold_on_suite() {
        let hw = HardwareDescriptor { l2_bytes: 8 * 1024, ..Default::default() };
        for g in fixtures::suite() {
            let (f, _) = fuse_pass(&g);
            let (l, outcome) = link_pass(&f, &hw);
            for a in &outcome.annotations {
                if let (Some(p), Some(c)) = (l.node(&a.producer), l.node(&a.consumer)) {
                    assert!(p.param_byte_size() < hw.l2_bytes && c.param_byte_size() < hw.l2_bytes);
                }
            }
        }
    }

    #[test]
    fn report_serializes() {
        let (f, groups) = fuse_pass(&fixtures::resnet18_block());
        let (_, outcome) = link_pass(&f, &HardwareDescriptor::default());
        let report = PassReport::new(512 * 1024, groups, outcome);
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(v["threshold_bytes"], 524288);
        assert!(v["pattern_matches"].as_array().unwrap().iter().any(|m| m["pattern"] == "Shortcut Connection"));
    }
}
