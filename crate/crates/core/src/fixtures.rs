//! Desk-scale benchmark graphs shaped after the blocks of common edge models,
//! plus a large pointwise tail used for the worked split example.

use crate::graph::{Attrs, AxisLabel, ComputationGraph, OpKind, OperatorNode, Param, TensorShape};

/// Small fluent builder for hand-written graphs.
pub struct GraphBuilder {
    graph: ComputationGraph,
}

fn kernel(k: usize, c: usize, r: usize, s: usize) -> TensorShape {
    TensorShape::new(&[(AxisLabel::K, k), (AxisLabel::C, c), (AxisLabel::R, r), (AxisLabel::S, s)])
}

fn vector(k: usize) -> TensorShape {
    TensorShape::new(&[(AxisLabel::K, k)])
}

impl GraphBuilder {
    pub fn new(name: &str) -> Self {
        GraphBuilder { graph: ComputationGraph::new(name) }
    }

    pub fn input(mut self, name: &str, shape: TensorShape) -> Self {
        self.graph.add_input(name, shape);
        self
    }

    pub fn node(mut self, node: OperatorNode, from: &[&str]) -> Self {
        let id = node.id.clone();
        self.graph.add_node(node);
        for f in from {
            self.graph.connect(f, &id);
        }
        self
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(self, id: &str, from: &str, k: usize, c: usize, r: usize, stride: usize, pad: usize, groups: usize) -> Self {
        let node = OperatorNode::new(id, OpKind::Conv)
            .with_attrs(Attrs { stride, pad, groups, ..Attrs::default() })
            .with_param("weight", kernel(k, c / groups, r, r));
        self.node(node, &[from])
    }

    pub fn bn(self, id: &str, from: &str, c: usize) -> Self {
        let node = OperatorNode::new(id, OpKind::Bn)
            .with_param("scale", vector(c))
            .with_param("shift", vector(c));
        self.node(node, &[from])
    }

    pub fn bias(self, id: &str, from: &str, shape: TensorShape) -> Self {
        let node = OperatorNode::new(id, OpKind::Bias).with_param("bias", shape);
        self.node(node, &[from])
    }

    pub fn relu(self, id: &str, from: &str) -> Self {
        self.node(OperatorNode::new(id, OpKind::Relu), &[from])
    }

    pub fn pool(self, id: &str, from: &str, kind: OpKind, window: usize, stride: usize) -> Self {
        self.node(OperatorNode::new(id, kind).with_attrs(Attrs::pool(window, stride)), &[from])
    }

    pub fn matmul(self, id: &str, from: &str, n: usize, k: usize) -> Self {
        let node = OperatorNode::new(id, OpKind::Matmul).with_param(
            "weight",
            TensorShape::new(&[(AxisLabel::K, n), (AxisLabel::C, k)]),
        );
        self.node(node, &[from])
    }

    pub fn lstm(self, id: &str, from: &str, input: usize, hidden: usize) -> Self {
        let node = OperatorNode::new(id, OpKind::LstmCell)
            .with_param("w_input", TensorShape::new(&[(AxisLabel::K, 4 * hidden), (AxisLabel::C, input)]))
            .with_param("w_hidden", TensorShape::new(&[(AxisLabel::K, 4 * hidden), (AxisLabel::C, hidden)]))
            .with_param("bias", vector(4 * hidden));
        self.node(node, &[from])
    }

    pub fn output(mut self, id: &str) -> Self {
        self.graph.add_output(id);
        self
    }

    pub fn build(mut self) -> ComputationGraph {
        self.graph.validate().expect("fixture graph is valid");
        self.graph
    }
}

/// Depthwise-separable block: dw3x3-bn-relu, pw1x1-bn-bias-relu, avgpool 2×2.
pub fn mobilenet_block() -> ComputationGraph {
    GraphBuilder::new("mobilenet_block")
        .input("x", TensorShape::chw(32, 32, 32))
        .conv("dw", "x", 32, 32, 3, 1, 1, 32)
        .bn("dw_bn", "dw", 32)
        .relu("dw_relu", "dw_bn")
        .conv("pw", "dw_relu", 64, 32, 1, 1, 0, 1)
        .bn("pw_bn", "pw", 64)
        .bias("pw_bias", "pw_bn", vector(64))
        .relu("pw_relu", "pw_bias")
        .pool("pool", "pw_relu", OpKind::Avgpool, 2, 2)
        .output("pool")
        .build()
}

/// Stem conv followed by a fire module (squeeze, two expands, concat).
pub fn squeezenet_fire() -> ComputationGraph {
    GraphBuilder::new("squeezenet_fire")
        .input("x", TensorShape::chw(16, 32, 32))
        .conv("stem", "x", 32, 16, 3, 1, 1, 1)
        .relu("stem_relu", "stem")
        .conv("squeeze", "stem_relu", 16, 32, 1, 1, 0, 1)
        .relu("squeeze_relu", "squeeze")
        .conv("expand1", "squeeze_relu", 32, 16, 1, 1, 0, 1)
        .relu("expand1_relu", "expand1")
        .conv("expand3", "squeeze_relu", 32, 16, 3, 1, 1, 1)
        .relu("expand3_relu", "expand3")
        .node(OperatorNode::new("concat", OpKind::Concat), &["expand1_relu", "expand3_relu"])
        .pool("pool", "concat", OpKind::Maxpool, 2, 2)
        .output("pool")
        .build()
}

/// Channel-split unit: one half passes through, the other runs
/// pw-dw-pw; halves are concatenated and channel-shuffled.
pub fn shufflenet_unit() -> ComputationGraph {
    let split = |id: &str, lo: usize, hi: usize| {
        OperatorNode::new(id, OpKind::Split).with_attrs(Attrs { start: Some(lo), end: Some(hi), ..Attrs::default() })
    };
    GraphBuilder::new("shufflenet_unit")
        .input("x", TensorShape::chw(48, 32, 32))
        .node(split("left", 0, 24), &["x"])
        .node(split("right", 24, 48), &["x"])
        .conv("pw1", "right", 24, 24, 1, 1, 0, 1)
        .bn("pw1_bn", "pw1", 24)
        .relu("pw1_relu", "pw1_bn")
        .conv("dw", "pw1_relu", 24, 24, 3, 1, 1, 24)
        .bn("dw_bn", "dw", 24)
        .conv("pw2", "dw_bn", 24, 24, 1, 1, 0, 1)
        .bn("pw2_bn", "pw2", 24)
        .relu("pw2_relu", "pw2_bn")
        .node(OperatorNode::new("concat", OpKind::Concat), &["left", "pw2_relu"])
        .node(
            OperatorNode::new("shuffle", OpKind::Transpose).with_attrs(Attrs { groups: 2, ..Attrs::default() }),
            &["concat"],
        )
        .output("shuffle")
        .build()
}

/// Basic residual block behind a stem conv.
pub fn resnet18_block() -> ComputationGraph {
    GraphBuilder::new("resnet18_block")
        .input("x", TensorShape::chw(32, 32, 32))
        .conv("stem", "x", 32, 32, 3, 1, 1, 1)
        .bn("stem_bn", "stem", 32)
        .relu("stem_relu", "stem_bn")
        .conv("c1", "stem_relu", 32, 32, 3, 1, 1, 1)
        .bn("c1_bn", "c1", 32)
        .relu("c1_relu", "c1_bn")
        .conv("c2", "c1_relu", 32, 32, 3, 1, 1, 1)
        .bn("c2_bn", "c2", 32)
        .node(OperatorNode::new("join", OpKind::Add), &["c2_bn", "stem_relu"])
        .relu("out_relu", "join")
        .output("out_relu")
        .build()
}

/// Two stacked LSTM cells and a two-layer projection.
pub fn lstm_chain() -> ComputationGraph {
    GraphBuilder::new("lstm_chain")
        .input("x", TensorShape::seq(16, 32))
        .lstm("l1", "x", 32, 32)
        .lstm("l2", "l1", 32, 32)
        .matmul("m1", "l2", 64, 32)
        .bias("m1_bias", "m1", vector(64))
        .relu("m1_relu", "m1_bias")
        .matmul("m2", "m1_relu", 32, 64)
        .output("m2")
        .build()
}

/// Shared stem with heatmap and size heads.
pub fn centrenet_head() -> ComputationGraph {
    GraphBuilder::new("centrenet_head")
        .input("x", TensorShape::chw(16, 32, 32))
        .conv("stem", "x", 32, 16, 3, 1, 1, 1)
        .bn("stem_bn", "stem", 32)
        .relu("stem_relu", "stem_bn")
        .conv("hm1", "stem_relu", 32, 32, 3, 1, 1, 1)
        .relu("hm1_relu", "hm1")
        .conv("hm", "hm1_relu", 4, 32, 1, 1, 0, 1)
        .conv("wh1", "stem_relu", 32, 32, 3, 1, 1, 1)
        .relu("wh1_relu", "wh1")
        .conv("wh", "wh1_relu", 2, 32, 1, 1, 0, 1)
        .output("hm")
        .output("wh")
        .build()
}

/// The six desk-scale benchmark graphs.
pub fn suite() -> Vec<ComputationGraph> {
    vec![
        mobilenet_block(),
        squeezenet_fire(),
        shufflenet_unit(),
        resnet18_block(),
        lstm_chain(),
        centrenet_head(),
    ]
}

/// Large pointwise tail: conv1x1 1024→1024 on 7×7, bn, spatial bias
/// 1024×7×7, relu, 7×7 average pooling.
pub fn mobilenet_tail() -> ComputationGraph {
    GraphBuilder::new("mobilenet_tail")
        .input("x", TensorShape::chw(1024, 7, 7))
        .conv("conv", "x", 1024, 1024, 1, 1, 0, 1)
        .bn("bn", "conv", 1024)
        .bias("bias", "bn", TensorShape::new(&[(AxisLabel::K, 1024), (AxisLabel::H, 7), (AxisLabel::W, 7)]))
        .relu("relu", "bias")
        .pool("pool", "relu", OpKind::Avgpool, 7, 7)
        .output("pool")
        .build()
}

/// `y = Wx + B` with `W = [[1,2],[3,4]]`, `B = [1,1]`.
pub fn linear_2x2() -> ComputationGraph {
    let mut fc = OperatorNode::new("fc", OpKind::FullyConnected);
    fc.params.push(
        Param::new("weight", TensorShape::new(&[(AxisLabel::K, 2), (AxisLabel::C, 2)])).with_data(vec![1., 2., 3., 4.]),
    );
    fc.params.push(Param::new("bias", vector(2)).with_data(vec![1., 1.]));
    GraphBuilder::new("linear_2x2")
        .input("x", TensorShape::chw(2, 1, 1))
        .node(fc, &["x"])
        .output("fc")
        .build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_validates() {
        let names: Vec<String> = suite().into_iter().map(|g| g.name).collect();
        assert_eq!(names.len(), 6);
    }

    #[test]
    fn tail_param_sizes() {
        let g = mobilenet_tail();
        assert_eq!(g.node("conv").unwrap().param_byte_size(), 4_194_304);
        assert_eq!(g.node("bias").unwrap().param_byte_size(), 200_704);
        assert_eq!(g.node("relu").unwrap().param_byte_size(), 0);
    }
}
