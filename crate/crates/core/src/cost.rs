//! Multiply-accumulate counts used by the partitioner, simulator and
//! distributed planner.

use crate::graph::{infer_output, GraphError, OpKind, OperatorNode, TensorShape};

/// MACs spent per output element of `node`.
pub fn macs_per_output(node: &OperatorNode, inputs: &[TensorShape]) -> u64 {
    let wdims = || node.params.first().map(|p| p.shape.dims()).unwrap_or_default();
    match node.kind {
        OpKind::Conv => wdims().iter().skip(1).product::<usize>() as u64,
        OpKind::Matmul => wdims().get(1).copied().unwrap_or(0) as u64,
        OpKind::FullyConnected => wdims().get(1).copied().unwrap_or(0) as u64 + (node.params.len() > 1) as u64,
        OpKind::Bn | OpKind::Bias | OpKind::Relu | OpKind::Add | OpKind::Mul => 1,
        OpKind::Mac => 2,
        OpKind::ReduceAdd => inputs.len().saturating_sub(1).max(1) as u64,
        OpKind::Maxpool | OpKind::Avgpool => (node.attrs.window * node.attrs.window) as u64,
        OpKind::Globalpool => inputs.first().map(|s| {
            let (_, h, w) = s.grid();
            (h * w) as u64
        }).unwrap_or(0),
        OpKind::LstmCell => {
            let i = inputs.first().map(|s| s.grid().0).unwrap_or(0);
            let h = node.params.get(1).and_then(|p| p.shape.dims().get(1).copied()).unwrap_or(0);
            4 * (i + h) as u64 + 8
        }
        OpKind::Transpose | OpKind::Concat | OpKind::Split => 0,
        OpKind::Cbr | OpKind::Cbrm | OpKind::Cbra => {
            let Some(root) = node.members.first() else { return 0 };
            let mut per = macs_per_output(root, inputs);
            for m in &node.members[1..] {
                if m.kind.is_pool() {
                    per = per * (m.attrs.window * m.attrs.window) as u64 + (m.attrs.window * m.attrs.window) as u64;
                } else {
                    per += 1;
                }
            }
            per
        }
    }
}

/// Total MACs of `node` over its whole output.
pub fn node_macs(node: &OperatorNode, inputs: &[TensorShape]) -> Result<u64, GraphError> {
    let out = infer_output(node, inputs)?;
    Ok(macs_per_output(node, inputs) * out.elements() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn pointwise_conv_macs() {
        let g = fixtures::mobilenet_tail();
        let x = g.shape_of("x").unwrap().clone();
        assert_eq!(node_macs(&g.nodes["conv"], &[x]).unwrap(), 1024 * 1024 * 49);
    }

    #[test]
    fn depthwise_macs() {
        let g = fixtures::mobilenet_block();
        let x = g.shape_of("x").unwrap().clone();
        assert_eq!(node_macs(&g.nodes["dw"], &[x]).unwrap(), 32 * 32 * 32 * 9);
    }
}
