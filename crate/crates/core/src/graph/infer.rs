//! Per-operator shape inference.

use super::node::{OpKind, OperatorNode};
use super::shape::{AxisLabel, TensorShape};
use super::GraphError;

fn invalid<T>(node: &OperatorNode, msg: impl Into<String>) -> Result<T, GraphError> {
    Err(GraphError::Validation(format!("node {}: {}", node.id, msg.into())))
}

fn arity(node: &OperatorNode, inputs: &[TensorShape], n: usize) -> Result<(), GraphError> {
    if inputs.len() != n {
        return invalid(node, format!("{} expects {} input(s), got {}", node.kind, n, inputs.len()));
    }
    Ok(())
}

fn param<'a>(node: &'a OperatorNode, i: usize) -> Result<&'a TensorShape, GraphError> {
    match node.params.get(i) {
        Some(p) => Ok(&p.shape),
        None => invalid(node, format!("missing parameter #{i}")),
    }
}

fn axis(node: &OperatorNode, shape: &TensorShape, label: AxisLabel) -> Result<usize, GraphError> {
    match shape.extent(label) {
        Some(e) => Ok(e),
        None => invalid(node, format!("shape {shape} lacks axis {label}")),
    }
}

fn feature_map(node: &OperatorNode, s: &TensorShape) -> Result<(usize, usize, usize), GraphError> {
    if s.rank() != 3 {
        return invalid(node, format!("expects a C×H×W feature map, got {s}"));
    }
    Ok(s.grid())
}

/// Per-channel or full-extent broadcast parameter check.
fn broadcast_param(node: &OperatorNode, input: &TensorShape, p: &TensorShape) -> Result<(), GraphError> {
    let (c, _, _) = input.grid();
    if p.rank() == 1 && p.elements() == c {
        return Ok(());
    }
    if p.same_extents(input) || p.dims() == input.dims() {
        return Ok(());
    }
    invalid(node, format!("parameter {p} does not broadcast over input {input}"))
}

fn window_out(node: &OperatorNode, extent: usize, pad: usize, window: usize, stride: usize) -> Result<usize, GraphError> {
    if stride == 0 {
        return invalid(node, "stride must be positive");
    }
    if extent + 2 * pad < window {
        return invalid(node, format!("window {window} larger than padded extent {}", extent + 2 * pad));
    }
    Ok((extent + 2 * pad - window) / stride + 1)
}

/// Infers the output shape of `node` from its ordered input shapes.
pub fn infer_output(node: &OperatorNode, inputs: &[TensorShape]) -> Result<TensorShape, GraphError> {
    for p in node.all_params() {
        p.shape.validate()?;
    }
    let dtype = inputs.first().map(|s| s.dtype).unwrap_or_default();
    let out = match node.kind {
        OpKind::Conv => {
            arity(node, inputs, 1)?;
            let (c, h, w) = feature_map(node, &inputs[0])?;
            let wt = param(node, 0)?;
            let k = axis(node, wt, AxisLabel::K)?;
            let wc = axis(node, wt, AxisLabel::C)?;
            let r = node.attrs.full_r.unwrap_or(axis(node, wt, AxisLabel::R)?);
            let s = node.attrs.full_s.unwrap_or(axis(node, wt, AxisLabel::S)?);
            let g = node.attrs.groups.max(1);
            if k % g != 0 {
                return invalid(node, format!("K={k} not divisible by groups={g}"));
            }
            let reads = node.attrs.c_offset + g * wc;
            let split_part = node.attrs.full_r.is_some();
            if (split_part && reads > c) || (!split_part && reads != c) {
                return invalid(node, format!("kernel reads {reads} channels, input has {c}"));
            }
            let oh = window_out(node, h, node.attrs.pad, r, node.attrs.stride)?;
            let ow = window_out(node, w, node.attrs.pad, s, node.attrs.stride)?;
            TensorShape::chw(k, oh, ow)
        }
        OpKind::Matmul => {
            arity(node, inputs, 1)?;
            let x = &inputs[0];
            if x.rank() != 2 {
                return invalid(node, format!("matmul expects a 2-D input, got {x}"));
            }
            let (i, m, _) = x.grid();
            let wt = param(node, 0)?;
            let n = axis(node, wt, AxisLabel::K)?;
            let wc = axis(node, wt, AxisLabel::C)?;
            if node.attrs.c_offset + wc > i || (node.attrs.c_offset == 0 && node.attrs.full_r.is_none() && wc != i) {
                return invalid(node, format!("weight inner extent {wc} mismatches input {x}"));
            }
            TensorShape::seq(m, n)
        }
        OpKind::FullyConnected => {
            arity(node, inputs, 1)?;
            let n = inputs[0].elements();
            let wt = param(node, 0)?;
            let k = axis(node, wt, AxisLabel::K)?;
            let wc = axis(node, wt, AxisLabel::C)?;
            if node.attrs.c_offset + wc > n || (node.attrs.c_offset == 0 && node.attrs.full_r.is_none() && wc != n) {
                return invalid(node, format!("weight inner extent {wc} mismatches {n} inputs"));
            }
            if let Some(b) = node.params.get(1) {
                if b.shape.elements() != k {
                    return invalid(node, "bias length must equal K");
                }
            }
            TensorShape::chw(k, 1, 1)
        }
        OpKind::Bn => {
            arity(node, inputs, 1)?;
            let (c, _, _) = inputs[0].grid();
            for i in 0..2 {
                if param(node, i)?.elements() != c {
                    return invalid(node, format!("bn parameter #{i} must have {c} elements"));
                }
            }
            inputs[0].clone()
        }
        OpKind::Bias => {
            arity(node, inputs, 1)?;
            broadcast_param(node, &inputs[0], param(node, 0)?)?;
            inputs[0].clone()
        }
        OpKind::Relu => {
            arity(node, inputs, 1)?;
            inputs[0].clone()
        }
        OpKind::Add | OpKind::Mul => {
            if inputs.len() == 1 {
                broadcast_param(node, &inputs[0], param(node, 0)?)?;
            } else {
                arity(node, inputs, 2)?;
                if !inputs[0].same_extents(&inputs[1]) {
                    return invalid(node, format!("operand shapes {} and {} differ", inputs[0], inputs[1]));
                }
            }
            inputs[0].clone()
        }
        OpKind::Mac => {
            arity(node, inputs, 3)?;
            if !inputs.iter().all(|s| s.same_extents(&inputs[0])) {
                return invalid(node, "mac operands must share one shape");
            }
            inputs[0].clone()
        }
        OpKind::Maxpool | OpKind::Avgpool => {
            arity(node, inputs, 1)?;
            let (c, h, w) = feature_map(node, &inputs[0])?;
            let k = node.attrs.window;
            if k == 0 {
                return invalid(node, "pooling window must be positive");
            }
            let oh = window_out(node, h, 0, k, node.attrs.stride)?;
            let ow = window_out(node, w, 0, k, node.attrs.stride)?;
            TensorShape::chw(c, oh, ow)
        }
        OpKind::Globalpool => {
            arity(node, inputs, 1)?;
            let (c, _, _) = feature_map(node, &inputs[0])?;
            TensorShape::chw(c, 1, 1)
        }
        OpKind::Transpose => {
            arity(node, inputs, 1)?;
            let x = &inputs[0];
            let g = node.attrs.groups;
            if g > 1 {
                let (c, _, _) = x.grid();
                if c % g != 0 {
                    return invalid(node, format!("channel shuffle: {c} channels not divisible by {g}"));
                }
                x.clone()
            } else {
                if x.rank() < 2 {
                    return invalid(node, "transpose needs rank ≥ 2");
                }
                let mut out = x.clone();
                let n = out.rank();
                let (a, b) = (out.axes[n - 2].extent, out.axes[n - 1].extent);
                out.axes[n - 2].extent = b;
                out.axes[n - 1].extent = a;
                out
            }
        }
        OpKind::Concat => {
            if inputs.is_empty() {
                return invalid(node, "concat needs at least one input");
            }
            let first = &inputs[0];
            let ax = first.channel_axis();
            let mut total = 0;
            for s in inputs {
                let off = |t: &TensorShape| {
                    let mut d = t.dims();
                    d.remove(ax);
                    d
                };
                if s.rank() != first.rank() || s.channel_axis() != ax || off(s) != off(first) {
                    return invalid(node, format!("concat operands {first} and {s} differ off the channel axis"));
                }
                total += s.axes[ax].extent;
            }
            let mut out = first.clone();
            out.axes[ax].extent = total;
            out
        }
        OpKind::Split => {
            arity(node, inputs, 1)?;
            let x = &inputs[0];
            let ax = x.channel_axis();
            let extent = x.axes[ax].extent;
            let start = node.attrs.start.unwrap_or(0);
            let end = node.attrs.end.unwrap_or(extent);
            if start >= end || end > extent {
                return invalid(node, format!("split range [{start}, {end}) outside 0..{extent}"));
            }
            let mut out = x.clone();
            out.axes[ax].extent = end - start;
            out
        }
        OpKind::ReduceAdd => {
            if inputs.is_empty() {
                return invalid(node, "reduceAdd needs at least one input");
            }
            if !inputs.iter().all(|s| s.same_extents(&inputs[0])) {
                return invalid(node, "reduceAdd operands must share one shape");
            }
            inputs[0].clone()
        }
        OpKind::LstmCell => {
            arity(node, inputs, 1)?;
            let x = &inputs[0];
            if x.rank() != 2 {
                return invalid(node, format!("lstmCell expects seqLen×hiddenDim, got {x}"));
            }
            let (i, len, _) = x.grid();
            let wx = param(node, 0)?;
            let wh = param(node, 1)?;
            let b = param(node, 2)?;
            let gates = axis(node, wx, AxisLabel::K)?;
            if gates % 4 != 0 {
                return invalid(node, "gate extent must be 4×hidden");
            }
            let hidden = gates / 4;
            if axis(node, wx, AxisLabel::C)? != i
                || axis(node, wh, AxisLabel::K)? != gates
                || axis(node, wh, AxisLabel::C)? != hidden
                || b.elements() != gates
            {
                return invalid(node, "lstmCell parameter shapes inconsistent");
            }
            TensorShape::seq(len, hidden)
        }
        OpKind::Cbr | OpKind::Cbrm | OpKind::Cbra => {
            if node.members.len() < 2 {
                return invalid(node, "compound node needs at least two members");
            }
            let mut cur = infer_output(&node.members[0], inputs)?;
            for m in &node.members[1..] {
                if !m.members.is_empty() || m.kind.is_compound() {
                    return invalid(node, "compound members must be primitive");
                }
                cur = infer_output(m, std::slice::from_ref(&cur))?;
            }
            cur
        }
    };
    Ok(out.with_dtype(dtype))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::node::Attrs;

    fn conv(k: usize, c: usize, r: usize, stride: usize, pad: usize) -> OperatorNode {
        OperatorNode::new("c", OpKind::Conv)
            .with_attrs(Attrs::conv(stride, pad))
            .with_param(
                "w",
                TensorShape::new(&[(AxisLabel::K, k), (AxisLabel::C, c), (AxisLabel::R, r), (AxisLabel::S, r)]),
            )
    }

    #[test]
    fn conv_output_geometry() {
        let out = infer_output(&conv(1024, 1024, 1, 1, 0), &[TensorShape::chw(1024, 7, 7)]).unwrap();
        assert_eq!(out.dims(), vec![1024, 7, 7]);
        let out = infer_output(&conv(8, 3, 3, 2, 1), &[TensorShape::chw(3, 16, 16)]).unwrap();
        assert_eq!(out.dims(), vec![8, 8, 8]);
    }

    #[test]
    fn conv_channel_mismatch() {
        assert!(infer_output(&conv(8, 4, 1, 1, 0), &[TensorShape::chw(3, 4, 4)]).is_err());
    }

    #[test]
    fn pool_floor_semantics() {
        let p = OperatorNode::new("p", OpKind::Avgpool).with_attrs(Attrs::pool(2, 2));
        let out = infer_output(&p, &[TensorShape::chw(4, 7, 7)]).unwrap();
        assert_eq!(out.dims(), vec![4, 3, 3]);
    }

    #[test]
    fn shuffle_requires_divisible_channels() {
        let t = OperatorNode::new("t", OpKind::Transpose).with_attrs(Attrs { groups: 3, ..Attrs::default() });
        assert!(infer_output(&t, &[TensorShape::chw(4, 2, 2)]).is_err());
    }
}
