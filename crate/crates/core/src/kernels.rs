//! Float32 operator kernels. Every windowed or elementwise kernel can compute
//! a sub-region of its output; the per-element arithmetic is identical to the
//! whole-tensor path, so partitioned execution is bit-exact.

use crate::graph::{infer_output, ElementType, GraphError, OpKind, OperatorNode};
use crate::tensor::{grid_index, ParamValues, Region, Tensor};

/// Evaluates `node` over its whole output.
pub fn evaluate(node: &OperatorNode, inputs: &[&Tensor], values: &mut ParamValues) -> Result<Tensor, GraphError> {
    let shapes: Vec<_> = inputs.iter().map(|t| t.shape.clone()).collect();
    let out_shape = infer_output(node, &shapes)?;
    let mut out = Tensor::zeros(out_shape);
    let region = Region::full(&out.shape);
    evaluate_region(node, inputs, values, &region, &mut out)?;
    Ok(out)
}

/// Whether `evaluate_region` honours sub-regions for this kind. Other kinds
/// always write their whole output.
pub fn supports_regions(node: &OperatorNode) -> bool {
    !matches!(
        node.kind,
        OpKind::Transpose | OpKind::Concat | OpKind::Split | OpKind::LstmCell | OpKind::FullyConnected
    )
}

/// Evaluates `node` into `region` of the pre-shaped `out`.
pub fn evaluate_region(
    node: &OperatorNode,
    inputs: &[&Tensor],
    values: &mut ParamValues,
    region: &Region,
    out: &mut Tensor,
) -> Result<(), GraphError> {
    for t in inputs {
        if t.shape.dtype != ElementType::Float32 {
            return Err(GraphError::Unsupported(format!("node {}: int8 execution", node.id)));
        }
    }
    let p = |values: &mut ParamValues, i: usize| -> Result<Vec<f32>, GraphError> {
        let param = node
            .params
            .get(i)
            .ok_or_else(|| GraphError::Validation(format!("node {} lacks parameter #{i}", node.id)))?;
        values.resolve(param)
    };
    match node.kind {
        OpKind::Conv => {
            let w = p(values, 0)?;
            conv(node, inputs[0], &w, region, out);
        }
        OpKind::Matmul => {
            let w = p(values, 0)?;
            matmul(node, inputs[0], &w, region, out);
        }
        OpKind::FullyConnected => {
            let w = p(values, 0)?;
            let b = if node.params.len() > 1 { Some(p(values, 1)?) } else { None };
            fully_connected(node, inputs[0], &w, b.as_deref(), out);
        }
        OpKind::Bn => {
            let scale = p(values, 0)?;
            let shift = p(values, 1)?;
            map_region(inputs[0], region, out, |c, _, v| v * scale[c] + shift[c]);
        }
        OpKind::Bias | OpKind::Add | OpKind::Mul if inputs.len() == 1 => {
            let b = p(values, 0)?;
            let per_channel = b.len() == inputs[0].grid().0 && node.params[0].shape.rank() == 1;
            let x = inputs[0];
            let mul = node.kind == OpKind::Mul;
            for_region(region, |c, h, w| {
                let i = x.index(c, h, w);
                let bv = if per_channel { b[c] } else { b[i] };
                out.data[i] = if mul { x.data[i] * bv } else { x.data[i] + bv };
            });
        }
        OpKind::Add | OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let mul = node.kind == OpKind::Mul;
            for_region(region, |c, h, w| {
                let i = a.index(c, h, w);
                out.data[i] = if mul { a.data[i] * b.data[i] } else { a.data[i] + b.data[i] };
            });
        }
        OpKind::Bias => unreachable!("bias always has one input"),
        OpKind::Relu => map_region(inputs[0], region, out, |_, _, v| v.max(0.0)),
        OpKind::Mac => {
            let (a, b, c) = (inputs[0], inputs[1], inputs[2]);
            for_region(region, |ch, h, w| {
                let i = a.index(ch, h, w);
                out.data[i] = a.data[i] * b.data[i] + c.data[i];
            });
        }
        OpKind::ReduceAdd => {
            for_region(region, |c, h, w| {
                let i = inputs[0].index(c, h, w);
                let mut acc = 0.0f32;
                for t in inputs {
                    acc += t.data[i];
                }
                out.data[i] = acc;
            });
        }
        OpKind::Maxpool | OpKind::Avgpool => pool(node, inputs[0], region, out),
        OpKind::Globalpool => {
            let x = inputs[0];
            let (_, h, w) = x.grid();
            for c in region.c.clone() {
                let mut acc = 0.0f32;
                for ih in 0..h {
                    for iw in 0..w {
                        acc += x.data[x.index(c, ih, iw)];
                    }
                }
                out.data[c] = acc / (h * w) as f32;
            }
        }
        OpKind::Transpose => transpose(node, inputs[0], out),
        OpKind::Concat => {
            let mut off = 0;
            for t in inputs {
                let (tc, th, tw) = t.grid();
                for c in 0..tc {
                    for h in 0..th {
                        for w in 0..tw {
                            let o = out.index(off + c, h, w);
                            out.data[o] = t.data[t.index(c, h, w)];
                        }
                    }
                }
                off += tc;
            }
        }
        OpKind::Split => {
            let x = inputs[0];
            let start = node.attrs.start.unwrap_or(0);
            let (oc, oh, ow) = out.grid();
            for c in 0..oc {
                for h in 0..oh {
                    for w in 0..ow {
                        let o = out.index(c, h, w);
                        out.data[o] = x.data[x.index(start + c, h, w)];
                    }
                }
            }
        }
        OpKind::LstmCell => {
            let wx = p(values, 0)?;
            let wh = p(values, 1)?;
            let b = p(values, 2)?;
            lstm(inputs[0], &wx, &wh, &b, out);
        }
        OpKind::Cbr | OpKind::Cbrm | OpKind::Cbra => compound(node, inputs, values, region, out)?,
    }
    Ok(())
}

fn for_region(region: &Region, mut f: impl FnMut(usize, usize, usize)) {
    for c in region.c.clone() {
        for h in region.h.clone() {
            for w in region.w.clone() {
                f(c, h, w);
            }
        }
    }
}

fn map_region(x: &Tensor, region: &Region, out: &mut Tensor, f: impl Fn(usize, usize, f32) -> f32) {
    for_region(region, |c, h, w| {
        let i = x.index(c, h, w);
        out.data[i] = f(c, i, x.data[i]);
    });
}

fn conv(node: &OperatorNode, x: &Tensor, w: &[f32], region: &Region, out: &mut Tensor) {
    let dims = node.params[0].shape.dims();
    let (k_total, cw, rw, sw) = (dims[0], dims[1], dims[2], dims[3]);
    let a = &node.attrs;
    let groups = a.groups.max(1);
    let k_per_group = k_total / groups;
    let (_, h, wd) = x.grid();
    let (_, oh_n, ow_n) = out.grid();
    let (stride, pad) = (a.stride as isize, a.pad as isize);
    for k in region.c.clone() {
        let cbase = a.c_offset + (k / k_per_group) * cw;
        for oh in region.h.clone() {
            for ow in region.w.clone() {
                let mut acc = 0.0f32;
                for c in 0..cw {
                    let xc = (cbase + c) * h * wd;
                    for r in 0..rw {
                        let ih = oh as isize * stride + (a.r_offset + r) as isize - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let wrow = ((k * cw + c) * rw + r) * sw;
                        let xrow = xc + ih as usize * wd;
                        for s in 0..sw {
                            let iw = ow as isize * stride + (a.s_offset + s) as isize - pad;
                            if iw < 0 || iw >= wd as isize {
                                continue;
                            }
                            acc += w[wrow + s] * x.data[xrow + iw as usize];
                        }
                    }
                }
                out.data[(k * oh_n + oh) * ow_n + ow] = acc;
            }
        }
    }
}

fn matmul(node: &OperatorNode, x: &Tensor, w: &[f32], region: &Region, out: &mut Tensor) {
    let dims = node.params[0].shape.dims();
    let cw = dims[1];
    let (i_n, _, _) = x.grid();
    let (n_n, _, _) = out.grid();
    let off = node.attrs.c_offset;
    for n in region.c.clone() {
        for m in region.h.clone() {
            let mut acc = 0.0f32;
            for c in 0..cw {
                acc += w[n * cw + c] * x.data[m * i_n + off + c];
            }
            out.data[m * n_n + n] = acc;
        }
    }
}

fn fully_connected(node: &OperatorNode, x: &Tensor, w: &[f32], b: Option<&[f32]>, out: &mut Tensor) {
    let dims = node.params[0].shape.dims();
    let (k_n, cw) = (dims[0], dims[1]);
    let off = node.attrs.c_offset;
    for k in 0..k_n {
        let mut acc = 0.0f32;
        for c in 0..cw {
            acc += w[k * cw + c] * x.data[off + c];
        }
        if let Some(b) = b {
            acc += b[k];
        }
        out.data[k] = acc;
    }
}

fn pool(node: &OperatorNode, x: &Tensor, region: &Region, out: &mut Tensor) {
    let k = node.attrs.window;
    let s = node.attrs.stride;
    let is_max = node.kind == OpKind::Maxpool;
    for_region(region, |c, oh, ow| {
        let mut acc = if is_max { f32::NEG_INFINITY } else { 0.0 };
        for i in 0..k {
            for j in 0..k {
                let v = x.data[x.index(c, oh * s + i, ow * s + j)];
                if is_max {
                    acc = acc.max(v);
                } else {
                    acc += v;
                }
            }
        }
        if !is_max {
            acc /= (k * k) as f32;
        }
        let o = out.index(c, oh, ow);
        out.data[o] = acc;
    });
}

fn transpose(node: &OperatorNode, x: &Tensor, out: &mut Tensor) {
    let g = node.attrs.groups;
    if g > 1 {
        // Channel shuffle: view C as g×(C/g) and transpose to (C/g)×g.
        let (c, h, w) = x.grid();
        let per = c / g;
        let plane = h * w;
        for src in 0..c {
            let (gi, j) = (src / per, src % per);
            let dst = j * g + gi;
            out.data[dst * plane..(dst + 1) * plane].copy_from_slice(&x.data[src * plane..(src + 1) * plane]);
        }
    } else {
        let dims = x.shape.dims();
        let n = dims.len();
        let (rows, cols) = (dims[n - 2], dims[n - 1]);
        let batch: usize = dims[..n - 2].iter().product();
        for b in 0..batch {
            let base = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out.data[base + c * rows + r] = x.data[base + r * cols + c];
                }
            }
        }
    }
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Gate order i, f, g, o; zero initial state.
fn lstm(x: &Tensor, wx: &[f32], wh: &[f32], b: &[f32], out: &mut Tensor) {
    let (input, len, _) = x.grid();
    let gates = b.len();
    let hidden = gates / 4;
    let mut h = vec![0.0f32; hidden];
    let mut c = vec![0.0f32; hidden];
    let mut z = vec![0.0f32; gates];
    for t in 0..len {
        let xt = &x.data[t * input..(t + 1) * input];
        for (g, zg) in z.iter_mut().enumerate() {
            let mut acc = b[g];
            for i in 0..input {
                acc += wx[g * input + i] * xt[i];
            }
            for j in 0..hidden {
                acc += wh[g * hidden + j] * h[j];
            }
            *zg = acc;
        }
        for j in 0..hidden {
            let i_g = sigmoid(z[j]);
            let f_g = sigmoid(z[hidden + j]);
            let g_g = z[2 * hidden + j].tanh();
            let o_g = sigmoid(z[3 * hidden + j]);
            c[j] = f_g * c[j] + i_g * g_g;
            h[j] = o_g * c[j].tanh();
        }
        out.data[t * hidden..(t + 1) * hidden].copy_from_slice(&h);
    }
}

/// Runs the member chain over just the input window the requested output
/// region depends on.
fn compound(
    node: &OperatorNode,
    inputs: &[&Tensor],
    values: &mut ParamValues,
    region: &Region,
    out: &mut Tensor,
) -> Result<(), GraphError> {
    let members = &node.members;
    let pool_at = members.iter().position(|m| m.kind.is_pool()).unwrap_or(members.len());
    let pre_region = match members.get(pool_at) {
        Some(pool) => {
            let (k, s) = (pool.attrs.window, pool.attrs.stride);
            if region.elements() == 0 {
                return Ok(());
            }
            Region {
                c: region.c.clone(),
                h: region.h.start * s..(region.h.end - 1) * s + k,
                w: region.w.start * s..(region.w.end - 1) * s + k,
            }
        }
        None => region.clone(),
    };
    let mut cur_shape = infer_output(&members[0], &inputs.iter().map(|t| t.shape.clone()).collect::<Vec<_>>())?;
    let mut cur = Tensor::zeros(cur_shape.clone());
    evaluate_region(&members[0], inputs, values, &pre_region, &mut cur)?;
    for (i, m) in members.iter().enumerate().skip(1) {
        let reg = if i < pool_at { &pre_region } else { region };
        cur_shape = infer_output(m, std::slice::from_ref(&cur_shape))?;
        let mut next = Tensor::zeros(cur_shape.clone());
        evaluate_region(m, &[&cur], values, reg, &mut next)?;
        cur = next;
    }
    for_region(region, |c, h, w| {
        let i = grid_index(&out.shape, c, h, w);
        out.data[i] = cur.data[i];
    });
    Ok(())
}
