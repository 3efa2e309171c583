//! Two-stage parameter split. Stage 1 spreads an operator's parameters over
//! the P units; stage 2 cuts each unit's share into sequential passes that
//! fit private memory. Axes are tried in the order K, C, R, S. K parts are
//! joined by a layout-level concat; C, R and S parts need a reduceAdd.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AxisLabel, ComputationGraph, GraphError, HardwareDescriptor, OpKind, OperatorNode, Param};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("infeasible split of {node}: {reason}")]
    InfeasibleSplit { node: String, reason: String },
    #[error("unsupported split of {0}")]
    Unsupported(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

const PRIORITY: [AxisLabel; 4] = [AxisLabel::K, AxisLabel::C, AxisLabel::R, AxisLabel::S];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShare {
    pub node: String,
    pub name: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPart {
    pub id: String,
    pub unit: usize,
    /// Sequential pass index within the unit.
    pub pass: usize,
    pub param_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub node_id: String,
    pub stage1_parts: usize,
    pub stage2_parts_per_unit: usize,
    pub split_axis_sequence: Vec<AxisLabel>,
    pub glue_nodes: Vec<String>,
    /// Largest stage-2 part.
    pub per_part_param_bytes: u64,
    /// Largest stage-1 unit share.
    pub per_unit_param_bytes: u64,
    /// Parameter tensors held by unit 0 after stage 1.
    pub unit_shares: Vec<ParamShare>,
    pub parts: Vec<SplitPart>,
}

/// `extent` cut into `n` contiguous, near-equal ranges.
pub fn balanced(extent: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i * extent / n, (i + 1) * extent / n)).collect()
}

/// Root operator and its epilogue members.
fn decompose(node: &OperatorNode) -> (OperatorNode, Vec<OperatorNode>) {
    if node.members.is_empty() {
        (node.clone(), Vec::new())
    } else {
        (node.members[0].clone(), node.members[1..].to_vec())
    }
}

fn weight_dims(root: &OperatorNode) -> Vec<usize> {
    root.params[0].shape.dims()
}

/// Number of independently splittable positions along `axis`. K counts
/// whole groups for grouped convolutions; C is not split when grouped.
fn axis_units(root: &OperatorNode, axis: AxisLabel) -> usize {
    let w = &root.params[0].shape;
    let g = root.attrs.groups.max(1);
    match axis {
        AxisLabel::K if g > 1 => g,
        AxisLabel::C if g > 1 => 0,
        _ => w.extent(axis).unwrap_or(0),
    }
}

fn mark_part(attrs: &mut crate::graph::Attrs, root: &OperatorNode) {
    let dims = weight_dims(root);
    if attrs.full_r.is_none() {
        attrs.full_r = Some(dims.get(2).copied().unwrap_or(1));
        attrs.full_s = Some(dims.get(3).copied().unwrap_or(1));
    }
}

/// Slices the root weight along `axis`, keeping unit positions `[lo, hi)`.
fn slice_root(root: &OperatorNode, axis: AxisLabel, lo: usize, hi: usize) -> OperatorNode {
    let mut out = root.clone();
    mark_part(&mut out.attrs, root);
    let dims = weight_dims(root);
    match axis {
        AxisLabel::K => {
            let g = root.attrs.groups.max(1);
            if g > 1 {
                let q = dims[0] / g;
                out.params[0] = root.params[0].slice(AxisLabel::K, lo * q, hi * q);
                out.attrs.groups = hi - lo;
                out.attrs.c_offset = root.attrs.c_offset + lo * dims[1];
            } else {
                out.params[0] = root.params[0].slice(AxisLabel::K, lo, hi);
            }
            if let Some(b) = root.params.get(1) {
                out.params[1] = b.slice(b.shape.axes[0].label, lo, hi);
            }
        }
        AxisLabel::C => {
            out.params[0] = root.params[0].slice(AxisLabel::C, lo, hi);
            out.attrs.c_offset = root.attrs.c_offset + lo;
        }
        AxisLabel::R => {
            out.params[0] = root.params[0].slice(AxisLabel::R, lo, hi);
            out.attrs.r_offset = root.attrs.r_offset + lo;
        }
        _ => {
            out.params[0] = root.params[0].slice(AxisLabel::S, lo, hi);
            out.attrs.s_offset = root.attrs.s_offset + lo;
        }
    }
    out
}

/// Slices an epilogue's per-channel parameters to output channels `[lo, hi)`.
fn slice_epilogue(m: &OperatorNode, lo: usize, hi: usize, full_k: usize) -> OperatorNode {
    let mut out = m.clone();
    out.params = m.params.iter().map(|p| slice_leading(p, lo, hi, full_k)).collect();
    out
}

fn slice_leading(p: &Param, lo: usize, hi: usize, full_k: usize) -> Param {
    match p.shape.axes.first() {
        Some(a) if a.extent == full_k => p.slice(a.label, lo, hi),
        _ => p.clone(),
    }
}

/// The node a stage-1 or stage-2 K part computes: sliced root plus sliced
/// epilogues, wrapped as a compound when the original was one.
fn k_part(node: &OperatorNode, root: &OperatorNode, epi: &[OperatorNode], lo: usize, hi: usize, id: String) -> OperatorNode {
    let q = weight_dims(root)[0] / axis_units(root, AxisLabel::K).max(1);
    let r = slice_root(root, AxisLabel::K, lo, hi);
    let full_k = weight_dims(root)[0];
    if epi.is_empty() {
        let mut r = r;
        r.id = id;
        return r;
    }
    let mut out = OperatorNode::new(&id, node.kind);
    out.members.push(r);
    out.members.extend(epi.iter().map(|m| slice_epilogue(m, lo * q, hi * q, full_k)));
    out
}

struct Layout {
    a1: AxisLabel,
    a2: AxisLabel,
    r1: Vec<(usize, usize)>,
    /// Stage-2 ranges per unit, relative to the stage-1 part when the axes
    /// coincide, absolute along `a2` otherwise.
    r2: Vec<Vec<(usize, usize)>>,
}

fn choose_axis(root: &OperatorNode, from: usize, want: usize, restrict: Option<(AxisLabel, usize)>) -> Option<(AxisLabel, usize)> {
    let candidates: Vec<(AxisLabel, usize)> = PRIORITY[from..]
        .iter()
        .map(|&a| {
            let e = match restrict {
                Some((ra, len)) if ra == a => len,
                _ => axis_units(root, a),
            };
            (a, e)
        })
        .filter(|(_, e)| *e > 0)
        .collect();
    candidates
        .iter()
        .find(|(_, e)| *e >= want)
        .copied()
        .or_else(|| candidates.iter().copied().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))))
}

fn supported(node: &OperatorNode) -> bool {
    let root = node.root();
    matches!(root.kind, OpKind::Conv | OpKind::Matmul | OpKind::FullyConnected) && !root.params.is_empty()
}

/// Parameter bytes a unit or pass holds for part `p` of the layout.
fn part_bytes(root: &OperatorNode, epi: &[OperatorNode], axes: &[(AxisLabel, usize, usize)]) -> u64 {
    let mut cur = root.clone();
    let mut k_range = None;
    for &(a, lo, hi) in axes {
        let base = if a == AxisLabel::K { k_range.map(|(l, _)| l).unwrap_or(0) } else { 0 };
        if a == AxisLabel::K {
            k_range = Some((base + lo, base + hi));
        }
        cur = slice_root(&cur, a, lo, hi);
    }
    let mut bytes = cur.param_byte_size();
    if axes.iter().all(|(a, _, _)| *a == AxisLabel::K) {
        let (lo, hi) = k_range.unwrap_or((0, axis_units(root, AxisLabel::K)));
        let q = weight_dims(root)[0] / axis_units(root, AxisLabel::K).max(1);
        bytes += epi
            .iter()
            .map(|m| slice_epilogue(m, lo * q, hi * q, weight_dims(root)[0]).param_byte_size())
            .sum::<u64>();
    }
    bytes
}

fn layout_for(node: &OperatorNode, hw: &HardwareDescriptor) -> Result<(Layout, u64, u64), SplitError> {
    let (root, epi) = decompose(node);
    let p = hw.unit_count.max(1);
    let (a1, e1) = choose_axis(&root, 0, p, None)
        .ok_or_else(|| SplitError::Unsupported(format!("{} has no splittable axis", node.id)))?;
    let r1 = balanced(e1, p.min(e1));
    let per_unit = r1
        .iter()
        .map(|&(lo, hi)| part_bytes(&root, &epi, &[(a1, lo, hi)]))
        .max()
        .unwrap_or(0);
    let from = PRIORITY.iter().position(|a| *a == a1).unwrap();
    let mut n2 = per_unit.div_ceil(hw.l2_bytes).max(1) as usize;
    loop {
        let smallest = r1.iter().map(|(lo, hi)| hi - lo).min().unwrap_or(0);
        let Some((a2, e2)) = choose_axis(&root, from, n2, Some((a1, smallest))) else {
            break;
        };
        if e2 < n2 {
            break;
        }
        let r2: Vec<Vec<(usize, usize)>> = r1
            .iter()
            .map(|&(lo, hi)| {
                let e = if a2 == a1 { hi - lo } else { axis_units(&root, a2) };
                balanced(e, n2)
            })
            .collect();
        let worst = r1
            .iter()
            .zip(&r2)
            .flat_map(|(&(lo, hi), parts)| {
                parts
                    .iter()
                    .map(|&(l2, h2)| part_bytes(&root, &epi, &[(a1, lo, hi), (a2, l2, h2)]))
                    .collect::<Vec<_>>()
            })
            .max()
            .unwrap_or(0);
        if worst <= hw.l2_bytes {
            return Ok((Layout { a1, a2, r1, r2 }, per_unit, worst));
        }
        n2 += 1;
    }
    Err(SplitError::InfeasibleSplit {
        node: node.id.clone(),
        reason: format!("no split along K, C, R or S brings every part under {} bytes", hw.l2_bytes),
    })
}

fn part_id(parent: &str, i: usize, j: usize) -> String {
    format!("{parent}#s{i}.{j}")
}

/// Plans the split of `node` without rewriting any graph.
pub fn plan_split(node: &OperatorNode, hw: &HardwareDescriptor) -> Result<SplitPlan, SplitError> {
    if !supported(node) {
        return Err(SplitError::Unsupported(format!("{} ({})", node.id, node.kind)));
    }
    let (layout, per_unit, _) = layout_for(node, hw)?;
    let (root, epi) = decompose(node);
    let Layout { a1, a2, r1, r2 } = &layout;
    let mut axes = vec![*a1];
    let n2 = r2[0].len();
    if n2 > 1 && a2 != a1 {
        axes.push(*a2);
    } else if n2 > 1 {
        axes.push(*a1);
    }
    let reduce = axes.iter().any(|a| *a != AxisLabel::K);

    let mut parts = Vec::new();
    for (i, (&(lo, hi), sub)) in r1.iter().zip(r2).enumerate() {
        for (j, &(l2, h2)) in sub.iter().enumerate() {
            let bytes = part_bytes(&root, &epi, &[(*a1, lo, hi), (*a2, l2, h2)]);
            parts.push(SplitPart { id: part_id(&node.id, i, j), unit: i, pass: j, param_bytes: bytes });
        }
    }

    let mut glue = Vec::new();
    if !reduce {
        glue.push(node.id.clone());
    } else if *a1 == AxisLabel::K {
        glue.extend((0..r1.len()).map(|i| format!("{}#r{i}", node.id)));
        glue.push(node.id.clone());
    } else {
        glue.push(if epi.is_empty() { node.id.clone() } else { format!("{}#r", node.id) });
    }

    let unit0 = if *a1 == AxisLabel::K {
        k_part(node, &root, if reduce { &[] } else { &epi }, r1[0].0, r1[0].1, String::new())
    } else {
        slice_root(&root, *a1, r1[0].0, r1[0].1)
    };
    let mut unit_shares = Vec::new();
    let mut push = |n: &OperatorNode, owner: &str| {
        for p in &n.params {
            unit_shares.push(ParamShare { node: owner.to_string(), name: p.name.clone(), bytes: p.shape.bytes() });
        }
    };
    if unit0.members.is_empty() {
        push(&unit0, &root.id);
    } else {
        for m in &unit0.members {
            push(m, &m.id);
        }
    }

    Ok(SplitPlan {
        node_id: node.id.clone(),
        stage1_parts: r1.len(),
        stage2_parts_per_unit: n2,
        split_axis_sequence: axes,
        glue_nodes: glue,
        per_part_param_bytes: parts.iter().map(|p| p.param_bytes).max().unwrap_or(0),
        per_unit_param_bytes: per_unit,
        unit_shares,
        parts,
    })
}

/// FullyConnected bias moved to an epilogue so reduction parts do not each
/// add it.
fn detach_fc_bias(root: &mut OperatorNode, epi: &mut Vec<OperatorNode>) {
    if root.kind == OpKind::FullyConnected && root.params.len() > 1 {
        let b = root.params.pop().unwrap();
        let mut bias = OperatorNode::new(&format!("{}.bias", root.id), OpKind::Bias);
        bias.params.push(b);
        epi.insert(0, bias);
    }
}

/// Splits node `id` of `graph` and rewrites it into parts plus glue.
pub fn split_operator(
    graph: &ComputationGraph,
    id: &str,
    hw: &HardwareDescriptor,
) -> Result<(SplitPlan, ComputationGraph), SplitError> {
    let mut g = graph.clone();
    g.assign_param_origins();
    let node = g
        .node(id)
        .cloned()
        .ok_or_else(|| SplitError::Graph(GraphError::Validation(format!("no node {id}"))))?;
    let plan = plan_split(&node, hw)?;
    let (layout, _, _) = layout_for(&node, hw)?;
    let (mut root, mut epi) = decompose(&node);
    let reduce = plan.split_axis_sequence.iter().any(|a| *a != AxisLabel::K);
    if reduce {
        detach_fc_bias(&mut root, &mut epi);
    }
    let full_k = weight_dims(&root)[0];
    let q = full_k / axis_units(&root, AxisLabel::K).max(1);
    let sources: Vec<String> = g.producers(id).iter().map(|s| s.to_string()).collect();

    g.edges.retain(|e| e.to != id);
    for e in &mut g.edges {
        if e.from == id {
            e.from = format!("{id}\u{0}");
        }
    }
    g.nodes.remove(id);

    let add = |g: &mut ComputationGraph, n: OperatorNode, from: &[String]| {
        let nid = n.id.clone();
        g.add_node(n);
        for f in from {
            g.connect(f, &nid);
        }
    };
    let Layout { a1, a2, r1, r2 } = &layout;
    let rooted = |lo: usize, hi: usize, l2: usize, h2: usize, pid: String| {
        let mut n = slice_root(&slice_root(&root, *a1, lo, hi), *a2, l2, h2);
        n.id = pid;
        n
    };

    if !reduce {
        let mut tails = Vec::new();
        for (i, (&(lo, _), sub)) in r1.iter().zip(r2).enumerate() {
            for (j, &(l2, h2)) in sub.iter().enumerate() {
                let pid = part_id(id, i, j);
                let n = k_part(&node, &root, &epi, lo + l2, lo + h2, pid.clone());
                add(&mut g, n, &sources);
                tails.push(pid);
            }
        }
        let mut cat = OperatorNode::new(id, OpKind::Concat);
        cat.attrs.layout_join = true;
        add(&mut g, cat, &tails);
    } else if *a1 == AxisLabel::K {
        let mut tails = Vec::new();
        for (i, (&(lo, hi), sub)) in r1.iter().zip(r2).enumerate() {
            let mut ids = Vec::new();
            for (j, &(l2, h2)) in sub.iter().enumerate() {
                let pid = part_id(id, i, j);
                add(&mut g, rooted(lo, hi, l2, h2, pid.clone()), &sources);
                ids.push(pid);
            }
            let rid = format!("{id}#r{i}");
            add(&mut g, OperatorNode::new(&rid, OpKind::ReduceAdd), &ids);
            let mut prev = rid;
            for (m, e) in epi.iter().enumerate() {
                let mut n = slice_epilogue(e, lo * q, hi * q, full_k);
                n.id = format!("{id}#epi{i}.{m}");
                let nid = n.id.clone();
                add(&mut g, n, &[prev]);
                prev = nid;
            }
            tails.push(prev);
        }
        let mut cat = OperatorNode::new(id, OpKind::Concat);
        cat.attrs.layout_join = true;
        add(&mut g, cat, &tails);
    } else {
        let mut ids = Vec::new();
        for (i, (&(lo, hi), sub)) in r1.iter().zip(r2).enumerate() {
            for (j, &(l2, h2)) in sub.iter().enumerate() {
                let pid = part_id(id, i, j);
                add(&mut g, rooted(lo, hi, l2, h2, pid.clone()), &sources);
                ids.push(pid);
            }
        }
        let rid = if epi.is_empty() { id.to_string() } else { format!("{id}#r") };
        add(&mut g, OperatorNode::new(&rid, OpKind::ReduceAdd), &ids);
        let mut prev = rid;
        for (m, e) in epi.iter().enumerate() {
            let mut n = e.clone();
            n.id = if m + 1 == epi.len() { id.to_string() } else { format!("{id}#epi{m}") };
            let nid = n.id.clone();
            add(&mut g, n, &[prev]);
            prev = nid;
        }
    }

    for e in &mut g.edges {
        if e.from == format!("{id}\u{0}") {
            e.from = id.to_string();
        }
    }
    g.validate()?;
    Ok((plan, g))
}
