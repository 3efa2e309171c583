//! Plan execution: numerics checked against the reference interpreter, and
//! a per-unit cycle model over LRU caches in front of shared memory and DDR.

use std::collections::HashMap;

use crate::cost::macs_per_output;
use crate::graph::{infer_output, ComputationGraph, HardwareDescriptor, OpKind, OperatorNode, TensorShape};
use crate::kernels::{self, supports_regions};
use crate::layout::{apply_layout, derive_access_pattern, restore_layout, AccessPattern, PatternKind, Placement, Visit};
use crate::partition::{input_span, window, WorkItem};
use crate::tensor::{grid_index, ParamValues, Tensor};

use super::cache::{CacheGeometry, CacheState};
use super::memory::Arena;
use super::plan::{AllocOp, ExecutionPlan, MemoryLevel};
use super::reference::{check_inputs, max_abs_diff, TensorMap};
use super::report::{Comparison, LayerProfile, MemoryProfile, ProfileReport, Totals, COST_MODEL, REPORT_FORMAT_VERSION};
use super::SimError;

/// Equivalence tolerance, max-abs.
pub const TOLERANCE: f32 = 1e-5;

/// Runs the plan's numerics and returns the graph outputs.
pub fn execute_plan_numeric(plan: &ExecutionPlan, graph: &ComputationGraph, inputs: &TensorMap) -> Result<TensorMap, SimError> {
    plan.validate(graph)?;
    check_inputs(graph, inputs)?;
    let mut values = ParamValues::new(plan.seed);
    let mut env: TensorMap = inputs.clone();
    for layer in &plan.layers {
        for task in &layer.tasks {
            let node = &graph.nodes[&task.node];
            let producers = graph.producers(&task.node);
            let mut out = match env.remove(&task.node) {
                Some(t) => t,
                None => {
                    let shapes: Vec<TensorShape> = producers.iter().map(|p| env[*p].shape.clone()).collect();
                    Tensor::zeros(infer_output(node, &shapes)?)
                }
            };
            let operands: Vec<&Tensor> = producers.iter().map(|p| &env[*p]).collect();
            match task.work {
                Some(item) if supports_regions(node) => {
                    kernels::evaluate_region(node, &operands, &mut values, &item.region(), &mut out)?
                }
                _ => out = kernels::evaluate(node, &operands, &mut values)?,
            }
            env.insert(task.node.clone(), out);
        }
        if let Some(l) = &layer.layout {
            let t = &env[&l.producer];
            let restored = restore_layout(&apply_layout(t, l), l);
            env.insert(l.producer.clone(), restored);
        }
    }
    Ok(graph.outputs.iter().map(|o| (o.clone(), env[o].clone())).collect())
}

fn identity_pattern(node: &OperatorNode, input: &TensorShape) -> AccessPattern {
    AccessPattern { node_id: node.id.clone(), kind: PatternKind::Identity, input: input.clone(), replication: (0, 0) }
}

fn elementwise(kind: OpKind) -> bool {
    matches!(kind, OpKind::Bn | OpKind::Bias | OpKind::Relu | OpKind::Add | OpKind::Mul | OpKind::Mac | OpKind::ReduceAdd)
}

/// Input channels a task reads; `None` means all of them.
fn channel_range(node: &OperatorNode, item: &WorkItem, in_c: usize) -> Option<(usize, usize)> {
    let root = node.root();
    if root.kind == OpKind::Conv {
        let dims = root.params.first()?.shape.dims();
        let (k, wc) = (dims[0], dims[1]);
        let g = root.attrs.groups.max(1);
        let (lo, hi) = if g == 1 {
            (root.attrs.c_offset, root.attrs.c_offset + wc)
        } else {
            let kpg = (k / g).max(1);
            (item.k.0 / kpg * wc, item.k.1.div_ceil(kpg) * wc)
        };
        return Some((lo.min(in_c), hi.min(in_c)));
    }
    if elementwise(root.kind) || root.kind.is_pool() || root.kind == OpKind::Globalpool {
        return Some(item.k);
    }
    None
}

/// Reads of one input that a task performs, in order.
fn task_visits<'a>(
    visits: &'a [Visit],
    pattern: &AccessPattern,
    derived: bool,
    node: &OperatorNode,
    item: Option<&WorkItem>,
) -> Vec<usize> {
    let Some(item) = item else {
        return (0..visits.len()).collect();
    };
    let (in_c, _, in_w) = pattern.input.grid();
    let chans = channel_range(node, item, in_c);
    let spatial = derived || elementwise(node.root().kind);
    let (_, s, stride) = window(node);
    let pad = node.root().attrs.pad;
    let cols = input_span(item.w, s, stride, pad, in_w);
    let row_panel = pattern.kind == PatternKind::RowPanel;
    visits
        .iter()
        .enumerate()
        .filter(|(_, v)| {
            if let Some((lo, hi)) = chans {
                if v.c < lo || v.c >= hi {
                    return false;
                }
            }
            if !spatial {
                return true;
            }
            if v.orow < item.h.0 || v.orow >= item.h.1 {
                return false;
            }
            match v.ocol {
                Some(x) => x >= item.w.0 && x < item.w.1,
                None => row_panel || (v.w >= cols.0 && v.w < cols.1),
            }
        })
        .map(|(i, _)| i)
        .collect()
}

struct LayoutCache {
    consumer: String,
    kind: PatternKind,
    placement: Placement,
    visits: Vec<Visit>,
}

fn distinct_lines(mut lines: Vec<u64>) -> u64 {
    lines.sort_unstable();
    lines.dedup();
    lines.len() as u64
}

/// Performance simulation of a plan. Independent of input values.
pub fn simulate_plan(plan: &ExecutionPlan, graph: &ComputationGraph) -> Result<ProfileReport, SimError> {
    plan.validate(graph)?;
    let hw: &HardwareDescriptor = &plan.hw;
    let units = hw.unit_count;
    let line = hw.cache_line_bytes.max(1);
    let mut caches: Vec<CacheState> = (0..units).map(|_| CacheState::new(CacheGeometry::of(hw))).collect();
    let mut arena = Arena::new(hw, &plan.pool_warm);
    arena.replay(&plan.prologue)?;
    let mut layouts: HashMap<String, LayoutCache> = HashMap::new();
    let mut layers = Vec::with_capacity(plan.layers.len());
    let mut totals = Totals::default();
    let mut peak_l2 = 0u64;
    let mut halo_bytes = 0u64;

    for layer in &plan.layers {
        let frees: Vec<_> = layer.alloc_events.iter().filter(|e| e.op == AllocOp::Release).cloned().collect();
        let allocs: Vec<_> = layer.alloc_events.iter().filter(|e| e.op != AllocOp::Release).cloned().collect();
        arena.replay(&allocs)?;
        if let Some(l) = &layer.layout {
            let pattern = l.pattern();
            let visits = pattern.visits();
            layouts.insert(
                l.producer.clone(),
                LayoutCache { consumer: l.consumer.clone(), kind: l.kind.pattern, placement: l.placement(), visits },
            );
        }
        let mut prof = LayerProfile::new(&layer.node, units);
        let mut unit_macs = vec![0u64; units];
        let mut visit_cache: HashMap<(String, usize), (AccessPattern, bool, Vec<Visit>)> = HashMap::new();
        for task in &layer.tasks {
            let node = &graph.nodes[&task.node];
            if node.kind == OpKind::Concat && node.attrs.layout_join {
                continue;
            }
            let producers = graph.producers(&task.node);
            let in_shapes: Vec<TensorShape> = producers.iter().map(|p| graph.shape_of(p).cloned().unwrap()).collect();
            let out_shape = graph.shape_of(&task.node).cloned().unwrap();
            let (oc, oh, ow) = out_shape.grid();
            let item = task.work.unwrap_or(WorkItem { k: (0, oc), h: (0, oh), w: (0, ow) });
            let u = task.unit;
            unit_macs[u] += item.elements() as u64 * macs_per_output(node, &in_shapes);
            let (h0, m0) = (caches[u].counters.hits, caches[u].counters.misses());
            let mut stall = 0u64;

            for (idx, p) in producers.iter().enumerate() {
                let key = (task.node.clone(), idx);
                if !visit_cache.contains_key(&key) {
                    let (pattern, derived) = match derive_access_pattern(node, &in_shapes[idx]) {
                        Ok(pt) => (pt, true),
                        Err(_) => (identity_pattern(node, &in_shapes[idx]), false),
                    };
                    let visits = pattern.visits();
                    visit_cache.insert(key.clone(), (pattern, derived, visits));
                }
                let (pattern, derived, visits) = &visit_cache[&key];
                let chosen = task_visits(visits, pattern, *derived, node, task.work.as_ref());
                let (level, base) = arena
                    .location(p)
                    .ok_or_else(|| SimError::PlanValidation(format!("tensor {p} read by {} is not resident", task.node)))?;
                let lat = level.latency(hw);
                let width = in_shapes[idx].dtype.width();
                let restructured = layouts.get(*p);
                let direct = restructured.filter(|l| l.consumer == task.node && l.kind == pattern.kind);
                for i in chosen {
                    let v = &visits[i];
                    let off = match (direct, restructured) {
                        (Some(l), _) => l.placement.trace[i],
                        (None, Some(l)) => {
                            let x = grid_index(&in_shapes[idx], v.c, v.h, v.w);
                            l.placement.home[x].ok_or_else(|| {
                                SimError::PlanValidation(format!("{} reads an element dropped from {p}", task.node))
                            })?
                        }
                        (None, None) => grid_index(&in_shapes[idx], v.c, v.h, v.w),
                    };
                    if !caches[u].access(base + off as u64 * width) {
                        stall += lat;
                    }
                }
                if let Some(w) = task.work {
                    let (r, s, stride) = window(node);
                    let (_, ih, iw) = in_shapes[idx].grid();
                    let pad = node.root().attrs.pad;
                    let rows = input_span(w.h, r, stride, pad, ih);
                    let cols = input_span(w.w, s, stride, pad, iw);
                    let extra_rows = (rows.1 - rows.0).saturating_sub((w.h.1 - w.h.0) * stride);
                    let extra_cols = (cols.1 - cols.0).saturating_sub((w.w.1 - w.w.0) * stride);
                    let (ic, _, _) = in_shapes[idx].grid();
                    let chans = channel_range(node, &w, ic).map(|(a, b)| b - a).unwrap_or(ic);
                    if r > stride || s > stride {
                        halo_bytes += (extra_rows * iw + extra_cols * (rows.1 - rows.0)) as u64 * chans as u64 * width;
                    }
                }
            }

            let param_bytes = node.param_byte_size() * (item.k.1 - item.k.0) as u64 / oc.max(1) as u64;
            if param_bytes > 0 {
                let level = layer.placements.get(&format!("{}:params", task.node)).copied().unwrap_or(MemoryLevel::L2);
                let lines = param_bytes.div_ceil(line);
                if level == MemoryLevel::L2 {
                    peak_l2 = peak_l2.max(param_bytes);
                    stall += lines * hw.lat_l2;
                } else {
                    stall += (item.h.1 - item.h.0).max(1) as u64 * lines * level.latency(hw);
                }
            }

            let (level, base) = arena
                .location(&task.node)
                .ok_or_else(|| SimError::PlanValidation(format!("output of {} has no placement", task.node)))?;
            let width = out_shape.dtype.width();
            let region = item.region();
            let inside = |c: usize, h: usize, w: usize| region.c.contains(&c) && region.h.contains(&h) && region.w.contains(&w);
            let mut lines = Vec::new();
            if let Some(l) = layouts.get(&task.node) {
                for (v, &off) in l.visits.iter().zip(&l.placement.trace) {
                    if inside(v.c, v.h, v.w) {
                        lines.push((base + off as u64 * width) / line);
                    }
                }
            }
            for c in region.c.clone() {
                for h in region.h.clone() {
                    for w in region.w.clone() {
                        let x = grid_index(&out_shape, c, h, w);
                        let off = match layouts.get(&task.node) {
                            Some(l) => l.placement.home[x],
                            None => Some(x),
                        };
                        if let Some(off) = off {
                            lines.push((base + off as u64 * width) / line);
                        }
                    }
                }
            }
            stall += distinct_lines(lines) * level.latency(hw);

            prof.unit_stall[u] += stall;
            prof.unit_hits[u] += caches[u].counters.hits - h0;
            prof.unit_misses[u] += caches[u].counters.misses() - m0;
        }
        for u in 0..units {
            prof.unit_compute[u] = unit_macs[u].div_ceil(hw.mac_per_cycle.max(1));
        }
        prof.close();
        totals.simulated_cycles += prof.cycles;
        totals.compute_cycles += prof.compute_cycles;
        totals.stall_cycles += prof.stall_cycles;
        totals.hits += prof.hits;
        totals.misses += prof.misses;
        totals.macs += unit_macs.iter().sum::<u64>();
        layers.push(prof);
        arena.replay(&frees)?;
    }

    Ok(ProfileReport {
        format_version: REPORT_FORMAT_VERSION,
        graph_ref: plan.graph_ref.clone(),
        plan: plan.flags.label(),
        units,
        cost_model: COST_MODEL.to_string(),
        layers,
        totals,
        memory: MemoryProfile {
            pool: arena.stats(),
            peak_l2_bytes: peak_l2,
            peak_shared_bytes: arena.peak_shared(),
            peak_ddr_bytes: arena.peak_ddr,
            halo_bytes,
        },
    })
}

/// Numerics and performance of one plan run.
pub fn execute_plan(plan: &ExecutionPlan, inputs: &TensorMap) -> Result<(TensorMap, ProfileReport), SimError> {
    let graph = plan.build_graph()?;
    let outputs = execute_plan_numeric(plan, &graph, inputs)?;
    let report = simulate_plan(plan, &graph)?;
    Ok((outputs, report))
}

/// Speedup of `opt` over `base` after checking both produce the same
/// outputs on `inputs`.
pub fn compare_plans(base: &ExecutionPlan, opt: &ExecutionPlan, inputs: &TensorMap) -> Result<Comparison, SimError> {
    if base.graph_ref != opt.graph_ref {
        return Err(SimError::PlanValidation(format!(
            "plans come from different graphs ({} vs {})",
            base.graph_ref, opt.graph_ref
        )));
    }
    let (gb, go) = (base.build_graph()?, opt.build_graph()?);
    let ob = execute_plan_numeric(base, &gb, inputs)?;
    let oo = execute_plan_numeric(opt, &go, inputs)?;
    let diff = max_abs_diff(&ob, &oo);
    if diff.is_nan() || diff > TOLERANCE {
        return Err(SimError::EquivalenceFailure { max_abs_diff: diff });
    }
    let rb = simulate_plan(base, &gb)?;
    let ro = simulate_plan(opt, &go)?;
    Ok(Comparison {
        graph_ref: base.graph_ref.clone(),
        base: base.flags.label(),
        opt: opt.flags.label(),
        base_cycles: rb.totals.simulated_cycles,
        opt_cycles: ro.totals.simulated_cycles,
        speedup: rb.totals.simulated_cycles as f64 / ro.totals.simulated_cycles.max(1) as f64,
        max_abs_diff: diff,
        base_misses: rb.totals.misses,
        opt_misses: ro.totals.misses,
    })
}
