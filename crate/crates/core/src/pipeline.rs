//! The optimizer: fuse, link, split, partition and layout, in that order,
//! producing an execution plan.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuse_link::{fuse_pass, link_pass, LinkOutcome, PassReport};
use crate::graph::{ComputationGraph, GraphDocument, GraphError, HardwareDescriptor, OpKind, OperatorNode, TensorShape};
use crate::layout::{build_layout, derive_access_pattern, LayoutDescriptor};
use crate::mempool::SMALL_THRESHOLD;
use crate::partition::{partition_feature_map, partitionable};
use crate::sim::{Arena, ExecutionPlan, MemoryLevel, PassFlags, PlanLayer, SimError, Task, PLAN_FORMAT_VERSION};
use crate::split::{split_operator, SplitError, SplitPlan};
use crate::tensor::derive_seed;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSummary {
    pub producer: String,
    pub consumer: String,
    pub formula_id: String,
    pub buffer_bytes: u64,
    pub is_identity: bool,
}

/// Everything the passes decided, for the pass report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub graph_ref: String,
    pub flags: PassFlags,
    pub fuse_link: PassReport,
    pub splits: Vec<SplitPlan>,
    pub partitioned: Vec<String>,
    pub layouts: Vec<LayoutSummary>,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pipeline report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct Optimized {
    pub graph: ComputationGraph,
    pub plan: ExecutionPlan,
    pub report: PipelineReport,
}

/// Whether stage-1 shares of `node`'s parameters still exceed private
/// memory, so partitioning alone cannot hold them.
pub fn needs_split(node: &OperatorNode, hw: &HardwareDescriptor) -> bool {
    let root = node.root();
    matches!(root.kind, OpKind::Conv | OpKind::Matmul | OpKind::FullyConnected)
        && !root.params.is_empty()
        && node.param_byte_size().div_ceil(hw.unit_count.max(1) as u64) > hw.l2_bytes
}

fn shapes_of(g: &ComputationGraph, id: &str) -> Vec<TensorShape> {
    g.producers(id).iter().map(|p| g.shape_of(p).cloned().expect("validated graph")).collect()
}

/// Runs the enabled passes over `graph` and lays out the execution plan.
pub fn optimize(
    graph: &ComputationGraph,
    hw: &HardwareDescriptor,
    flags: PassFlags,
    seed: u64,
) -> Result<Optimized, PipelineError> {
    hw.validate()?;
    let mut g = graph.clone();
    g.validate()?;
    g.assign_param_origins();
    let units = hw.unit_count;

    let (mut g, groups) = if flags.fuse { fuse_pass(&g) } else { (g, Vec::new()) };
    let outcome = if flags.link {
        let (linked, outcome) = link_pass(&g, hw);
        g = linked;
        outcome
    } else {
        LinkOutcome { compounds: Vec::new(), annotations: Vec::new(), matches: Vec::new() }
    };

    let mut splits: Vec<SplitPlan> = Vec::new();
    if flags.split {
        for id in g.topological_order()? {
            if g.node(&id).is_some_and(|n| needs_split(n, hw)) {
                let (plan, rewritten) = split_operator(&g, &id, hw)?;
                log::debug!("split {id} into {} parts", plan.parts.len());
                g = rewritten;
                splits.push(plan);
            }
        }
    }
    let part_of: BTreeMap<&str, &SplitPlan> =
        splits.iter().flat_map(|s| s.parts.iter().map(move |p| (p.id.as_str(), s))).collect();
    let split_parents: BTreeSet<&str> = splits.iter().map(|s| s.node_id.as_str()).collect();

    // Layers: split parts of one operator share a layer; everything else
    // gets its own.
    let mut layers: Vec<PlanLayer> = Vec::new();
    let mut layer_nodes: Vec<Vec<String>> = Vec::new();
    let mut partitioned = Vec::new();
    let mut layouts = Vec::new();
    let mut emitted = BTreeSet::new();
    for id in g.topological_order()? {
        if let Some(sp) = part_of.get(id.as_str()) {
            if !emitted.insert(sp.node_id.clone()) {
                continue;
            }
            let tasks = sp.parts.iter().map(|p| Task { unit: p.unit % units, node: p.id.clone(), work: None }).collect();
            let placements = sp
                .parts
                .iter()
                .map(|p| {
                    let level = if p.param_bytes <= hw.l2_bytes { MemoryLevel::L2 } else { MemoryLevel::Ddr };
                    (format!("{}:params", p.id), level)
                })
                .collect();
            layers.push(PlanLayer {
                node: format!("{}#parts", sp.node_id),
                split: Some((*sp).clone()),
                partition: None,
                layout: None,
                tasks,
                placements,
                alloc_events: Vec::new(),
            });
            layer_nodes.push(sp.parts.iter().map(|p| p.id.clone()).collect());
            continue;
        }
        let node = &g.nodes[&id];
        let inputs = shapes_of(&g, &id);
        let out = g.shape_of(&id).cloned().expect("validated graph");
        let oc = out.grid().0.max(1) as u64;
        let join = node.kind == OpKind::Concat && node.attrs.layout_join;
        let (partition, tasks) = if flags.partition && units > 1 && partitionable(node) && !join {
            let scheme = partition_feature_map(node, &inputs, units, derive_seed(seed, &id, 0))?;
            let tasks: Vec<Task> = scheme
                .per_unit
                .iter()
                .enumerate()
                .flat_map(|(u, w)| {
                    let id = &id;
                    w.work.iter().map(move |item| Task { unit: u, node: id.clone(), work: Some(*item) })
                })
                .collect();
            partitioned.push(id.clone());
            (Some(scheme), tasks)
        } else {
            (None, vec![Task { unit: 0, node: id.clone(), work: None }])
        };

        let mut layout: Option<LayoutDescriptor> = None;
        if flags.layout {
            for a in outcome.annotations.iter().filter(|a| a.producer == id) {
                let Some(consumer) = g.node(&a.consumer) else { continue };
                if split_parents.contains(a.consumer.as_str()) || g.producers(&a.consumer) != [id.as_str()] {
                    continue;
                }
                if let Ok(pattern) = derive_access_pattern(consumer, &out) {
                    if let Ok(mut l) = build_layout(node, &out, &pattern) {
                        if !g.outputs.contains(&id) && g.use_count(&id) == 1 {
                            l = l.without_unread();
                        }
                        layouts.push(LayoutSummary {
                            producer: l.producer.clone(),
                            consumer: l.consumer.clone(),
                            formula_id: l.formula_id.clone(),
                            buffer_bytes: l.buffer_bytes,
                            is_identity: l.is_identity,
                        });
                        layout = Some(l);
                        break;
                    }
                }
            }
        }

        let mut placements = BTreeMap::new();
        if node.param_byte_size() > 0 {
            let widest = tasks
                .iter()
                .map(|t| t.work.map(|w| (w.k.1 - w.k.0) as u64).unwrap_or(oc))
                .max()
                .unwrap_or(oc);
            let bytes = node.param_byte_size() * widest / oc;
            let level = if bytes <= hw.l2_bytes { MemoryLevel::L2 } else { MemoryLevel::Ddr };
            placements.insert(format!("{id}:params"), level);
        }
        layers.push(PlanLayer { node: id.clone(), split: None, partition, layout, tasks, placements, alloc_events: Vec::new() });
        layer_nodes.push(vec![id.clone()]);
    }

    // Memory: allocate each layer's outputs before it runs and free every
    // tensor after its last reader.
    let bytes_of = |layer: &PlanLayer, t: &str| -> u64 {
        match &layer.layout {
            Some(l) if l.producer == t => l.buffer_bytes,
            _ => g.shape_of(t).map(|s| s.bytes()).unwrap_or(0),
        }
    };
    let mut last_use: BTreeMap<String, usize> = BTreeMap::new();
    for (i, nodes) in layer_nodes.iter().enumerate() {
        for n in nodes {
            for p in g.producers(n) {
                last_use.insert(p.to_string(), i);
            }
        }
    }
    let mut warm: Vec<u64> = g.inputs.iter().map(|i| i.shape.bytes()).collect();
    for (layer, nodes) in layers.iter().zip(&layer_nodes) {
        warm.extend(nodes.iter().map(|n| bytes_of(layer, n)));
    }
    let mut arena = Arena::new(hw, &warm);
    let mut prologue = Vec::new();
    for inp in &g.inputs {
        prologue.push(arena.place(&inp.name, inp.shape.bytes())?);
    }
    let keep: BTreeSet<&str> = g.outputs.iter().map(String::as_str).collect();
    for (i, (layer, nodes)) in layers.iter_mut().zip(&layer_nodes).enumerate() {
        let sizes: Vec<(String, u64)> = nodes.iter().map(|n| (n.clone(), bytes_of(layer, n))).collect();
        let mut events = if sizes.len() > 1 && sizes.iter().all(|(_, b)| *b <= SMALL_THRESHOLD) {
            arena.place_batch(&sizes)?
        } else {
            sizes.iter().map(|(n, b)| arena.place(n, *b)).collect::<Result<Vec<_>, _>>()?
        };
        for e in &events {
            layer.placements.insert(e.tensor.clone(), e.level);
        }
        for (t, _) in last_use.iter().filter(|(t, &l)| l == i && !keep.contains(t.as_str())) {
            events.push(arena.release(t)?);
        }
        layer.alloc_events = events;
    }

    let plan = ExecutionPlan {
        format_version: PLAN_FORMAT_VERSION,
        graph_ref: graph.name.clone(),
        flags,
        seed,
        hw: hw.clone(),
        graph: GraphDocument::from_graph(&g),
        pool_warm: warm,
        prologue,
        layers,
    };
    let report = PipelineReport {
        graph_ref: graph.name.clone(),
        flags,
        fuse_link: PassReport::new(hw.l2_bytes, groups, outcome),
        splits,
        partitioned,
        layouts,
    };
    Ok(Optimized { graph: g, plan, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::node_macs;
    use crate::fixtures;
    use crate::sim::{execute_plan_numeric, execute_reference, max_abs_diff, random_inputs, simulate_plan, TOLERANCE};

    fn hw() -> HardwareDescriptor {
        HardwareDescriptor::default()
    }

    #[test]
    fn single_unit_compute_is_sum_of_node_macs() {
        let g = fixtures::mobilenet_block();
        let hw = hw().with_units(1);
        let o = optimize(&g, &hw, PassFlags::VANILLA, 1).unwrap();
        let r = simulate_plan(&o.plan, &o.graph).unwrap();
        let expected: u64 = g
            .topological_order()
            .unwrap()
            .iter()
            .map(|id| node_macs(&g.nodes[id], &shapes_of(&g, id)).unwrap().div_ceil(hw.mac_per_cycle))
            .sum();
        assert_eq!(r.totals.compute_cycles, expected);
    }

    #[test]
    fn every_variant_matches_reference() {
        for g in fixtures::suite() {
            let inputs = random_inputs(&g, 11);
            let want = execute_reference(&g, &inputs, 11).unwrap();
            for flags in [PassFlags::VANILLA, PassFlags::HORIZONTAL, PassFlags::VERTICAL, PassFlags::ALL] {
                let o = optimize(&g, &hw(), flags, 11).unwrap();
                let got = execute_plan_numeric(&o.plan, &o.graph, &inputs).unwrap();
                assert!(max_abs_diff(&want, &got) <= TOLERANCE, "{} {}", g.name, flags.label());
            }
        }
    }

    #[test]
    fn plans_are_deterministic_and_round_trip() {
        let g = fixtures::squeezenet_fire();
        let a = optimize(&g, &hw(), PassFlags::ALL, 5).unwrap();
        let b = optimize(&g, &hw(), PassFlags::ALL, 5).unwrap();
        assert_eq!(a.plan.to_json(), b.plan.to_json());
        assert_eq!(a.report.to_json(), b.report.to_json());
        let back = ExecutionPlan::from_json(&a.plan.to_json()).unwrap();
        assert_eq!(back.to_json(), a.plan.to_json());
        let rebuilt = back.build_graph().unwrap();
        assert_eq!(simulate_plan(&back, &rebuilt).unwrap(), simulate_plan(&a.plan, &a.graph).unwrap());
    }

    #[test]
    fn more_units_run_faster() {
        let g = fixtures::resnet18_block();
        let one = optimize(&g, &hw().with_units(1), PassFlags::HORIZONTAL, 2).unwrap();
        let eight = optimize(&g, &hw(), PassFlags::HORIZONTAL, 2).unwrap();
        let c1 = simulate_plan(&one.plan, &one.graph).unwrap().totals.simulated_cycles;
        let c8 = simulate_plan(&eight.plan, &eight.graph).unwrap().totals.simulated_cycles;
        assert!(c8 < c1, "{c8} vs {c1}");
    }

    #[test]
    fn linked_pair_gets_a_layout() {
        let o = optimize(&fixtures::mobilenet_block(), &hw(), PassFlags::ALL, 0).unwrap();
        assert!(!o.report.layouts.is_empty());
        assert!(o.plan.layers.iter().any(|l| l.layout.is_some()));
    }

    #[test]
    fn disabled_layout_pass_writes_none() {
        let mut flags = PassFlags::ALL;
        flags.layout = false;
        let o = optimize(&fixtures::mobilenet_block(), &hw(), flags, 0).unwrap();
        assert!(o.report.layouts.is_empty());
    }

    #[test]
    fn oversized_kernel_is_split_and_stays_exact() {
        let g = fixtures::mobilenet_tail();
        let o = optimize(&g, &hw(), PassFlags::ALL, 4).unwrap();
        let sp = o.report.splits.first().expect("tail conv is split");
        assert_eq!(sp.stage2_parts_per_unit, 2);
        let layer = o.plan.layers.iter().find(|l| l.split.is_some()).unwrap();
        assert!(layer.placements.iter().filter(|(k, _)| k.ends_with(":params")).all(|(_, v)| *v == MemoryLevel::L2));
        let inputs = random_inputs(&g, 4);
        let want = execute_reference(&g, &inputs, 4).unwrap();
        let got = execute_plan_numeric(&o.plan, &o.graph, &inputs).unwrap();
        assert!(max_abs_diff(&want, &got) <= TOLERANCE);
    }

    #[test]
    fn small_split_outputs_are_batched() {
        let g = fixtures::GraphBuilder::new("small")
            .input("x", TensorShape::chw(64, 4, 4))
            .conv("conv", "x", 64, 64, 1, 1, 0, 1)
            .output("conv")
            .build();
        let mut hw = hw();
        hw.l2_bytes = 1024;
        let o = optimize(&g, &hw, PassFlags::ALL, 1).unwrap();
        assert_eq!(o.report.splits.len(), 1);
        let layer = o.plan.layers.iter().find(|l| l.split.is_some()).unwrap();
        assert!(layer.alloc_events.iter().any(|e| e.op == crate::sim::AllocOp::Batch));
        let r = simulate_plan(&o.plan, &o.graph).unwrap();
        assert!(r.memory.pool.batched_count > 1);
    }
}
