//! Multi-device planning: per-operator choice of the partition dimension
//! under an analytic compute and communication cost.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::node_macs;
use crate::graph::{ComputationGraph, GraphError, HardwareDescriptor, OperatorNode, TensorShape};
use crate::partition::window;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("dimension {dim} is not valid for operator {node}")]
    InvalidDimension { node: String, dim: Dimension },
    #[error("invalid cluster: {0}")]
    InvalidCluster(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Partition dimension. Ordered so that ties go to the earliest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dimension {
    #[serde(rename = "outC")]
    OutC,
    #[serde(rename = "inH")]
    InH,
    #[serde(rename = "inW")]
    InW,
    #[serde(rename = "m")]
    M,
    #[serde(rename = "n")]
    N,
}

impl Dimension {
    pub const CONV: [Dimension; 3] = [Dimension::OutC, Dimension::InH, Dimension::InW];
    pub const MATMUL: [Dimension; 2] = [Dimension::M, Dimension::N];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::OutC => "outC",
            Dimension::InH => "inH",
            Dimension::InW => "inW",
            Dimension::M => "m",
            Dimension::N => "n",
        }
    }

    /// Whether devices hold disjoint channels (or columns) of the output,
    /// so the full tensor must be gathered afterwards.
    fn splits_channels(self) -> bool {
        matches!(self, Dimension::OutC | Dimension::N)
    }

    /// Counterpart in the other operator family.
    fn translate(self, matmul: bool) -> Dimension {
        match (self, matmul) {
            (Dimension::OutC, true) => Dimension::N,
            (Dimension::InH | Dimension::InW, true) => Dimension::M,
            (Dimension::N, false) => Dimension::OutC,
            (Dimension::M, false) => Dimension::InH,
            (d, _) => d,
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Ring,
    Star,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SyncMethod {
    #[serde(rename = "ring", alias = "ring_all_reduce")]
    RingAllReduce,
    #[serde(rename = "ps", alias = "parameter_server")]
    ParameterServer,
}

impl SyncMethod {
    pub fn name(self) -> &'static str {
        match self {
            SyncMethod::RingAllReduce => "ring",
            SyncMethod::ParameterServer => "ps",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDescriptor {
    pub device_count: usize,
    pub device: HardwareDescriptor,
    pub bandwidth_bytes_per_cycle: f64,
    pub topology: Topology,
    pub sync: SyncMethod,
}

impl ClusterDescriptor {
    pub fn new(device_count: usize, device: HardwareDescriptor, bandwidth: f64, sync: SyncMethod) -> Self {
        let topology = match sync {
            SyncMethod::RingAllReduce => Topology::Ring,
            SyncMethod::ParameterServer => Topology::Star,
        };
        ClusterDescriptor { device_count, device, bandwidth_bytes_per_cycle: bandwidth, topology, sync }
    }

    pub fn validate(&self) -> Result<(), DistError> {
        if self.device_count == 0 {
            return Err(DistError::InvalidCluster("device_count must be at least 1".into()));
        }
        if !(self.bandwidth_bytes_per_cycle.is_finite() && self.bandwidth_bytes_per_cycle > 0.0) {
            return Err(DistError::InvalidCluster("bandwidth_bytes_per_cycle must be positive".into()));
        }
        self.device.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, DistError> {
        let c: ClusterDescriptor =
            serde_json::from_str(text).map_err(|e| DistError::InvalidCluster(format!("parse: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn with_devices(&self, n: usize) -> Self {
        ClusterDescriptor { device_count: n, ..self.clone() }
    }

    pub fn with_sync(&self, sync: SyncMethod) -> Self {
        ClusterDescriptor { sync, ..self.clone() }
    }

    fn cycles(&self, bytes: f64) -> u64 {
        (bytes / self.bandwidth_bytes_per_cycle).ceil() as u64
    }

    /// Cycles to synchronize a tensor of `bytes` across all devices.
    pub fn sync_cycles(&self, bytes: u64) -> u64 {
        let n = self.device_count as f64;
        let b = bytes as f64;
        match self.sync {
            SyncMethod::RingAllReduce => self.cycles(2.0 * (n - 1.0) / n * b),
            SyncMethod::ParameterServer => self.cycles(2.0 * b * (n - 1.0)),
        }
    }

    /// All-to-all exchange when consecutive operators split differently.
    pub fn repartition_cycles(&self, bytes: u64) -> u64 {
        let n = self.device_count as f64;
        self.cycles(bytes as f64 * (n - 1.0) / n)
    }
}

/// Per-operator dimension choice plus the synchronization method.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeChoice {
    pub per_operator: BTreeMap<String, Dimension>,
    pub sync: SyncMethod,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub compute_cycles: u64,
    pub comm_cycles: u64,
    pub total_cycles: u64,
}

impl CostEstimate {
    fn new(compute_cycles: u64, comm_cycles: u64) -> Self {
        CostEstimate { compute_cycles, comm_cycles, total_cycles: compute_cycles + comm_cycles }
    }

    fn add(&mut self, other: CostEstimate) {
        *self = CostEstimate::new(self.compute_cycles + other.compute_cycles, self.comm_cycles + other.comm_cycles);
    }
}

/// All orderings of `dset`, lexicographic by dimension order.
pub fn enumerate_schemes(dset: &[Dimension]) -> Vec<Vec<Dimension>> {
    let mut items: Vec<Dimension> = dset.to_vec();
    items.sort();
    items.dedup();
    let mut out = Vec::new();
    permute(&mut items, 0, &mut out);
    out.sort();
    out
}

fn permute(items: &mut Vec<Dimension>, at: usize, out: &mut Vec<Vec<Dimension>>) {
    if at == items.len() {
        out.push(items.clone());
        return;
    }
    for i in at..items.len() {
        items.swap(at, i);
        permute(items, at + 1, out);
        items.swap(at, i);
    }
}

/// Whether the node partitions as a matmul (rows and columns) rather than
/// a feature map.
fn matmul_family(node: &OperatorNode, out: &TensorShape) -> bool {
    node.is_matmul_like() || node.root().kind == crate::graph::OpKind::LstmCell || out.rank() < 3
}

/// Dimensions a node may be split along across devices.
pub fn allowed_dimensions(graph: &ComputationGraph, id: &str) -> Result<Vec<Dimension>, DistError> {
    let node = graph.node(id).ok_or_else(|| GraphError::Validation(format!("unknown node {id}")))?;
    let out = graph.shape_of(id).ok_or_else(|| GraphError::Validation(format!("unknown node {id}")))?;
    Ok(if matmul_family(node, out) { Dimension::MATMUL.to_vec() } else { Dimension::CONV.to_vec() })
}

fn extent(out: &TensorShape, dim: Dimension) -> usize {
    let (c, h, w) = out.grid();
    match dim {
        Dimension::OutC | Dimension::N => c,
        Dimension::InH | Dimension::M => h,
        Dimension::InW => w,
    }
}

/// The dimension an ordering actually splits on: its first entry with
/// enough extent for every device, else its widest.
pub fn effective_dimension(out: &TensorShape, ordering: &[Dimension], n: usize) -> Dimension {
    ordering
        .iter()
        .copied()
        .find(|&d| extent(out, d) >= n)
        .or_else(|| ordering.iter().copied().rev().max_by_key(|&d| extent(out, d)))
        .expect("ordering is nonempty")
}

fn operator_cost(
    graph: &ComputationGraph,
    id: &str,
    dim: Dimension,
    choice: &BTreeMap<String, Dimension>,
    cluster: &ClusterDescriptor,
) -> Result<CostEstimate, DistError> {
    if !allowed_dimensions(graph, id)?.contains(&dim) {
        return Err(DistError::InvalidDimension { node: id.to_string(), dim });
    }
    let node = &graph.nodes[id];
    let n = cluster.device_count;
    let inputs: Vec<TensorShape> = graph.producers(id).iter().map(|p| graph.shape_of(p).cloned().unwrap()).collect();
    let out = graph.shape_of(id).unwrap();
    let full = node_macs(node, &inputs)?;
    let e = extent(out, dim).max(1);
    let share = full * e.div_ceil(n) as u64 / e as u64;
    let throughput = cluster.device.mac_per_cycle.max(1) * cluster.device.unit_count.max(1) as u64;
    let params = if dim.splits_channels() {
        node.param_byte_size() * e.div_ceil(n) as u64 / e as u64
    } else {
        node.param_byte_size()
    };
    let compute = share.div_ceil(throughput) + params.div_ceil(cluster.device.cache_line_bytes.max(1)) * cluster.device.lat_ddr;

    let mut comm = 0u64;
    if n > 1 {
        if dim.splits_channels() {
            comm += cluster.sync_cycles(out.bytes());
        } else if let (Some(input), Dimension::InH | Dimension::InW) = (inputs.first(), dim) {
            let (r, s, stride) = window(node);
            let (ic, ih, iw) = input.grid();
            let (overlap, across) = if dim == Dimension::InH { (r, iw) } else { (s, ih) };
            let halo = overlap.saturating_sub(stride) as u64 * across as u64 * ic as u64 * input.dtype.width();
            comm += cluster.cycles(halo as f64 * (n - 1).min(2) as f64);
        }
        for (p, shape) in graph.producers(id).iter().zip(&inputs) {
            match choice.get(*p) {
                Some(pd) if !pd.splits_channels() && *pd != dim => comm += cluster.repartition_cycles(shape.bytes()),
                _ => {}
            }
        }
    }
    Ok(CostEstimate::new(compute, comm))
}

/// Analytic cost of running `graph` on the cluster under `scheme`.
pub fn profile_scheme(
    graph: &ComputationGraph,
    scheme: &SchemeChoice,
    cluster: &ClusterDescriptor,
) -> Result<CostEstimate, DistError> {
    cluster.validate()?;
    let cluster = &ClusterDescriptor { sync: scheme.sync, ..cluster.clone() };
    let mut total = CostEstimate::default();
    for id in graph.topological_order()? {
        let dim = *scheme
            .per_operator
            .get(&id)
            .ok_or_else(|| DistError::InvalidCluster(format!("scheme has no dimension for {id}")))?;
        total.add(operator_cost(graph, &id, dim, &scheme.per_operator, cluster)?);
    }
    Ok(total)
}

/// The scheme splitting every operator along `dim` (or its matmul
/// counterpart).
pub fn uniform_scheme(graph: &ComputationGraph, dim: Dimension, sync: SyncMethod) -> Result<SchemeChoice, DistError> {
    let mut per_operator = BTreeMap::new();
    for id in graph.topological_order()? {
        let node = &graph.nodes[&id];
        let m = matmul_family(node, graph.shape_of(&id).unwrap());
        per_operator.insert(id, dim.translate(m));
    }
    Ok(SchemeChoice { per_operator, sync })
}

/// One profiled ordering of one operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCost {
    pub ordering: Vec<Dimension>,
    pub dimension: Dimension,
    pub cost: CostEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorPlan {
    pub node: String,
    pub chosen: Dimension,
    pub cost: CostEstimate,
    pub orderings: Vec<OrderingCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRow {
    pub scheme: String,
    pub sync: SyncMethod,
    pub cost: CostEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistPlan {
    pub graph_ref: String,
    pub device_count: usize,
    pub sync: SyncMethod,
    pub backend: String,
    pub selected: SchemeChoice,
    pub selected_from: String,
    pub totals: CostEstimate,
    pub operators: Vec<OperatorPlan>,
    pub schemes: Vec<SchemeRow>,
}

/// Greedy walk in topological order: every operator takes the ordering
/// with the lowest cost given its producers' choices.
fn greedy(graph: &ComputationGraph, cluster: &ClusterDescriptor) -> Result<(SchemeChoice, Vec<OperatorPlan>), DistError> {
    let mut choice = BTreeMap::new();
    let mut operators = Vec::new();
    for id in graph.topological_order()? {
        let out = graph.shape_of(&id).unwrap().clone();
        let mut orderings = Vec::new();
        for ordering in enumerate_schemes(&allowed_dimensions(graph, &id)?) {
            let dimension = effective_dimension(&out, &ordering, cluster.device_count);
            let cost = operator_cost(graph, &id, dimension, &choice, cluster)?;
            orderings.push(OrderingCost { ordering, dimension, cost });
        }
        let best = orderings
            .iter()
            .min_by_key(|o| (o.cost.total_cycles, o.dimension))
            .expect("at least one ordering")
            .clone();
        choice.insert(id.clone(), best.dimension);
        operators.push(OperatorPlan { node: id, chosen: best.dimension, cost: best.cost, orderings });
    }
    Ok((SchemeChoice { per_operator: choice, sync: cluster.sync }, operators))
}

/// Picks the hybrid scheme for the cluster. The greedy per-operator choice
/// is kept unless a uniform scheme is cheaper overall.
pub fn select_best_scheme(
    graph: &ComputationGraph,
    cluster: &ClusterDescriptor,
) -> Result<(SchemeChoice, CostEstimate), DistError> {
    let plan = plan_distribution(graph, cluster)?;
    Ok((plan.selected, plan.totals))
}

/// Full planner output: the selection, per-operator ordering costs and
/// the scheme table under both synchronization methods.
pub fn plan_distribution(graph: &ComputationGraph, cluster: &ClusterDescriptor) -> Result<DistPlan, DistError> {
    cluster.validate()?;
    let (hybrid, operators) = greedy(graph, cluster)?;
    let mut selected = (hybrid.clone(), profile_scheme(graph, &hybrid, cluster)?, "hybrid".to_string());
    let mut uniforms = Vec::new();
    for dim in Dimension::CONV {
        let s = uniform_scheme(graph, dim, cluster.sync)?;
        let cost = profile_scheme(graph, &s, cluster)?;
        if cost.total_cycles < selected.1.total_cycles {
            selected = (s.clone(), cost, format!("uniform-{dim}"));
        }
        uniforms.push((dim, s));
    }

    let mut schemes = Vec::new();
    for sync in [SyncMethod::RingAllReduce, SyncMethod::ParameterServer] {
        let c = cluster.with_sync(sync);
        for (dim, s) in &uniforms {
            let s = SchemeChoice { sync, ..s.clone() };
            schemes.push(SchemeRow { scheme: format!("uniform-{dim}"), sync, cost: profile_scheme(graph, &s, &c)? });
        }
        let (h, _) = greedy(graph, &c)?;
        let mut best = profile_scheme(graph, &h, &c)?;
        for (_, s) in &uniforms {
            let s = SchemeChoice { sync, ..s.clone() };
            best = best.min_by_total(profile_scheme(graph, &s, &c)?);
        }
        schemes.push(SchemeRow { scheme: "hybrid".into(), sync, cost: best });
    }
    let (choice, totals, from) = selected;
    Ok(DistPlan {
        graph_ref: graph.name.clone(),
        device_count: cluster.device_count,
        sync: cluster.sync,
        backend: "analytic".into(),
        selected: choice,
        selected_from: from,
        totals,
        operators,
        schemes,
    })
}

impl CostEstimate {
    fn min_by_total(self, other: CostEstimate) -> CostEstimate {
        if other.total_cycles < self.total_cycles {
            other
        } else {
            self
        }
    }
}

impl DistPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dist plan serializes")
    }

    /// Scheme table: `scheme,sync,devices,compute_cycles,comm_cycles,total_cycles`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scheme", "sync", "devices", "compute_cycles", "comm_cycles", "total_cycles"])
            .expect("in-memory csv");
        for r in &self.schemes {
            w.write_record([
                r.scheme.clone(),
                r.sync.name().to_string(),
                self.device_count.to_string(),
                r.cost.compute_cycles.to_string(),
                r.cost.comm_cycles.to_string(),
                r.cost.total_cycles.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}
