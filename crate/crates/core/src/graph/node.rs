use std::fmt;

use serde::{Deserialize, Serialize};

use super::shape::{AxisLabel, TensorShape};

/// Operator vocabulary, including the compound kinds produced by fusion and
/// linking and the glue kinds inserted by rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum OpKind {
    Conv,
    Matmul,
    Bn,
    Bias,
    Relu,
    Add,
    Mul,
    Mac,
    Maxpool,
    Avgpool,
    Globalpool,
    Transpose,
    Concat,
    Split,
    #[serde(rename = "fullyconnected")]
    FullyConnected,
    LstmCell,
    Cbr,
    Cbrm,
    Cbra,
    ReduceAdd,
}

pub const ALL_KINDS: [OpKind; 20] = [
    OpKind::Conv,
    OpKind::Matmul,
    OpKind::Bn,
    OpKind::Bias,
    OpKind::Relu,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Mac,
    OpKind::Maxpool,
    OpKind::Avgpool,
    OpKind::Globalpool,
    OpKind::Transpose,
    OpKind::Concat,
    OpKind::Split,
    OpKind::FullyConnected,
    OpKind::LstmCell,
    OpKind::Cbr,
    OpKind::Cbrm,
    OpKind::Cbra,
    OpKind::ReduceAdd,
];

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::Matmul => "matmul",
            OpKind::Bn => "bn",
            OpKind::Bias => "bias",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Mac => "mac",
            OpKind::Maxpool => "maxpool",
            OpKind::Avgpool => "avgpool",
            OpKind::Globalpool => "globalpool",
            OpKind::Transpose => "transpose",
            OpKind::Concat => "concat",
            OpKind::Split => "split",
            OpKind::FullyConnected => "fullyconnected",
            OpKind::LstmCell => "lstmCell",
            OpKind::Cbr => "cbr",
            OpKind::Cbrm => "cbrm",
            OpKind::Cbra => "cbra",
            OpKind::ReduceAdd => "reduceAdd",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_KINDS.iter().copied().find(|k| k.name() == name)
    }

    pub fn is_compound(self) -> bool {
        matches!(self, OpKind::Cbr | OpKind::Cbrm | OpKind::Cbra)
    }

    pub fn is_pool(self) -> bool {
        matches!(self, OpKind::Maxpool | OpKind::Avgpool)
    }

    /// Kinds that can be folded into a preceding conv/matmul as an epilogue.
    pub fn is_epilogue(self) -> bool {
        matches!(self, OpKind::Bn | OpKind::Bias | OpKind::Relu | OpKind::Add | OpKind::Mul)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn one() -> usize {
    1
}
fn is_one(v: &usize) -> bool {
    *v == 1
}
fn is_zero(v: &usize) -> bool {
    *v == 0
}
fn is_false(v: &bool) -> bool {
    !*v
}

/// Kind-specific attributes. Kernel extents live in the parameter shapes;
/// the fields here cover stride/padding/grouping, pooling windows, channel
/// slicing, and the kernel-window offsets carried by split parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attrs {
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub pad: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub groups: usize,
    /// Pooling window (square).
    #[serde(default, skip_serializing_if = "is_zero")]
    pub window: usize,
    /// Channel slice `[start, end)` for `split`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<usize>,
    /// Offsets of a split part's kernel window within the unsplit kernel.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub c_offset: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub r_offset: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub s_offset: usize,
    /// Unsplit kernel extents; output geometry follows these when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_s: Option<usize>,
    /// A concat whose parts write straight into their slice of the output
    /// buffer; costs nothing in simulation.
    #[serde(default, skip_serializing_if = "is_false")]
    pub layout_join: bool,
}

impl Default for Attrs {
    fn default() -> Self {
        Attrs {
            stride: 1,
            pad: 0,
            groups: 1,
            window: 0,
            start: None,
            end: None,
            c_offset: 0,
            r_offset: 0,
            s_offset: 0,
            full_r: None,
            full_s: None,
            layout_join: false,
        }
    }
}

impl Attrs {
    pub fn conv(stride: usize, pad: usize) -> Self {
        Attrs { stride, pad, ..Attrs::default() }
    }

    pub fn pool(window: usize, stride: usize) -> Self {
        Attrs { window, stride, ..Attrs::default() }
    }
}

/// Where generated parameter values come from: the unsplit tensor of
/// `node`/`index`, restricted to `ranges` (one half-open range per axis).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamOrigin {
    pub node: String,
    pub index: usize,
    pub full: TensorShape,
    pub ranges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    #[serde(flatten)]
    pub shape: TensorShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<ParamOrigin>,
}

impl Param {
    pub fn new(name: &str, shape: TensorShape) -> Self {
        Param { name: name.to_string(), shape, data: None, origin: None }
    }

    pub fn with_data(mut self, data: Vec<f32>) -> Self {
        self.data = Some(data);
        self
    }

    /// Slice along `label`, keeping `[lo, hi)`. Explicit data is sliced
    /// eagerly; generated data records the range in its origin.
    pub fn slice(&self, label: AxisLabel, lo: usize, hi: usize) -> Param {
        let Some(pos) = self.shape.position(label) else {
            return self.clone();
        };
        let shape = self.shape.with_extent(label, hi - lo);
        let data = self.data.as_ref().map(|d| {
            let dims = self.shape.dims();
            let inner: usize = dims[pos + 1..].iter().product();
            let outer: usize = dims[..pos].iter().product();
            let mut out = Vec::with_capacity(outer * (hi - lo) * inner);
            for o in 0..outer {
                let base = o * dims[pos] * inner;
                out.extend_from_slice(&d[base + lo * inner..base + hi * inner]);
            }
            out
        });
        let origin = self.origin.as_ref().map(|o| {
            let mut o = o.clone();
            let (base, _) = o.ranges[pos];
            o.ranges[pos] = (base + lo, base + hi);
            o
        });
        Param { name: self.name.clone(), shape, data, origin }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub id: String,
    pub kind: OpKind,
    #[serde(default)]
    pub attrs: Attrs,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<Param>,
    /// Original operators of a compound node, in dataflow order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<OperatorNode>,
}

impl OperatorNode {
    pub fn new(id: &str, kind: OpKind) -> Self {
        OperatorNode {
            id: id.to_string(),
            kind,
            attrs: Attrs::default(),
            params: Vec::new(),
            members: Vec::new(),
        }
    }

    pub fn with_attrs(mut self, attrs: Attrs) -> Self {
        self.attrs = attrs;
        self
    }

    pub fn with_param(mut self, name: &str, shape: TensorShape) -> Self {
        self.params.push(Param::new(name, shape));
        self
    }

    /// Root operator: the first member of a compound, otherwise the node.
    pub fn root(&self) -> &OperatorNode {
        self.members.first().unwrap_or(self)
    }

    /// All parameter tensors, flattened across compound members.
    pub fn all_params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.params.iter().collect();
        for m in &self.members {
            out.extend(m.all_params());
        }
        out
    }

    /// Exact byte count of every parameter tensor.
    pub fn param_byte_size(&self) -> u64 {
        self.all_params().iter().map(|p| p.shape.bytes()).sum()
    }

    /// Pooling member of a linked compound, if any.
    pub fn pool_member(&self) -> Option<&OperatorNode> {
        self.members.iter().find(|m| m.kind.is_pool())
    }

    /// Kernel window `(R, S)` of a conv-rooted node.
    pub fn kernel_window(&self) -> Option<(usize, usize)> {
        let root = self.root();
        if root.kind != OpKind::Conv {
            return None;
        }
        let w = root.params.first()?;
        let r = root.attrs.full_r.or(w.shape.extent(AxisLabel::R))?;
        let s = root.attrs.full_s.or(w.shape.extent(AxisLabel::S))?;
        Some((r, s))
    }

    pub fn is_conv_like(&self) -> bool {
        self.root().kind == OpKind::Conv
    }

    pub fn is_matmul_like(&self) -> bool {
        matches!(self.root().kind, OpKind::Matmul | OpKind::FullyConnected)
    }
}
