//! Labeled tensor shapes.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::GraphError;

/// Semantic axis label. Passes address dimensions by label, never by position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AxisLabel {
    N,
    C,
    H,
    W,
    K,
    R,
    S,
    #[serde(rename = "hiddenDim")]
    HiddenDim,
    #[serde(rename = "seqLen")]
    SeqLen,
}

impl fmt::Display for AxisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AxisLabel::N => "N",
            AxisLabel::C => "C",
            AxisLabel::H => "H",
            AxisLabel::W => "W",
            AxisLabel::K => "K",
            AxisLabel::R => "R",
            AxisLabel::S => "S",
            AxisLabel::HiddenDim => "hiddenDim",
            AxisLabel::SeqLen => "seqLen",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ElementType {
    #[default]
    #[serde(rename = "float32")]
    Float32,
    #[serde(rename = "int8")]
    Int8,
}

impl ElementType {
    pub fn width(self) -> u64 {
        match self {
            ElementType::Float32 => 4,
            ElementType::Int8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Axis {
    pub label: AxisLabel,
    pub extent: usize,
}

/// An ordered list of labeled extents plus the element type. Data described
/// by a shape is stored row-major in axis order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub axes: Vec<Axis>,
    #[serde(default)]
    pub dtype: ElementType,
}

impl TensorShape {
    pub fn new(axes: &[(AxisLabel, usize)]) -> Self {
        TensorShape {
            axes: axes
                .iter()
                .map(|&(label, extent)| Axis { label, extent })
                .collect(),
            dtype: ElementType::Float32,
        }
    }

    /// Feature map in channel-major `C×H×W` order.
    pub fn chw(c: usize, h: usize, w: usize) -> Self {
        Self::new(&[(AxisLabel::C, c), (AxisLabel::H, h), (AxisLabel::W, w)])
    }

    /// Sequence tensor `seqLen×hiddenDim`.
    pub fn seq(len: usize, hidden: usize) -> Self {
        Self::new(&[(AxisLabel::SeqLen, len), (AxisLabel::HiddenDim, hidden)])
    }

    pub fn with_dtype(mut self, dtype: ElementType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn rank(&self) -> usize {
        self.axes.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.extent).collect()
    }

    pub fn labels(&self) -> Vec<AxisLabel> {
        self.axes.iter().map(|a| a.label).collect()
    }

    pub fn position(&self, label: AxisLabel) -> Option<usize> {
        self.axes.iter().position(|a| a.label == label)
    }

    pub fn extent(&self, label: AxisLabel) -> Option<usize> {
        self.position(label).map(|i| self.axes[i].extent)
    }

    /// Element count, `None` on overflow.
    pub fn checked_elements(&self) -> Option<u64> {
        self.axes
            .iter()
            .try_fold(1u64, |acc, a| acc.checked_mul(a.extent as u64))
    }

    pub fn elements(&self) -> usize {
        self.axes.iter().map(|a| a.extent).product()
    }

    /// Byte size, `None` on overflow.
    pub fn checked_bytes(&self) -> Option<u64> {
        self.checked_elements()?.checked_mul(self.dtype.width())
    }

    pub fn bytes(&self) -> u64 {
        self.elements() as u64 * self.dtype.width()
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let mut seen = Vec::with_capacity(self.axes.len());
        for a in &self.axes {
            if a.extent == 0 {
                return Err(GraphError::Validation(format!("axis {} has zero extent", a.label)));
            }
            if seen.contains(&a.label) {
                return Err(GraphError::Validation(format!("duplicate axis label {}", a.label)));
            }
            seen.push(a.label);
        }
        if self.checked_bytes().is_none() {
            return Err(GraphError::Validation(format!("byte size of {self} overflows")));
        }
        Ok(())
    }

    /// Shape with the extent of `label` replaced.
    pub fn with_extent(&self, label: AxisLabel, extent: usize) -> Self {
        let mut out = self.clone();
        if let Some(i) = out.position(label) {
            out.axes[i].extent = extent;
        }
        out
    }

    /// Same extents in the same order, ignoring labels.
    pub fn same_extents(&self, other: &TensorShape) -> bool {
        self.dims() == other.dims() && self.dtype == other.dtype
    }

    /// Interprets the shape as a `(channels, rows, cols)` grid. Feature maps
    /// map directly; sequence tensors map hidden→channels and seq→rows;
    /// vectors become `(n, 1, 1)`.
    /// Index of the axis that `grid` maps to channels.
    pub fn channel_axis(&self) -> usize {
        match self.axes.as_slice() {
            [a, _] if a.label == AxisLabel::SeqLen => 1,
            _ => 0,
        }
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        match self.axes.as_slice() {
            [c, h, w] => (c.extent, h.extent, w.extent),
            [a, b] if a.label == AxisLabel::SeqLen => (b.extent, a.extent, 1),
            [a, b] => (a.extent, b.extent, 1),
            [a] => (a.extent, 1, 1),
            _ => (self.elements(), 1, 1),
        }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .axes
            .iter()
            .map(|a| format!("{}{}", a.label, a.extent))
            .collect();
        write!(f, "[{}]", parts.join("×"))
    }
}
