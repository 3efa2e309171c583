//! Restructured feature-map layouts. A linked producer writes its output in
//! exactly the order its consumer reads it, so the consumer streams through
//! the buffer front to back.
//!
//! Every layout is described by the consumer's visit sequence: visit `i`
//! lands at a closed-form offset that equals `i` itself. Coordinates the
//! consumer never reads are appended after the last visit in storage order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AxisLabel, OpKind, OperatorNode, TensorShape};
use crate::tensor::{grid_index, Tensor};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("unsupported access pattern: {0}")]
    UnsupportedPattern(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Read order of a consumer over its input grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    /// Storage order of the row-major tensor.
    Identity,
    /// Pixel-major, channel innermost.
    Pointwise,
    /// Pool tiles row-major, zigzag inside a tile, channel innermost.
    PooledPointwise { window: usize },
    /// Channel-major, then pool tiles with zigzag inside each tile.
    PoolTiles { window: usize },
    /// For each output row its band of input rows, column by column,
    /// channel innermost. Overlapping bands are replicated.
    RowBand { rows: usize, stride: usize, pad: usize },
    /// Every window element per output position; the irregular fallback.
    Windows { rows: usize, cols: usize, stride: usize, pad: usize, channel_outer: bool },
    /// Matmul rows, hidden dimension innermost.
    RowPanel,
}

impl PatternKind {
    pub fn formula_id(&self) -> &'static str {
        match self {
            PatternKind::Identity => "row_major",
            PatternKind::Pointwise => "hwc",
            PatternKind::PooledPointwise { .. } => "tile_zigzag_c",
            PatternKind::PoolTiles { .. } => "c_tile_zigzag",
            PatternKind::RowBand { .. } => "row_band",
            PatternKind::Windows { .. } => "table",
            PatternKind::RowPanel => "row_panel",
        }
    }
}

/// One element read. `orow`/`ocol` name the output position the read serves;
/// `ocol` is `None` when the read serves a whole output row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visit {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub orow: usize,
    pub ocol: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessPattern {
    pub node_id: String,
    pub kind: PatternKind,
    pub input: TensorShape,
    /// Overlap between neighbouring windows along rows and columns.
    pub replication: (usize, usize),
}

fn band(oh: usize, rows: usize, stride: usize, pad: usize, h: usize) -> (usize, usize) {
    let top = (oh * stride) as isize - pad as isize;
    let lo = top.max(0) as usize;
    let hi = ((top + rows as isize).max(0) as usize).min(h);
    (lo.min(hi), hi)
}

fn out_extent(extent: usize, window: usize, stride: usize, pad: usize) -> usize {
    if extent + 2 * pad < window {
        0
    } else {
        (extent + 2 * pad - window) / stride + 1
    }
}

fn is_seq(shape: &TensorShape) -> bool {
    shape.axes.first().map(|a| a.label) == Some(AxisLabel::SeqLen)
}

impl AccessPattern {
    pub fn grid(&self) -> (usize, usize, usize) {
        self.input.grid()
    }

    /// Output rows of a row-band pattern.
    fn band_rows(&self) -> usize {
        match self.kind {
            PatternKind::RowBand { rows, stride, pad } => out_extent(self.grid().1, rows, stride, pad),
            _ => 0,
        }
    }

    /// The consumer's reads in order.
    pub fn visits(&self) -> Vec<Visit> {
        let (cs, hs, ws) = self.grid();
        let mut v = Vec::with_capacity(cs * hs * ws);
        match self.kind {
            PatternKind::Identity | PatternKind::RowPanel => {
                if is_seq(&self.input) {
                    for h in 0..hs {
                        for c in 0..cs {
                            v.push(Visit { c, h, w: 0, orow: h, ocol: None });
                        }
                    }
                } else {
                    for c in 0..cs {
                        for h in 0..hs {
                            for w in 0..ws {
                                v.push(Visit { c, h, w, orow: h, ocol: Some(w) });
                            }
                        }
                    }
                }
            }
            PatternKind::Pointwise => {
                for h in 0..hs {
                    for w in 0..ws {
                        for c in 0..cs {
                            v.push(Visit { c, h, w, orow: h, ocol: Some(w) });
                        }
                    }
                }
            }
            PatternKind::PooledPointwise { window: k } => {
                for ty in 0..hs.div_ceil(k) {
                    for tx in 0..ws.div_ceil(k) {
                        for h in ty * k..((ty + 1) * k).min(hs) {
                            for w in tx * k..((tx + 1) * k).min(ws) {
                                for c in 0..cs {
                                    v.push(Visit { c, h, w, orow: ty, ocol: Some(tx) });
                                }
                            }
                        }
                    }
                }
            }
            PatternKind::PoolTiles { window: k } => {
                for c in 0..cs {
                    for ty in 0..hs.div_ceil(k) {
                        for tx in 0..ws.div_ceil(k) {
                            for h in ty * k..((ty + 1) * k).min(hs) {
                                for w in tx * k..((tx + 1) * k).min(ws) {
                                    v.push(Visit { c, h, w, orow: ty, ocol: Some(tx) });
                                }
                            }
                        }
                    }
                }
            }
            PatternKind::RowBand { rows, stride, pad } => {
                for oh in 0..self.band_rows() {
                    let (lo, hi) = band(oh, rows, stride, pad, hs);
                    for w in 0..ws {
                        for h in lo..hi {
                            for c in 0..cs {
                                v.push(Visit { c, h, w, orow: oh, ocol: None });
                            }
                        }
                    }
                }
            }
            PatternKind::Windows { rows, cols, stride, pad, channel_outer } => {
                let oh = out_extent(hs, rows, stride, pad);
                let ow = out_extent(ws, cols, stride, pad);
                let window = |c: usize, y: usize, x: usize, v: &mut Vec<Visit>| {
                    let (h0, h1) = band(y, rows, stride, pad, hs);
                    let (w0, w1) = band(x, cols, stride, pad, ws);
                    for h in h0..h1 {
                        for w in w0..w1 {
                            v.push(Visit { c, h, w, orow: y, ocol: Some(x) });
                        }
                    }
                };
                if channel_outer {
                    for c in 0..cs {
                        for y in 0..oh {
                            for x in 0..ow {
                                window(c, y, x, &mut v);
                            }
                        }
                    }
                } else {
                    for y in 0..oh {
                        for x in 0..ow {
                            let start = v.len();
                            window(0, y, x, &mut v);
                            let spots: Vec<Visit> = v.drain(start..).collect();
                            for s in spots {
                                for c in 0..cs {
                                    v.push(Visit { c, ..s });
                                }
                            }
                        }
                    }
                }
            }
        }
        v
    }
}

/// Canonical read order of `consumer` over an input of shape `input`.
pub fn derive_access_pattern(consumer: &OperatorNode, input: &TensorShape) -> Result<AccessPattern, LayoutError> {
    let unsupported = |why: &str| Err(LayoutError::UnsupportedPattern(format!("{} ({}): {why}", consumer.id, consumer.kind.name())));
    let root = consumer.root();
    let spatial = input.rank() == 3 && !is_seq(input);
    let (kind, replication) = if consumer.is_matmul_like() {
        (PatternKind::RowPanel, (0, 0))
    } else if consumer.is_conv_like() {
        if !spatial {
            return unsupported("convolution over a non-spatial input");
        }
        let (r, s) = consumer.kernel_window().unwrap_or((1, 1));
        let (stride, pad) = (root.attrs.stride, root.attrs.pad);
        if r == 1 && s == 1 && stride == 1 && pad == 0 {
            match consumer.pool_member() {
                Some(p) if p.attrs.window > 1 && p.attrs.window == p.attrs.stride => {
                    (PatternKind::PooledPointwise { window: p.attrs.window }, (0, 0))
                }
                _ => (PatternKind::Pointwise, (0, 0)),
            }
        } else if stride <= r && (r > 1 || s > 1) {
            (PatternKind::RowBand { rows: r, stride, pad }, (r - stride, 0))
        } else {
            let kind = PatternKind::Windows { rows: r, cols: s, stride, pad, channel_outer: false };
            (kind, (r.saturating_sub(stride), s.saturating_sub(stride)))
        }
    } else if matches!(root.kind, OpKind::Maxpool | OpKind::Avgpool) {
        if !spatial {
            return unsupported("pooling over a non-spatial input");
        }
        let (k, stride) = (root.attrs.window, root.attrs.stride);
        if k == 1 && stride == 1 {
            (PatternKind::Identity, (0, 0))
        } else if k == stride {
            (PatternKind::PoolTiles { window: k }, (0, 0))
        } else {
            let kind = PatternKind::Windows { rows: k, cols: k, stride, pad: 0, channel_outer: true };
            (kind, (k.saturating_sub(stride), k.saturating_sub(stride)))
        }
    } else {
        return unsupported("not a linkable consumer");
    };
    Ok(AccessPattern { node_id: consumer.id.clone(), kind, input: input.clone(), replication })
}

/// Placement of a producer's output in the order of one consumer's reads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDescriptor {
    pub producer: String,
    pub consumer: String,
    #[serde(flatten)]
    pub kind: LayoutKind,
    pub formula_id: String,
    pub shape: TensorShape,
    pub buffer_bytes: u64,
    pub is_identity: bool,
    /// Elements the consumer never reads are left out of the buffer.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub drops_unread: bool,
}

/// Serialized as `{"kind": ..., "params": {...}}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutKind {
    #[serde(rename = "params")]
    pub pattern: PatternKind,
    pub kind: LayoutFamily,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutFamily {
    Identity,
    Permutation,
    Replicated,
}

/// Offsets of every visit plus the home offset of each logical element.
#[derive(Debug, Clone)]
pub struct Placement {
    /// Buffer offset of visit `i`, in visit order.
    pub trace: Vec<usize>,
    /// Offset holding element `x` (storage index) for read-back; `None`
    /// for dropped elements.
    pub home: Vec<Option<usize>>,
    pub len: usize,
}

impl LayoutDescriptor {
    pub fn pattern(&self) -> AccessPattern {
        let replication = match self.kind.pattern {
            PatternKind::RowBand { rows, stride, .. } => (rows - stride, 0),
            PatternKind::Windows { rows, cols, stride, .. } => {
                (rows.saturating_sub(stride), cols.saturating_sub(stride))
            }
            _ => (0, 0),
        };
        AccessPattern {
            node_id: self.consumer.clone(),
            kind: self.kind.pattern,
            input: self.shape.clone(),
            replication,
        }
    }

    pub fn elements(&self) -> usize {
        self.shape.elements()
    }

    pub fn placement(&self) -> Placement {
        let pattern = self.pattern();
        place(&pattern, &pattern.visits(), self.drops_unread)
    }

    /// Offset of logical coordinate `(c, h, w)`; its first copy when
    /// replicated.
    pub fn offset(&self, c: usize, h: usize, w: usize) -> Option<usize> {
        self.placement().home[grid_index(&self.shape, c, h, w)]
    }

    /// The same layout without the elements its consumer never reads. Only
    /// valid when that consumer is the tensor's sole reader.
    pub fn without_unread(mut self) -> LayoutDescriptor {
        self.drops_unread = true;
        let placed = self.placement();
        self.buffer_bytes = placed.len as u64 * self.shape.dtype.width();
        let dropped = placed.home.iter().any(Option::is_none);
        if dropped {
            self.is_identity = false;
            if self.kind.kind == LayoutFamily::Identity {
                self.kind.kind = LayoutFamily::Permutation;
            }
        }
        self
    }
}

/// Closed-form offset of visit `v` for the formula kinds; `None` for the
/// table fallback.
fn closed_form(kind: PatternKind, shape: &TensorShape, v: &Visit, bands: &[usize]) -> Option<usize> {
    let (cs, hs, ws) = shape.grid();
    let (c, h, w) = (v.c, v.h, v.w);
    match kind {
        PatternKind::Identity | PatternKind::RowPanel => Some(grid_index(shape, c, h, w)),
        PatternKind::Pointwise => Some((h * ws + w) * cs + c),
        PatternKind::PooledPointwise { window: k } => Some(tile_offset(cs, hs, ws, k, c, h, w)),
        PatternKind::PoolTiles { window: k } => Some(c * hs * ws + tile_offset(1, hs, ws, k, 0, h, w)),
        PatternKind::RowBand { rows, stride, pad } => {
            let (lo, hi) = band(v.orow, rows, stride, pad, hs);
            Some(bands[v.orow] + (w * (hi - lo) + (h - lo)) * cs + c)
        }
        PatternKind::Windows { .. } => None,
    }
}

/// Tile-major zigzag offset with channel innermost. Trailing partial tiles
/// keep the same order with fewer elements.
pub fn tile_offset(cs: usize, hs: usize, ws: usize, k: usize, c: usize, h: usize, w: usize) -> usize {
    let (ty, tx) = (h / k, w / k);
    let tile_h = k.min(hs - ty * k);
    let tile_w = k.min(ws - tx * k);
    ty * k * ws * cs + tx * k * tile_h * cs + ((h % k) * tile_w + w % k) * cs + c
}

fn place(pattern: &AccessPattern, visits: &[Visit], drop_unread: bool) -> Placement {
    let shape = &pattern.input;
    let (cs, hs, ws) = shape.grid();
    let mut bands = Vec::new();
    if let PatternKind::RowBand { rows, stride, pad } = pattern.kind {
        let mut acc = 0;
        for oh in 0..pattern.band_rows() {
            bands.push(acc);
            let (lo, hi) = band(oh, rows, stride, pad, hs);
            acc += (hi - lo) * ws * cs;
        }
    }
    let n = shape.elements();
    let mut home = vec![None; n];
    let mut trace = Vec::with_capacity(visits.len());
    for (i, v) in visits.iter().enumerate() {
        let off = closed_form(pattern.kind, shape, v, &bands).unwrap_or(i);
        trace.push(off);
        let x = grid_index(shape, v.c, v.h, v.w);
        home[x].get_or_insert(off);
    }
    let mut len = visits.len();
    if !drop_unread {
        for slot in home.iter_mut().filter(|s| s.is_none()) {
            *slot = Some(len);
            len += 1;
        }
    }
    Placement { trace, home, len }
}

/// Builds the layout under which `producer` writes an output of shape
/// `output` for a consumer reading with `pattern`.
pub fn build_layout(
    producer: &OperatorNode,
    output: &TensorShape,
    pattern: &AccessPattern,
) -> Result<LayoutDescriptor, LayoutError> {
    if !output.same_extents(&pattern.input) {
        return Err(LayoutError::ShapeMismatch(format!(
            "{} writes {} but {} reads {}",
            producer.id, output, pattern.node_id, pattern.input
        )));
    }
    let visits = pattern.visits();
    let placed = place(pattern, &visits, false);
    let width = output.dtype.width();
    let identity = placed.len == output.elements()
        && visits.len() == placed.len
        && visits.iter().zip(&placed.trace).all(|(v, &o)| grid_index(output, v.c, v.h, v.w) == o);
    let family = if identity {
        LayoutFamily::Identity
    } else if placed.len > output.elements() {
        LayoutFamily::Replicated
    } else {
        LayoutFamily::Permutation
    };
    Ok(LayoutDescriptor {
        producer: producer.id.clone(),
        consumer: pattern.node_id.clone(),
        kind: LayoutKind { pattern: pattern.kind, kind: family },
        formula_id: pattern.kind.formula_id().to_string(),
        shape: output.clone(),
        buffer_bytes: placed.len as u64 * width,
        is_identity: identity,
        drops_unread: false,
    })
}

/// Writes `tensor` into a buffer in `layout` order, duplicating replicated
/// coordinates.
pub fn apply_layout(tensor: &Tensor, layout: &LayoutDescriptor) -> Vec<f32> {
    let pattern = layout.pattern();
    let visits = pattern.visits();
    let placed = place(&pattern, &visits, layout.drops_unread);
    let mut buf = vec![0.0; placed.len];
    for (v, &off) in visits.iter().zip(&placed.trace) {
        buf[off] = tensor.data[tensor.index(v.c, v.h, v.w)];
    }
    for (x, off) in placed.home.iter().enumerate() {
        if let Some(off) = off {
            buf[*off] = tensor.data[x];
        }
    }
    buf
}

/// Reads a restructured buffer back into a row-major tensor. Dropped
/// elements come back as zero.
pub fn restore_layout(buffer: &[f32], layout: &LayoutDescriptor) -> Tensor {
    let placed = layout.placement();
    let data = placed.home.iter().map(|off| off.map_or(0.0, |o| buffer[o])).collect();
    Tensor::from_vec(layout.shape.clone(), data)
}

/// Row-major offsets the consumer would touch without restructuring.
pub fn row_major_trace(pattern: &AccessPattern) -> Vec<usize> {
    pattern.visits().iter().map(|v| grid_index(&pattern.input, v.c, v.h, v.w)).collect()
}
