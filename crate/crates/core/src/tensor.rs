//! Dense float32 tensors and deterministic value generation.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::graph::{ElementType, GraphError, Param, TensorShape};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: TensorShape) -> Self {
        let n = shape.elements();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: TensorShape, value: f32) -> Self {
        let n = shape.elements();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn from_vec(shape: TensorShape, data: Vec<f32>) -> Self {
        assert_eq!(shape.elements(), data.len(), "data length must match shape {shape}");
        Tensor { shape, data }
    }

    /// Uniform values in `[-1, 1)` from a seeded generator.
    pub fn random(shape: TensorShape, seed: u64) -> Self {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let n = shape.elements();
        let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor { shape, data }
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        self.shape.grid()
    }

    /// Flat index of grid coordinate `(c, h, w)`.
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        grid_index(&self.shape, c, h, w)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.data.len() != other.data.len() {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (a - b).abs();
                if d.is_nan() {
                    f32::INFINITY
                } else {
                    d
                }
            })
            .fold(0.0, f32::max)
    }

    pub fn checksum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// Flat row-major offset of grid coordinate `(c, h, w)` for `shape`.
/// Sequence tensors store the hidden (channel) axis innermost.
pub fn grid_index(shape: &TensorShape, c: usize, h: usize, w: usize) -> usize {
    let (cs, hs, ws) = shape.grid();
    match shape.axes.as_slice() {
        [a, _] if a.label == crate::graph::AxisLabel::SeqLen => h * cs + c,
        _ => (c * hs + h) * ws + w,
    }
}

/// A rectangular block of a node's output grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub c: Range<usize>,
    pub h: Range<usize>,
    pub w: Range<usize>,
}

impl Region {
    pub fn full(shape: &TensorShape) -> Self {
        let (c, h, w) = shape.grid();
        Region { c: 0..c, h: 0..h, w: 0..w }
    }

    pub fn elements(&self) -> usize {
        self.c.len() * self.h.len() * self.w.len()
    }
}

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Stable seed for a named stream under a run seed.
pub fn derive_seed(seed: u64, name: &str, index: usize) -> u64 {
    let h = fnv1a(name.as_bytes(), 0xcbf2_9ce4_8422_2325 ^ seed.rotate_left(17));
    fnv1a(&(index as u64).to_le_bytes(), h)
}

/// Resolves parameter values, generating unsplit tensors on demand and
/// caching them so split parts slice a single source.
#[derive(Debug, Default)]
pub struct ParamValues {
    seed: u64,
    full: BTreeMap<(String, usize), Vec<f32>>,
}

impl ParamValues {
    pub fn new(seed: u64) -> Self {
        ParamValues { seed, full: BTreeMap::new() }
    }

    pub fn resolve(&mut self, param: &Param) -> Result<Vec<f32>, GraphError> {
        if param.shape.dtype != ElementType::Float32 {
            return Err(GraphError::Unsupported("int8 parameters are not executable".into()));
        }
        if let Some(d) = &param.data {
            if d.len() != param.shape.elements() {
                return Err(GraphError::Validation(format!(
                    "parameter {} carries {} values for shape {}",
                    param.name,
                    d.len(),
                    param.shape
                )));
            }
            return Ok(d.clone());
        }
        let origin = param
            .origin
            .as_ref()
            .ok_or_else(|| GraphError::Validation(format!("parameter {} has neither data nor origin", param.name)))?;
        let seed = self.seed;
        let full = self
            .full
            .entry((origin.node.clone(), origin.index))
            .or_insert_with(|| generate(&origin.full, derive_seed(seed, &origin.node, origin.index)));
        Ok(slice_ranges(full, &origin.full.dims(), &origin.ranges))
    }
}

fn generate(shape: &TensorShape, seed: u64) -> Vec<f32> {
    let dims = shape.dims();
    let fan_in: usize = dims.iter().skip(1).product::<usize>().max(1);
    let scale = 1.0 / (fan_in as f32).sqrt();
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    (0..shape.elements()).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect()
}

fn slice_ranges(data: &[f32], dims: &[usize], ranges: &[(usize, usize)]) -> Vec<f32> {
    if ranges.iter().zip(dims).all(|(&(lo, hi), &d)| lo == 0 && hi == d) {
        return data.to_vec();
    }
    let mut strides = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let count: usize = ranges.iter().map(|(lo, hi)| hi - lo).product();
    let mut out = Vec::with_capacity(count);
    let mut idx: Vec<usize> = ranges.iter().map(|r| r.0).collect();
    if count == 0 {
        return out;
    }
    loop {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        let mut axis = dims.len();
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < ranges[axis].1 {
                break;
            }
            idx[axis] = ranges[axis].0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AxisLabel, ParamOrigin};

    #[test]
    fn origin_slices_match_explicit_slices() {
        let shape = TensorShape::new(&[(AxisLabel::K, 4), (AxisLabel::C, 3)]);
        let p = Param {
            name: "w".into(),
            shape: shape.clone(),
            data: None,
            origin: Some(ParamOrigin { node: "n".into(), index: 0, full: shape.clone(), ranges: vec![(0, 4), (0, 3)] }),
        };
        let mut values = ParamValues::new(7);
        let full = values.resolve(&p).unwrap();
        let explicit = Param::new("w", shape).with_data(full.clone());
        let a = values.resolve(&p.slice(AxisLabel::K, 1, 3).slice(AxisLabel::C, 2, 3)).unwrap();
        let b = explicit.slice(AxisLabel::K, 1, 3).slice(AxisLabel::C, 2, 3).data.unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![full[5], full[8]]);
    }

    #[test]
    fn seq_index_is_hidden_innermost() {
        let s = TensorShape::seq(3, 5);
        assert_eq!(grid_index(&s, 2, 1, 0), 7);
        let f = TensorShape::chw(2, 3, 4);
        assert_eq!(grid_index(&f, 1, 2, 3), 23);
    }
}
