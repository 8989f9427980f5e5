//! Dense tensors and named parameter collections.
//!
//! Training arithmetic is f64 throughout so that finite-difference gradient
//! oracles stay tight; file formats down-convert to f32 on write.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                context: "Tensor::from_vec",
                expected: format!("{n} elements for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform init in (-1/sqrt(fan_in), +1/sqrt(fan_in)).
    pub fn uniform_init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// 2-D accessor; expects shape [rows, cols].
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }
}

/// Ordered map from parameter name to tensor. Iteration follows insertion
/// order, which keeps optimizer updates and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl LayerParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name '{name}'"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named '{name}'"));
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named '{name}'"));
        &mut self.tensors[idx]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// A grads container with the same names and shapes, all zero.
    pub fn zeros_like(&self) -> LayerParams {
        LayerParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Total number of scalar values across all tensors.
    pub fn value_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Sequence of acoustic feature frames: `frames` rows of width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn zeros(frames: usize, dim: usize) -> Self {
        FeatureSequence {
            frames,
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn from_vec(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames * dim != data.len() {
            return Err(Error::Shape {
                context: "FeatureSequence::from_vec",
                expected: format!("{} values", frames * dim),
                got: format!("{}", data.len()),
            });
        }
        Ok(FeatureSequence { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frames reversed in time.
    pub fn reversed(&self) -> FeatureSequence {
        let mut out = FeatureSequence::zeros(self.frames, self.dim);
        for t in 0..self.frames {
            out.row_mut(t).copy_from_slice(self.row(self.frames - 1 - t));
        }
        out
    }
}

/// Phone-id sequence over a fixed inventory (no blanks).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhoneSeq(pub Vec<u32>);

impl PhoneSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    /// The suffix consisting of the last `n` phones.
    pub fn suffix(&self, n: usize) -> PhoneSeq {
        PhoneSeq(self.0[self.0.len() - n..].to_vec())
    }

    /// True if `self` ends with `other`.
    pub fn ends_with(&self, other: &PhoneSeq) -> bool {
        self.0.ends_with(&other.0)
    }

    /// True if `other` occurs as a contiguous substring of `self`.
    pub fn contains_seq(&self, other: &PhoneSeq) -> bool {
        if other.0.is_empty() || other.0.len() > self.0.len() {
            return other.0.is_empty();
        }
        self.0.windows(other.0.len()).any(|w| w == other.0.as_slice())
    }

    pub fn validate(&self, inventory: usize) -> Result<()> {
        for &p in &self.0 {
            if p as usize >= inventory {
                return Err(Error::UnknownPhone {
                    id: p,
                    inventory,
                });
            }
        }
        Ok(())
    }
}

impl From<Vec<u32>> for PhoneSeq {
    fn from(v: Vec<u32>) -> Self {
        PhoneSeq(v)
    }
}
