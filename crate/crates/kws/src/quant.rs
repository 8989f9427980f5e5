//! Per-tensor 8-bit affine quantization with dequantize-on-use semantics.
//!
//! Weights are stored as i8 plus one (scale, zero_point) pair per tensor;
//! arithmetic stays in floating point. This reproduces the storage-size
//! claim without committing to fixed-point recurrent kernels.

use crate::tensor::Tensor;

/// Scale floor used when a tensor is constant zero.
const MIN_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub scale: f64,
    pub zero_point: i32,
    pub data: Vec<i8>,
}

/// Quantize a finite tensor. Constant tensors are given a scale that
/// dequantizes back to the exact constant.
pub fn quantize(t: &Tensor) -> QuantTensor {
    assert!(t.all_finite(), "quantize requires finite values");
    let values = t.data();
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || min == max {
        // constant c: one quantized step of size |c| reconstructs c exactly
        let c = if values.is_empty() { 0.0 } else { min };
        let scale = c.abs().max(MIN_SCALE);
        let (zero_point, q) = if c > 0.0 {
            (-128, -127)
        } else if c < 0.0 {
            (-127, -128)
        } else {
            (-128, -128)
        };
        return QuantTensor {
            shape: t.shape().to_vec(),
            scale,
            zero_point,
            data: vec![q; values.len()],
        };
    }
    let scale = (max - min) / 255.0;
    let zero_point = -128 - (min / scale).round() as i32;
    let data = values
        .iter()
        .map(|&v| ((v / scale).round() as i32 + zero_point).clamp(-128, 127) as i8)
        .collect();
    QuantTensor {
        shape: t.shape().to_vec(),
        scale,
        zero_point,
        data,
    }
}

pub fn dequantize(q: &QuantTensor) -> Tensor {
    let data = q
        .data
        .iter()
        .map(|&v| q.scale * (v as i32 - q.zero_point) as f64)
        .collect();
    Tensor::from_vec(&q.shape, data).expect("shape recorded at quantize time")
}

/// Largest elementwise reconstruction error; bounded by scale/2.
pub fn round_trip_error(t: &Tensor, q: &QuantTensor) -> f64 {
    let d = dequantize(q);
    t.data()
        .iter()
        .zip(d.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
