//! Minimal neural kernel: forward passes, exact analytical backward passes,
//! and the Adam optimizer, covering every layer the detector architecture uses.
//!
//! Each layer's `forward` returns the output together with a cache of the
//! activations the backward pass needs, so a backward call without a prior
//! forward is unrepresentable.

mod adam;
mod affine;
mod conv;
mod lstm;

pub use adam::{adam_step, AdamState};
pub use affine::{affine, AffineGrads, AffineLayer};
pub use conv::{conv1d, conv1d_backward, maxpool1d, maxpool1d_backward, Conv1dLayer, MaxPoolCache};
pub use lstm::{lstm_sequence, Direction, LstmCache, LstmGrads, LstmLayer};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow; -log sigmoid(-x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Apply tanh element-wise to a feature sequence, returning the activated
/// copy (callers keep it as the backward-pass cache).
pub fn tanh_seq(input: &crate::tensor::FeatureSequence) -> crate::tensor::FeatureSequence {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = v.tanh();
    }
    out
}

/// Backward through element-wise tanh given the activated values.
pub fn tanh_seq_backward(
    activated: &crate::tensor::FeatureSequence,
    upstream: &crate::tensor::FeatureSequence,
) -> crate::tensor::FeatureSequence {
    let mut out = upstream.clone();
    for (g, &a) in out.data_mut().iter_mut().zip(activated.data()) {
        *g *= 1.0 - a * a;
    }
    out
}
