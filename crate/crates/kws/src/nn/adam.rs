use serde::{Deserialize, Serialize};

use crate::tensor::LayerParams;

/// Adam optimizer state for one parameter group.
///
/// Moment tensors mirror the group's parameter shapes; the step counter is
/// shared across the group and strictly increases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: LayerParams,
    v: LayerParams,
}

impl AdamState {
    pub fn new(lr: f64, params: &LayerParams) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update; gradient shapes must mirror `params`.
pub fn adam_step(state: &mut AdamState, params: &mut LayerParams, grads: &LayerParams) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient group size mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        assert!(p.same_shape(g), "gradient shape must mirror parameter shape");
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = state.beta1 * md[i] + (1.0 - state.beta1) * gd[i];
            vd[i] = state.beta2 * vd[i] + (1.0 - state.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn group(vals: &[f64]) -> LayerParams {
        let mut p = LayerParams::new();
        p.insert("w", Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = group(&[1.0, -2.0, 0.5]);
        let grads = group(&[0.0, 0.0, 0.0]);
        let mut state = AdamState::new(1e-4, &params);
        adam_step(&mut state, &mut params, &grads);
        assert_eq!(params.get("w").data(), &[1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // bias-corrected m_hat = 1, v_hat = 1 => delta = -lr / (1 + eps)
        let mut params = group(&[0.0]);
        let grads = group(&[1.0]);
        let mut state = AdamState::new(1e-4, &params);
        adam_step(&mut state, &mut params, &grads);
        let delta = params.get("w").data()[0];
        assert!((delta + 1e-4).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        let mut params = group(&[0.0]);
        let grads = group(&[3.0]);
        let mut state = AdamState::new(1e-4, &params);
        let mut prev = 0.0;
        let mut last_delta = 0.0;
        for _ in 0..500 {
            adam_step(&mut state, &mut params, &grads);
            let cur = params.get("w").data()[0];
            last_delta = cur - prev;
            prev = cur;
        }
        assert!((last_delta.abs() - 1e-4).abs() < 1e-6);
    }

    #[test]
    #[should_panic(expected = "mirror")]
    fn shape_mismatch_panics() {
        let mut params = group(&[0.0, 0.0]);
        let grads = group(&[0.0]);
        let mut state = AdamState::new(1e-4, &params);
        adam_step(&mut state, &mut params, &grads);
    }
}
