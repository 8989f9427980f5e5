use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{LayerParams, Tensor};

/// y = W x + b with W stored row-major as [out, in].
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub params: LayerParams,
    input: usize,
    output: usize,
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// One affine application: weights [out, in] applied to a vector.
pub fn affine(weights: &Tensor, bias: &Tensor, input: &[f64]) -> Result<Vec<f64>> {
    let (out_dim, in_dim) = (weights.shape()[0], weights.shape()[1]);
    if input.len() != in_dim || bias.len() != out_dim {
        return Err(Error::Shape {
            context: "affine",
            expected: format!("input {in_dim}, bias {out_dim}"),
            got: format!("input {}, bias {}", input.len(), bias.len()),
        });
    }
    let mut out = bias.data().to_vec();
    let w = weights.data();
    for (o, acc) in out.iter_mut().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        *acc += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(out)
}

impl AffineLayer {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut params = LayerParams::new();
        params.insert("w", Tensor::uniform_init(&[output, input], input, rng));
        params.insert("b", Tensor::zeros(&[output]));
        AffineLayer {
            params,
            input,
            output,
        }
    }

    pub fn from_params(params: LayerParams) -> Self {
        let shape = params.get("w").shape().to_vec();
        AffineLayer {
            params,
            input: shape[1],
            output: shape[0],
        }
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn output_size(&self) -> usize {
        self.output
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        affine(self.params.get("w"), self.params.get("b"), input)
    }

    /// Gradients for one application; `input` must be the forward input.
    /// Returns (param grads, input grad).
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> (AffineGrads, Vec<f64>) {
        let w = self.params.get("w").data();
        let mut dw = Tensor::zeros(&[self.output, self.input]);
        let mut db = Tensor::zeros(&[self.output]);
        let mut dx = vec![0.0; self.input];
        for o in 0..self.output {
            let g = upstream[o];
            db.data_mut()[o] = g;
            let row = &w[o * self.input..(o + 1) * self.input];
            let drow = &mut dw.data_mut()[o * self.input..(o + 1) * self.input];
            for i in 0..self.input {
                drow[i] = g * input[i];
                dx[i] += g * row[i];
            }
        }
        (
            AffineGrads {
                weights: dw,
                bias: db,
            },
            dx,
        )
    }

    /// Accumulate one application's gradients into an existing grads container.
    pub fn backward_into(&self, input: &[f64], upstream: &[f64], grads: &mut LayerParams) -> Vec<f64> {
        let (g, dx) = self.backward(input, upstream);
        for (acc, v) in grads.get_mut("w").data_mut().iter_mut().zip(g.weights.data()) {
            *acc += v;
        }
        for (acc, v) in grads.get_mut("b").data_mut().iter_mut().zip(g.bias.data()) {
            *acc += v;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(w: Vec<f64>, b: Vec<f64>, input: usize, output: usize) -> AffineLayer {
        let mut params = LayerParams::new();
        params.insert("w", Tensor::from_vec(&[output, input], w).unwrap());
        params.insert("b", Tensor::from_vec(&[output], b).unwrap());
        AffineLayer::from_params(params)
    }

    #[test]
    fn identity_weights_zero_bias_is_identity() {
        let l = layer(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        assert_eq!(l.forward(&[3.5, -2.0]).unwrap(), vec![3.5, -2.0]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let l = layer(vec![0.0; 6], vec![7.0, -1.0], 3, 2);
        assert_eq!(l.forward(&[9.0, 9.0, 9.0]).unwrap(), vec![7.0, -1.0]);
    }

    #[test]
    fn hand_computed_2x2_case() {
        // [[1,2],[3,4]] * [1,1] + [0,1] = [3,8]
        let l = layer(vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0], 2, 2);
        assert_eq!(l.forward(&[1.0, 1.0]).unwrap(), vec![3.0, 8.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let l = layer(vec![0.0; 6], vec![0.0, 0.0], 3, 2);
        assert!(l.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn bias_gradient_equals_upstream() {
        let l = layer(vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0], 2, 2);
        let (g, _) = l.backward(&[1.0, -1.0], &[0.5, -2.0]);
        assert_eq!(g.bias.data(), &[0.5, -2.0]);
    }

    #[test]
    fn zero_upstream_means_zero_grads() {
        let l = layer(vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 1.0], 2, 2);
        let (g, dx) = l.backward(&[1.0, -1.0], &[0.0, 0.0]);
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }
}
