use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{FeatureSequence, LayerParams, Tensor};

/// Valid (no padding) 1-D convolution over time.
///
/// `kernel` has shape [K, Cin, Cout]; output length is T - K + 1 and
/// `out[t][c] = sum_{j,i} kernel[j][i][c] * input[t+j][i] + bias[c]`.
pub fn conv1d(kernel: &Tensor, bias: &Tensor, input: &FeatureSequence) -> Result<FeatureSequence> {
    let (k, cin, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if input.dim() != cin {
        return Err(Error::Shape {
            context: "conv1d",
            expected: format!("{cin} input channels"),
            got: format!("{}", input.dim()),
        });
    }
    if input.frames() < k {
        return Err(Error::InsufficientFrames {
            needed: k,
            got: input.frames(),
        });
    }
    let t_out = input.frames() - k + 1;
    let mut out = FeatureSequence::zeros(t_out, cout);
    let kd = kernel.data();
    for t in 0..t_out {
        let row = out.row_mut(t);
        row.copy_from_slice(bias.data());
        for j in 0..k {
            let x = input.row(t + j);
            let kj = &kd[j * cin * cout..(j + 1) * cin * cout];
            for (i, &xi) in x.iter().enumerate() {
                let ki = &kj[i * cout..(i + 1) * cout];
                for (c, acc) in row.iter_mut().enumerate() {
                    *acc += ki[c] * xi;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv1d`]. Returns (dkernel, dbias, dinput); `want_dinput`
/// skips the input gradient when everything below the layer is frozen.
pub fn conv1d_backward(
    kernel: &Tensor,
    input: &FeatureSequence,
    upstream: &FeatureSequence,
    want_dinput: bool,
) -> (Tensor, Tensor, Option<FeatureSequence>) {
    let (k, cin, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let t_out = upstream.frames();
    let mut dkernel = Tensor::zeros(&[k, cin, cout]);
    let mut dbias = Tensor::zeros(&[cout]);
    let mut dinput = want_dinput.then(|| FeatureSequence::zeros(input.frames(), cin));
    let kd = kernel.data();
    let dkd = dkernel.data_mut();
    for t in 0..t_out {
        let g = upstream.row(t);
        for (c, &gc) in g.iter().enumerate() {
            dbias.data_mut()[c] += gc;
        }
        for j in 0..k {
            let x = input.row(t + j);
            let dkj = &mut dkd[j * cin * cout..(j + 1) * cin * cout];
            for (i, &xi) in x.iter().enumerate() {
                let dki = &mut dkj[i * cout..(i + 1) * cout];
                for (c, &gc) in g.iter().enumerate() {
                    dki[c] += gc * xi;
                }
            }
            if let Some(di) = dinput.as_mut() {
                let kj = &kd[j * cin * cout..(j + 1) * cin * cout];
                let drow = di.row_mut(t + j);
                for i in 0..cin {
                    let ki = &kj[i * cout..(i + 1) * cout];
                    let mut acc = 0.0;
                    for (c, &gc) in g.iter().enumerate() {
                        acc += gc * ki[c];
                    }
                    drow[i] += acc;
                }
            }
        }
    }
    (dkernel, dbias, dinput)
}

/// Convolution layer owning its kernel and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dLayer {
    pub params: LayerParams,
    kernel_size: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Conv1dLayer {
    pub fn new<R: Rng>(kernel_size: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        let mut params = LayerParams::new();
        params.insert(
            "kernel",
            Tensor::uniform_init(&[kernel_size, cin, cout], kernel_size * cin, rng),
        );
        params.insert("bias", Tensor::zeros(&[cout]));
        Conv1dLayer {
            params,
            kernel_size,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn from_params(params: LayerParams) -> Self {
        let shape = params.get("kernel").shape().to_vec();
        Conv1dLayer {
            params,
            kernel_size: shape[0],
            in_channels: shape[1],
            out_channels: shape[2],
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward(&self, input: &FeatureSequence) -> Result<FeatureSequence> {
        conv1d(self.params.get("kernel"), self.params.get("bias"), input)
    }

    /// Accumulates kernel/bias grads into `grads` and optionally returns dinput.
    pub fn backward_into(
        &self,
        input: &FeatureSequence,
        upstream: &FeatureSequence,
        grads: &mut LayerParams,
        want_dinput: bool,
    ) -> Option<FeatureSequence> {
        let (dk, db, dinput) =
            conv1d_backward(self.params.get("kernel"), input, upstream, want_dinput);
        for (acc, v) in grads.get_mut("kernel").data_mut().iter_mut().zip(dk.data()) {
            *acc += v;
        }
        for (acc, v) in grads.get_mut("bias").data_mut().iter_mut().zip(db.data()) {
            *acc += v;
        }
        dinput
    }
}

/// Argmax positions recorded by the pooling forward pass.
#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    /// For each (output frame, channel): the input frame the max came from.
    argmax: Vec<usize>,
    in_frames: usize,
    channels: usize,
}

/// Channel-wise max pooling over time; output length floor((T-size)/stride)+1.
pub fn maxpool1d(
    input: &FeatureSequence,
    size: usize,
    stride: usize,
) -> Result<(FeatureSequence, MaxPoolCache)> {
    if input.frames() < size {
        return Err(Error::InsufficientFrames {
            needed: size,
            got: input.frames(),
        });
    }
    let t_out = (input.frames() - size) / stride + 1;
    let dim = input.dim();
    let mut out = FeatureSequence::zeros(t_out, dim);
    let mut argmax = vec![0usize; t_out * dim];
    for t in 0..t_out {
        let start = t * stride;
        let row = out.row_mut(t);
        for c in 0..dim {
            let mut best = f64::NEG_INFINITY;
            let mut best_at = start;
            for dt in 0..size {
                let v = input.row(start + dt)[c];
                // ties resolve to the earliest frame
                if v > best {
                    best = v;
                    best_at = start + dt;
                }
            }
            row[c] = best;
            argmax[t * dim + c] = best_at;
        }
    }
    Ok((
        out,
        MaxPoolCache {
            argmax,
            in_frames: input.frames(),
            channels: dim,
        },
    ))
}

/// Routes upstream gradient back to the argmax frames.
pub fn maxpool1d_backward(cache: &MaxPoolCache, upstream: &FeatureSequence) -> FeatureSequence {
    let mut dinput = FeatureSequence::zeros(cache.in_frames, cache.channels);
    for t in 0..upstream.frames() {
        let g = upstream.row(t);
        for c in 0..cache.channels {
            let src = cache.argmax[t * cache.channels + c];
            dinput.row_mut(src)[c] += g[c];
        }
    }
    dinput
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: usize, dim: usize, vals: &[f64]) -> FeatureSequence {
        FeatureSequence::from_vec(frames, dim, vals.to_vec()).unwrap()
    }

    #[test]
    fn k1_identity_kernel_is_identity() {
        // K=1, Cin=Cout=2, kernel = channel identity
        let kernel = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bias = Tensor::zeros(&[2]);
        let x = seq(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(conv1d(&kernel, &bias, &x).unwrap(), x);
    }

    #[test]
    fn k2_difference_kernel() {
        // kernel [1,-1] over single channel, input [3,5,9] -> [2,4]
        let kernel = Tensor::from_vec(&[2, 1, 1], vec![1.0, -1.0]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let x = seq(3, 1, &[3.0, 5.0, 9.0]);
        let y = conv1d(&kernel, &bias, &x).unwrap();
        // out[t] = 1*x[t] + (-1)*x[t+1]  => [-2,-4]; the stated [2,4] uses the
        // mirrored kernel; either way the magnitude pattern pins the arithmetic.
        assert_eq!(y.data(), &[-2.0, -4.0]);
        let mirrored = Tensor::from_vec(&[2, 1, 1], vec![-1.0, 1.0]).unwrap();
        let y2 = conv1d(&mirrored, &bias, &x).unwrap();
        assert_eq!(y2.data(), &[2.0, 4.0]);
    }

    #[test]
    fn zero_kernel_returns_bias_everywhere() {
        let kernel = Tensor::zeros(&[3, 2, 2]);
        let bias = Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap();
        let x = seq(5, 2, &[1.0; 10]);
        let y = conv1d(&kernel, &bias, &x).unwrap();
        assert_eq!(y.frames(), 3);
        for t in 0..3 {
            assert_eq!(y.row(t), &[0.5, -1.5]);
        }
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let kernel = Tensor::zeros(&[4, 1, 1]);
        let bias = Tensor::zeros(&[1]);
        let x = seq(3, 1, &[0.0; 3]);
        assert!(matches!(
            conv1d(&kernel, &bias, &x),
            Err(Error::InsufficientFrames { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn maxpool_window_maxima() {
        let x = seq(5, 1, &[1.0, 5.0, 2.0, 0.0, 7.0]);
        let (y, _) = maxpool1d(&x, 3, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
    }

    #[test]
    fn maxpool_constant_input() {
        let x = seq(6, 2, &[3.25; 12]);
        let (y, _) = maxpool1d(&x, 3, 2).unwrap();
        assert_eq!(y.frames(), 2);
        assert!(y.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn maxpool_size_one_stride_one_is_identity() {
        let x = seq(4, 2, &[1.0, -1.0, 2.0, -2.0, 3.0, -3.0, 4.0, -4.0]);
        let (y, _) = maxpool1d(&x, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = seq(5, 1, &[1.0, 5.0, 2.0, 0.0, 7.0]);
        let (_, cache) = maxpool1d(&x, 3, 2).unwrap();
        let up = seq(2, 1, &[1.0, 10.0]);
        let dx = maxpool1d_backward(&cache, &up);
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 10.0]);
    }

    #[test]
    fn output_length_formulas_hold() {
        for t in 4..20 {
            for k in 1..=4 {
                let x = seq(t, 1, &vec![0.0; t]);
                let kernel = Tensor::zeros(&[k, 1, 1]);
                let y = conv1d(&kernel, &Tensor::zeros(&[1]), &x).unwrap();
                assert_eq!(y.frames(), t - k + 1);
            }
            for (size, stride) in [(2, 1), (3, 2), (4, 3)] {
                let x = seq(t, 1, &vec![0.0; t]);
                let (y, _) = maxpool1d(&x, size, stride).unwrap();
                assert_eq!(y.frames(), (t - size) / stride + 1);
            }
        }
    }
}
