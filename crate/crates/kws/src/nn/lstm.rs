use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::tensor::{FeatureSequence, LayerParams, Tensor};

/// Time direction for a recurrent pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Standard LSTM cell (input/forget/output gates sigmoid, candidate tanh,
/// forget gate present, no peepholes, zero initial state).
///
/// Parameters: `wx` [4H, I], `wh` [4H, H], `b` [4H], gate blocks ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub params: LayerParams,
    input: usize,
    hidden: usize,
}

/// Per-step activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    gates: Vec<f64>,  // T * 4H, post-nonlinearity
    cell: Vec<f64>,   // T * H
    tanh_c: Vec<f64>, // T * H
    hidden: Vec<f64>, // T * H
    frames: usize,
}

#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub wx: Tensor,
    pub wh: Tensor,
    pub b: Tensor,
}

impl LstmLayer {
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut params = LayerParams::new();
        params.insert("wx", Tensor::uniform_init(&[4 * hidden, input], input, rng));
        params.insert("wh", Tensor::uniform_init(&[4 * hidden, hidden], hidden, rng));
        params.insert("b", Tensor::zeros(&[4 * hidden]));
        LstmLayer {
            params,
            input,
            hidden,
        }
    }

    pub fn from_params(params: LayerParams) -> Self {
        let shape = params.get("wx").shape().to_vec();
        LstmLayer {
            params,
            input: shape[1],
            hidden: shape[0] / 4,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn forward(&self, input: &FeatureSequence) -> Result<(FeatureSequence, LstmCache)> {
        if input.dim() != self.input {
            return Err(Error::Shape {
                context: "lstm_sequence",
                expected: format!("input width {}", self.input),
                got: format!("{}", input.dim()),
            });
        }
        let (t_len, h) = (input.frames(), self.hidden);
        let wx = self.params.get("wx").data();
        let wh = self.params.get("wh").data();
        let b = self.params.get("b").data();

        let mut cache = LstmCache {
            gates: vec![0.0; t_len * 4 * h],
            cell: vec![0.0; t_len * h],
            tanh_c: vec![0.0; t_len * h],
            hidden: vec![0.0; t_len * h],
            frames: t_len,
        };
        let mut out = FeatureSequence::zeros(t_len, h);
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut z = vec![0.0; 4 * h];

        for t in 0..t_len {
            let x = input.row(t);
            z.copy_from_slice(b);
            for (r, zr) in z.iter_mut().enumerate() {
                let wxr = &wx[r * self.input..(r + 1) * self.input];
                let whr = &wh[r * h..(r + 1) * h];
                let mut acc = 0.0;
                for (a, b) in wxr.iter().zip(x) {
                    acc += a * b;
                }
                for (a, b) in whr.iter().zip(&h_prev) {
                    acc += a * b;
                }
                *zr += acc;
            }
            let gates = &mut cache.gates[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..h {
                gates[j] = sigmoid(z[j]); // input gate
                gates[h + j] = sigmoid(z[h + j]); // forget gate
                gates[2 * h + j] = z[2 * h + j].tanh(); // candidate
                gates[3 * h + j] = sigmoid(z[3 * h + j]); // output gate
            }
            for j in 0..h {
                let c = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
                let tc = c.tanh();
                cache.cell[t * h + j] = c;
                cache.tanh_c[t * h + j] = tc;
                let hv = gates[3 * h + j] * tc;
                cache.hidden[t * h + j] = hv;
                c_prev[j] = c;
                h_prev[j] = hv;
            }
            out.row_mut(t).copy_from_slice(&h_prev);
        }
        Ok((out, cache))
    }

    /// Backpropagation through time. `upstream` holds dL/dh_t for every
    /// frame; returns dL/dinput and accumulates parameter grads into `grads`
    /// (same names/shapes as `params`).
    pub fn backward_into(
        &self,
        input: &FeatureSequence,
        cache: &LstmCache,
        upstream: &FeatureSequence,
        grads: &mut LayerParams,
    ) -> FeatureSequence {
        let (t_len, h, i_len) = (cache.frames, self.hidden, self.input);
        assert_eq!(upstream.frames(), t_len);
        let wx = self.params.get("wx").data();
        let wh = self.params.get("wh").data();

        let mut dinput = FeatureSequence::zeros(t_len, i_len);
        let mut dh_carry = vec![0.0; h];
        let mut dc_carry = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];

        for t in (0..t_len).rev() {
            let gates = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
            for j in 0..h {
                let (ig, fg, gg, og) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                let tc = cache.tanh_c[t * h + j];
                let c_prev = if t > 0 { cache.cell[(t - 1) * h + j] } else { 0.0 };
                let dh = upstream.row(t)[j] + dh_carry[j];
                let dog = dh * tc;
                let dc = dh * og * (1.0 - tc * tc) + dc_carry[j];
                let dfg = dc * c_prev;
                let dig = dc * gg;
                let dgg = dc * ig;
                dc_carry[j] = dc * fg;
                dz[j] = dig * ig * (1.0 - ig);
                dz[h + j] = dfg * fg * (1.0 - fg);
                dz[2 * h + j] = dgg * (1.0 - gg * gg);
                dz[3 * h + j] = dog * og * (1.0 - og);
            }
            let x = input.row(t);
            {
                let db = grads.get_mut("b").data_mut();
                for (acc, &g) in db.iter_mut().zip(&dz) {
                    *acc += g;
                }
            }
            {
                let dwx = grads.get_mut("wx").data_mut();
                for (r, &g) in dz.iter().enumerate() {
                    if g != 0.0 {
                        let row = &mut dwx[r * i_len..(r + 1) * i_len];
                        for (acc, &xv) in row.iter_mut().zip(x) {
                            *acc += g * xv;
                        }
                    }
                }
            }
            if t > 0 {
                // h_prev is zero at t == 0, so that step adds nothing to dwh
                let h_prev = &cache.hidden[(t - 1) * h..t * h];
                let dwh = grads.get_mut("wh").data_mut();
                for (r, &g) in dz.iter().enumerate() {
                    if g != 0.0 {
                        let row = &mut dwh[r * h..(r + 1) * h];
                        for (acc, &hv) in row.iter_mut().zip(h_prev) {
                            *acc += g * hv;
                        }
                    }
                }
            }
            // dx_t = wx^T dz ; dh_carry = wh^T dz
            let dx = dinput.row_mut(t);
            for (r, &g) in dz.iter().enumerate() {
                if g != 0.0 {
                    let wxr = &wx[r * i_len..(r + 1) * i_len];
                    for (acc, &w) in dx.iter_mut().zip(wxr) {
                        *acc += g * w;
                    }
                }
            }
            for v in dh_carry.iter_mut() {
                *v = 0.0;
            }
            for (r, &g) in dz.iter().enumerate() {
                if g != 0.0 {
                    let whr = &wh[r * h..(r + 1) * h];
                    for (acc, &w) in dh_carry.iter_mut().zip(whr) {
                        *acc += g * w;
                    }
                }
            }
        }
        dinput
    }

    /// Final hidden state row of a cached forward pass.
    pub fn final_hidden<'a>(&self, cache: &'a LstmCache) -> &'a [f64] {
        let h = self.hidden;
        &cache.hidden[(cache.frames - 1) * h..cache.frames * h]
    }
}

/// Run an LSTM over a sequence in the given direction.
///
/// `Backward` processes frames in reverse and re-reverses the output so row t
/// still lines up with input frame t.
pub fn lstm_sequence(
    layer: &LstmLayer,
    input: &FeatureSequence,
    direction: Direction,
) -> Result<FeatureSequence> {
    match direction {
        Direction::Forward => Ok(layer.forward(input)?.0),
        Direction::Backward => {
            let (out, _) = layer.forward(&input.reversed())?;
            Ok(out.reversed())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn const_layer(input: usize, hidden: usize, w: f64) -> LstmLayer {
        let mut params = LayerParams::new();
        params.insert(
            "wx",
            Tensor::from_vec(&[4 * hidden, input], vec![w; 4 * hidden * input]).unwrap(),
        );
        params.insert(
            "wh",
            Tensor::from_vec(&[4 * hidden, hidden], vec![w; 4 * hidden * hidden]).unwrap(),
        );
        params.insert("b", Tensor::zeros(&[4 * hidden]));
        LstmLayer::from_params(params)
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let layer = const_layer(3, 4, 0.0);
        let input = FeatureSequence::from_vec(5, 3, (0..15).map(|v| v as f64).collect()).unwrap();
        let (out, _) = layer.forward(&input).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_cell_hand_evaluation() {
        // x = 1, all weights 1, biases 0, single frame:
        // h1 = sigmoid(1) * tanh(sigmoid(1) * tanh(1))
        let layer = const_layer(1, 1, 1.0);
        let input = FeatureSequence::from_vec(1, 1, vec![1.0]).unwrap();
        let (out, _) = layer.forward(&input).unwrap();
        let s1 = sigmoid(1.0);
        let expected = s1 * (s1 * f64::tanh(1.0)).tanh();
        assert!((out.row(0)[0] - expected).abs() < 1e-12);
        assert!((expected - 0.3696).abs() < 1e-4);
    }

    #[test]
    fn backward_direction_on_palindrome_mirrors_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = LstmLayer::new(2, 3, &mut rng);
        // palindromic in time: frame t == frame T-1-t
        let rows = [[0.3, -1.0], [2.0, 0.5], [0.3, -1.0]];
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let input = FeatureSequence::from_vec(3, 2, data).unwrap();
        let fwd = lstm_sequence(&layer, &input, Direction::Forward).unwrap();
        let bwd = lstm_sequence(&layer, &input, Direction::Backward).unwrap();
        assert_eq!(bwd, fwd.reversed());
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = LstmLayer::new(4, 3, &mut rng);
        let input = FeatureSequence::zeros(5, 2);
        assert!(matches!(layer.forward(&input), Err(Error::Shape { .. })));
    }

    #[test]
    fn outputs_stay_finite_with_large_weights() {
        let layer = const_layer(2, 2, 10.0);
        let input = FeatureSequence::from_vec(50, 2, vec![9.5; 100]).unwrap();
        let (out, _) = layer.forward(&input).unwrap();
        assert!(out.all_finite());
    }
}
