//! The acoustic side of the detector: a stack of unidirectional LSTM layers
//! pretrained with CTC on phone targets and frozen afterwards, plus the
//! static conv1 + max-pooling stage whose output feeds the dynamic top
//! convolution.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{collapse, ctc_loss, log_sum_exp, LogPosteriorgram};
use crate::error::{Error, Result};
use crate::nn::{
    maxpool1d, maxpool1d_backward, tanh_seq, tanh_seq_backward, AdamState, AffineLayer,
    Conv1dLayer, LstmCache, LstmLayer, MaxPoolCache,
};
use crate::tensor::{FeatureSequence, PhoneSeq};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticConfig {
    /// Input feature width D.
    pub dim: usize,
    /// Number of recurrent layers L.
    pub layers: usize,
    /// Hidden units per recurrent layer H.
    pub hidden: usize,
    /// Phone inventory size P (softmax covers P+1 with blank).
    pub phones: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
}

impl AcousticConfig {
    /// Small configuration that trains in minutes but keeps every
    /// structural ratio of the full model.
    pub fn desk_scale() -> Self {
        AcousticConfig {
            dim: 16,
            layers: 2,
            hidden: 32,
            phones: 12,
            conv_channels: 32,
            conv_kernel: 5,
            pool_size: 3,
            pool_stride: 2,
        }
    }

    /// Full-size configuration: `hidden` is 64 or 96, 46 phones, 96
    /// convolution channels.
    pub fn paper_scale(hidden: usize) -> Self {
        AcousticConfig {
            dim: 16,
            layers: 5,
            hidden,
            phones: 46,
            conv_channels: 96,
            conv_kernel: 5,
            pool_size: 3,
            pool_stride: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.dim >= 1
            && self.layers >= 1
            && self.hidden >= 1
            && self.phones >= 2
            && self.conv_channels >= 1
            && self.conv_kernel >= 1
            && self.pool_size >= 1
            && self.pool_stride >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("{self:?}")))
        }
    }

    /// Smallest input length that yields one pooled frame.
    pub fn min_frames(&self) -> usize {
        self.conv_kernel + self.pool_size - 1
    }

    /// Pooled output length for an input of `frames` frames.
    pub fn encoded_len(&self, frames: usize) -> Option<usize> {
        let conv_len = frames.checked_sub(self.conv_kernel)? + 1;
        Some(conv_len.checked_sub(self.pool_size)? / self.pool_stride + 1)
    }

    /// Index of the last pooled frame whose receptive window lies fully
    /// within input frames 0..=t.
    pub fn last_pooled_at(&self, t: usize) -> Option<usize> {
        let span = self.conv_kernel + self.pool_size - 2;
        Some(t.checked_sub(span)? / self.pool_stride)
    }
}

pub struct EncoderStack {
    pub config: AcousticConfig,
    pub recurrent: Vec<LstmLayer>,
    /// Projection to P+1 phone logits; used for pretraining and alignment.
    pub softmax: AffineLayer,
    pub conv1: Conv1dLayer,
}

/// Activations cached by [`EncoderStack::recurrent_forward`]: the input to
/// each recurrent layer plus each layer's output and cell cache.
pub struct RecurrentTrace {
    pub outputs: Vec<FeatureSequence>,
    pub caches: Vec<LstmCache>,
}

impl EncoderStack {
    pub fn new<R: Rng>(config: AcousticConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut recurrent = Vec::with_capacity(config.layers);
        let mut width = config.dim;
        for _ in 0..config.layers {
            recurrent.push(LstmLayer::new(width, config.hidden, rng));
            width = config.hidden;
        }
        let softmax = AffineLayer::new(config.hidden, config.phones + 1, rng);
        let conv1 = Conv1dLayer::new(
            config.conv_kernel,
            config.hidden,
            config.conv_channels,
            rng,
        );
        Ok(EncoderStack {
            config,
            recurrent,
            softmax,
            conv1,
        })
    }

    pub fn recurrent_forward(&self, x: &FeatureSequence) -> Result<RecurrentTrace> {
        let mut outputs = Vec::with_capacity(self.recurrent.len());
        let mut caches = Vec::with_capacity(self.recurrent.len());
        for (i, layer) in self.recurrent.iter().enumerate() {
            let input = if i == 0 { x } else { &outputs[i - 1] };
            let (out, cache) = layer.forward(input)?;
            outputs.push(out);
            caches.push(cache);
        }
        Ok(RecurrentTrace { outputs, caches })
    }

    /// Output of the top recurrent layer.
    pub fn recurrent_output(&self, x: &FeatureSequence) -> Result<FeatureSequence> {
        let mut trace = self.recurrent_forward(x)?;
        Ok(trace.outputs.pop().expect("at least one layer"))
    }

    /// Per-frame log-softmax over P+1 phone labels.
    pub fn phone_posteriors(&self, x: &FeatureSequence) -> Result<LogPosteriorgram> {
        let rec = self.recurrent_output(x)?;
        self.posteriors_from_recurrent(&rec)
    }

    pub fn posteriors_from_recurrent(&self, rec: &FeatureSequence) -> Result<LogPosteriorgram> {
        let labels = self.config.phones + 1;
        let mut data = Vec::with_capacity(rec.frames() * labels);
        for t in 0..rec.frames() {
            let logits = self.softmax.forward(rec.row(t))?;
            let lse = log_sum_exp(&logits);
            data.extend(logits.iter().map(|v| v - lse));
        }
        LogPosteriorgram::new(rec.frames(), labels, data)
    }

    /// F(x): recurrent stack, conv1, tanh, max-pool.
    pub fn encode(&self, x: &FeatureSequence) -> Result<FeatureSequence> {
        let rec = self.recurrent_output(x)?;
        self.encode_from_recurrent(&rec)
    }

    pub fn encode_from_recurrent(&self, rec: &FeatureSequence) -> Result<FeatureSequence> {
        let conv = self.conv1.forward(rec)?;
        let act = tanh_seq(&conv);
        let (pooled, _) = maxpool1d(&act, self.config.pool_size, self.config.pool_stride)?;
        Ok(pooled)
    }

    /// Same as [`encode_from_recurrent`] but keeps what the backward pass
    /// needs (tanh activations and pooling argmaxes).
    pub fn encode_with_cache(
        &self,
        rec: &FeatureSequence,
    ) -> Result<(FeatureSequence, FeatureSequence, MaxPoolCache)> {
        let conv = self.conv1.forward(rec)?;
        let act = tanh_seq(&conv);
        let (pooled, cache) = maxpool1d(&act, self.config.pool_size, self.config.pool_stride)?;
        Ok((pooled, act, cache))
    }

    /// Backward through pool, tanh, and conv1; accumulates conv1 grads.
    /// The gradient w.r.t. the recurrent output is discarded because the
    /// recurrent layers are frozen when this path is exercised.
    pub fn encode_backward_into(
        &self,
        rec: &FeatureSequence,
        act: &FeatureSequence,
        pool_cache: &MaxPoolCache,
        dpooled: &FeatureSequence,
        conv1_grads: &mut crate::tensor::LayerParams,
    ) {
        let dact = maxpool1d_backward(pool_cache, dpooled);
        let dconv = tanh_seq_backward(act, &dact);
        self.conv1.backward_into(rec, &dconv, conv1_grads, false);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Utterances per optimizer step.
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            lr: 3e-3,
            batch: 8,
        }
    }
}

/// CTC-pretrain a fresh stack on (features, phone sequence) pairs.
///
/// Returns the stack and the mean per-frame loss of each epoch. Infeasible
/// utterances are skipped with a warning; a non-finite loss aborts.
pub fn pretrain_ctc<R: Rng>(
    config: &AcousticConfig,
    data: &[(FeatureSequence, PhoneSeq)],
    train: &PretrainConfig,
    rng: &mut R,
) -> Result<(EncoderStack, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("pretrain_ctc"));
    }
    let mut stack = EncoderStack::new(config.clone(), rng)?;
    let mut losses = Vec::with_capacity(train.epochs);

    let mut opt: Vec<AdamState> = stack
        .recurrent
        .iter()
        .map(|l| AdamState::new(train.lr, &l.params))
        .chain(std::iter::once(AdamState::new(train.lr, &stack.softmax.params)))
        .collect();

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..train.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut epoch_frames = 0usize;
        for chunk in order.chunks(train.batch.max(1)) {
            let mut rec_grads: Vec<_> = stack
                .recurrent
                .iter()
                .map(|l| l.params.zeros_like())
                .collect();
            let mut softmax_grads = stack.softmax.params.zeros_like();
            let mut batch_frames = 0usize;

            for &idx in chunk {
                let (x, target) = &data[idx];
                let trace = stack.recurrent_forward(x)?;
                let rec = trace.outputs.last().expect("layer output");
                let pg = stack.posteriors_from_recurrent(rec)?;
                let (loss, dlogp) = match ctc_loss(&pg, target) {
                    Ok(r) => r,
                    Err(Error::InfeasibleTarget { frames, target_len, .. }) => {
                        log::warn!(
                            "skipping utterance {idx}: {frames} frames < target {target_len}"
                        );
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "CTC loss {loss} at epoch {epoch}, utterance {idx}"
                    )));
                }
                epoch_loss += loss;
                epoch_frames += x.frames();
                batch_frames += x.frames();

                // backward: log-softmax, then the affine projection, then BPTT
                let labels = stack.config.phones + 1;
                let mut drec = FeatureSequence::zeros(rec.frames(), rec.dim());
                for t in 0..rec.frames() {
                    let dl = &dlogp[t * labels..(t + 1) * labels];
                    let gsum: f64 = dl.iter().sum();
                    let dlogits: Vec<f64> = (0..labels)
                        .map(|c| dl[c] - pg.logp(t, c as u32).exp() * gsum)
                        .collect();
                    let dx = stack
                        .softmax
                        .backward_into(rec.row(t), &dlogits, &mut softmax_grads);
                    drec.row_mut(t).copy_from_slice(&dx);
                }
                let mut upstream = drec;
                for i in (0..stack.recurrent.len()).rev() {
                    let input = if i == 0 { x } else { &trace.outputs[i - 1] };
                    upstream = stack.recurrent[i].backward_into(
                        input,
                        &trace.caches[i],
                        &upstream,
                        &mut rec_grads[i],
                    );
                }
            }

            if batch_frames == 0 {
                continue;
            }
            let norm = 1.0 / batch_frames as f64;
            for g in rec_grads.iter_mut().chain(std::iter::once(&mut softmax_grads)) {
                for t in g.tensors_mut() {
                    for v in t.data_mut() {
                        *v *= norm;
                    }
                }
            }
            let (rec_opts, softmax_opt) = opt.split_at_mut(stack.recurrent.len());
            for (i, layer) in stack.recurrent.iter_mut().enumerate() {
                crate::nn::adam_step(&mut rec_opts[i], &mut layer.params, &rec_grads[i]);
            }
            crate::nn::adam_step(&mut softmax_opt[0], &mut stack.softmax.params, &softmax_grads);
        }
        let mean = if epoch_frames == 0 {
            0.0
        } else {
            epoch_loss / epoch_frames as f64
        };
        log::info!("pretrain epoch {epoch}: {mean:.4} nats/frame");
        losses.push(mean);
    }
    Ok((stack, losses))
}

/// Collapse of the per-frame argmax labeling.
pub fn greedy_decode(pg: &LogPosteriorgram) -> PhoneSeq {
    let mut best = Vec::with_capacity(pg.frames());
    for t in 0..pg.frames() {
        let row = pg.row(t);
        let mut arg = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = c;
            }
        }
        best.push(arg as u32);
    }
    collapse(&best, pg.blank())
}

/// Levenshtein distance between label sequences.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Greedy-decode PER: total edit distance over total reference length.
pub fn phone_error_rate(
    stack: &EncoderStack,
    data: &[(FeatureSequence, PhoneSeq)],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("phone_error_rate"));
    }
    let mut edits = 0usize;
    let mut total = 0usize;
    for (x, target) in data {
        let hyp = greedy_decode(&stack.phone_posteriors(x)?);
        edits += edit_distance(hyp.as_slice(), target.as_slice());
        total += target.len();
    }
    Ok(edits as f64 / total.max(1) as f64)
}
