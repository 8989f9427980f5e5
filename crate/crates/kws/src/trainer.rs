//! Dataset creation from forced alignments, the joint keyword-spotting
//! training loop, and residual fine-tuning.
//!
//! Training targets are suffixes sampled from alignment windows: for a batch
//! member (utterance i, frame t), positives are random suffixes of the
//! collapsed alignment of the window ending at t, and negatives are the union
//! of the other members' positives. The recurrent acoustic layers stay
//! frozen; gradients reach conv1 and the keyword encoder only.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::EncoderStack;
use crate::ctc::{collapse, forced_align};
use crate::error::{Error, Result};
use crate::io::features::read_features;
use crate::io::manifest::{AlignmentRecord, CorpusManifest};
use crate::keyword::{receptive_field, y_index, EncodeCache, FilterBank, KeywordEncoder};
use crate::nn::{adam_step, sigmoid, softplus, AdamState};
use crate::tensor::{FeatureSequence, LayerParams, PhoneSeq, Tensor};

#[derive(Debug, Clone)]
pub struct AlignedUtterance {
    pub id: String,
    pub features: FeatureSequence,
    pub phones: PhoneSeq,
    /// Frame labels 0..=P with blank = P; collapses back to `phones`.
    pub path: Vec<u32>,
}

/// Force-align every manifest entry with the pretrained stack. Infeasible
/// entries (too few frames for their target) are skipped with a warning;
/// an empty result is an error.
pub fn align_corpus(
    stack: &EncoderStack,
    manifest: &CorpusManifest,
) -> Result<Vec<AlignedUtterance>> {
    let mut out = Vec::with_capacity(manifest.entries.len());
    let mut skipped = 0usize;
    for entry in &manifest.entries {
        let features = read_features(&manifest.feature_path(entry))?;
        let phones = PhoneSeq(entry.phones.clone());
        if features.frames() == 0 {
            log::warn!("skipping {}: empty feature file", entry.id);
            skipped += 1;
            continue;
        }
        let logp = stack.phone_posteriors(&features)?;
        match forced_align(&logp, &phones) {
            Ok(path) => {
                debug_assert_eq!(collapse(&path, logp.blank()), phones);
                out.push(AlignedUtterance {
                    id: entry.id.clone(),
                    features,
                    phones,
                    path,
                });
            }
            Err(Error::InfeasibleTarget { .. }) => {
                log::warn!("skipping {}: target infeasible for its frame count", entry.id);
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("no utterance could be force-aligned"));
    }
    if skipped > 0 {
        log::warn!("alignment skipped {skipped} of {} utterances", manifest.entries.len());
    }
    Ok(out)
}

pub fn alignment_records(utts: &[AlignedUtterance]) -> Vec<AlignmentRecord> {
    utts.iter()
        .map(|u| AlignmentRecord {
            utterance: u.id.clone(),
            path: u.path.clone(),
        })
        .collect()
}

/// Rebuild aligned utterances from a manifest plus stored alignment records,
/// checking the collapse invariant on the way in.
pub fn load_aligned(
    manifest: &CorpusManifest,
    records: &[AlignmentRecord],
) -> Result<Vec<AlignedUtterance>> {
    let blank = manifest.phones as u32;
    let by_id: BTreeMap<&str, &AlignmentRecord> = records
        .iter()
        .map(|r| (r.utterance.as_str(), r))
        .collect();
    let mut out = Vec::new();
    for entry in &manifest.entries {
        let Some(record) = by_id.get(entry.id.as_str()) else {
            continue;
        };
        let features = read_features(&manifest.feature_path(entry))?;
        let phones = PhoneSeq(entry.phones.clone());
        if record.path.len() != features.frames() {
            return Err(Error::Format {
                path: entry.id.clone(),
                reason: format!(
                    "alignment has {} labels for {} frames",
                    record.path.len(),
                    features.frames()
                ),
            });
        }
        if collapse(&record.path, blank) != phones {
            return Err(Error::Format {
                path: entry.id.clone(),
                reason: "alignment does not collapse to the manifest phones".into(),
            });
        }
        out.push(AlignedUtterance {
            id: entry.id.clone(),
            features,
            phones,
            path: record.path.clone(),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("no manifest entry has an alignment"));
    }
    Ok(out)
}

/// Collapsed phone content of the alignment slice from frame t-window to
/// frame t inclusive (window+1 frames, one more than the receptive field:
/// the slack absorbs the pooled-frame tolerance).
pub fn window_phones(utt: &AlignedUtterance, t: usize, window: usize, blank: u32) -> Result<PhoneSeq> {
    if t < window {
        return Err(Error::Window { frame: t, window });
    }
    Ok(collapse(&utt.path[t - window..=t], blank))
}

/// Up to `count` distinct suffixes of the window's collapsed phones, lengths
/// drawn without replacement from [3, min(10, |s|)]. Empty when |s| < 3.
pub fn sample_positives<R: Rng>(
    utt: &AlignedUtterance,
    t: usize,
    window: usize,
    count: usize,
    blank: u32,
    rng: &mut R,
) -> Result<Vec<PhoneSeq>> {
    let s = window_phones(utt, t, window, blank)?;
    let hi = s.len().min(10);
    if hi < 3 {
        return Ok(Vec::new());
    }
    let mut lens: Vec<usize> = (3..=hi).collect();
    lens.shuffle(rng);
    lens.truncate(count);
    Ok(lens.into_iter().map(|l| s.suffix(l)).collect())
}

/// Frames where the alignment finishes emitting a phone: a non-blank label
/// about to change (or at the end of the utterance).
pub fn phone_end_frames(path: &[u32], blank: u32) -> Vec<usize> {
    (0..path.len())
        .filter(|&t| path[t] != blank && (t + 1 == path.len() || path[t + 1] != path[t]))
        .collect()
}

#[derive(Debug, Clone)]
pub struct KeywordSampleSet {
    pub t: usize,
    pub positives: Vec<PhoneSeq>,
    pub negatives: Vec<PhoneSeq>,
}

#[derive(Debug, Clone)]
pub struct BatchMember {
    /// Index into the aligned-utterance list.
    pub utterance: usize,
    pub samples: KeywordSampleSet,
}

/// How far from the end a hard negative may differ. The first phones of a
/// long suffix can reach the window with only a frame or two; a corruption
/// there is indistinguishable from a true match and only deflates positive
/// scores. The last few phones are always fully visible.
const MAX_CORRUPTION_DEPTH: usize = 3;

/// Corrupt one non-final phone of `seq`, keeping the tail anchored. The
/// replacement avoids both neighbors: a collapsed window never contains
/// adjacent repeats, so a repeat would make the negative trivially
/// unmatchable. Returns None when the inventory leaves no legal choice.
fn corrupt_early_phone<R: Rng>(seq: &PhoneSeq, phones: u32, rng: &mut R) -> Option<PhoneSeq> {
    if seq.len() < 2 {
        return None;
    }
    let depth = rng.gen_range(1..=MAX_CORRUPTION_DEPTH.min(seq.len() - 1));
    let pos = seq.len() - 1 - depth;
    let mut out = seq.as_slice().to_vec();
    let left = if pos > 0 { Some(out[pos - 1]) } else { None };
    let banned = [Some(out[pos]), left, Some(out[pos + 1])];
    let choices: Vec<u32> = (0..phones).filter(|p| !banned.contains(&Some(*p))).collect();
    if choices.is_empty() {
        return None;
    }
    out[pos] = choices[rng.gen_range(0..choices.len())];
    Some(PhoneSeq(out))
}

/// Assemble one training batch: draw positives per member, then give each
/// member the union of everyone else's positives as negatives. Two kinds of
/// contradictory targets are dropped: sequences that are also a valid suffix
/// of the member's own window, and positives of a same-utterance member
/// within `guard` input frames, whose true end would fall inside this
/// member's scoring tolerance band.
///
/// On top of the in-batch pool, each member gets `hard_per_positive`
/// corruptions of every own positive as negatives. In-batch sequences
/// rarely share more than a phone or two with the member's own tail, so
/// without these the encoder never has to look past the last couple of
/// phones before firing.
pub fn build_batch<R: Rng>(
    utts: &[AlignedUtterance],
    members: &[(usize, usize)],
    window: usize,
    positives_per_sample: usize,
    guard: usize,
    hard_per_positive: usize,
    blank: u32,
    rng: &mut R,
) -> Result<Vec<BatchMember>> {
    let mut positives = Vec::with_capacity(members.len());
    for &(u, t) in members {
        positives.push(sample_positives(&utts[u], t, window, positives_per_sample, blank, rng)?);
    }
    let mut batch = Vec::with_capacity(members.len());
    for (i, &(u, t)) in members.iter().enumerate() {
        let own = window_phones(&utts[u], t, window, blank)?;
        let mut negatives = BTreeSet::new();
        for (j, other) in positives.iter().enumerate() {
            if j == i {
                continue;
            }
            let (u_j, t_j) = members[j];
            if u_j == u && t.abs_diff(t_j) <= guard {
                continue;
            }
            for seq in other {
                if !own.ends_with(seq) {
                    negatives.insert(seq.clone());
                }
            }
        }
        for seq in &positives[i] {
            for _ in 0..hard_per_positive {
                if let Some(hard) = corrupt_early_phone(seq, blank, rng) {
                    if !own.ends_with(&hard) {
                        negatives.insert(hard);
                    }
                }
            }
        }
        batch.push(BatchMember {
            utterance: u,
            samples: KeywordSampleSet {
                t,
                positives: positives[i].clone(),
                negatives: negatives.into_iter().collect(),
            },
        });
    }
    Ok(batch)
}

/// Cross-entropy of one sample set, in logit form: the first `positives`
/// entries of `logits` are K+ examples (target y=1), the rest K− (target
/// y=0). Returns the summed loss and d(loss)/d(logit).
pub fn kws_loss(logits: &[f64], positives: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, &z) in logits.iter().enumerate() {
        if i < positives {
            loss += softplus(-z);
            grad.push(sigmoid(z) - 1.0);
        } else {
            loss += softplus(z);
            grad.push(sigmoid(z));
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub positives_per_sample: usize,
    /// Suffix-sampling window in input frames; None uses the detector's
    /// receptive field.
    pub window: Option<usize>,
    pub lr: f64,
    /// Cap on sampled phone-end frames per utterance per epoch.
    pub max_frames_per_utterance: usize,
    /// Pooled-frame slack when scoring a target at frame t: the best logit
    /// within ±tolerance output steps counts.
    pub tolerance: usize,
    /// Synthetic near-miss negatives per positive (one corrupted phone,
    /// tail kept).
    pub hard_negatives_per_positive: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 128,
            positives_per_sample: 2,
            window: None,
            lr: 1e-3,
            max_frames_per_utterance: 8,
            tolerance: 1,
            hard_negatives_per_positive: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidConfig(format!("train: {reason}"));
        if self.batch_size == 0 {
            return Err(bad("batch size must be positive"));
        }
        if self.positives_per_sample == 0 {
            return Err(bad("need at least one positive per sample"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(bad("learning rate must be positive"));
        }
        if self.max_frames_per_utterance == 0 {
            return Err(bad("need at least one sample frame per utterance"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainStats {
    /// Mean per-member loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub members_per_epoch: Vec<usize>,
    pub window: usize,
}

/// Joint KWS training: Adam on the suffix-sampling cross-entropy, updating
/// conv1 and the keyword encoder while the recurrent stack and the softmax
/// projection stay frozen.
pub fn train_kws<R: Rng>(
    stack: &mut EncoderStack,
    encoder: &mut KeywordEncoder,
    utts: &[AlignedUtterance],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainStats> {
    config.validate()?;
    if utts.is_empty() {
        return Err(Error::EmptyDataset("no aligned utterances to train on"));
    }
    let blank = stack.config.phones as u32;
    let kt = encoder.config.top_kernel;
    let window = config
        .window
        .unwrap_or_else(|| receptive_field(&stack.config, kt));

    // The recurrent layers are frozen, so their outputs can be computed once.
    let recs: Vec<FeatureSequence> = utts
        .iter()
        .map(|u| stack.recurrent_output(&u.features))
        .collect::<Result<_>>()?;

    let mut opt_conv = AdamState::new(config.lr, &stack.conv1.params);
    let mut opt_embed = AdamState::new(config.lr, &encoder.embed);
    let mut opt_fwd = AdamState::new(config.lr, &encoder.fwd.params);
    let mut opt_bwd = AdamState::new(config.lr, &encoder.bwd.params);
    let mut opt_affine = AdamState::new(config.lr, &encoder.affine.params);

    // Two same-utterance members whose output indices land within each
    // other's tolerance band would train the same position both ways. Skip
    // cross-negatives inside this input-frame radius.
    let guard = stack.config.pool_stride * (2 * config.tolerance + 1) - 1;

    let mut stats = TrainStats {
        window,
        ..TrainStats::default()
    };
    for epoch in 0..config.epochs {
        // Keep each utterance's sampled frames together: overlapping windows
        // of one utterance yield each other's suffixes as near-miss
        // negatives, which is what teaches the filters to reject an almost
        // matching tail. A flat shuffle would scatter them across batches
        // and leave only easy random negatives.
        let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
        for (u, utt) in utts.iter().enumerate() {
            let mut ends: Vec<usize> = phone_end_frames(&utt.path, blank)
                .into_iter()
                .filter(|&t| t >= window && y_index(&stack.config, kt, t).is_some())
                .collect();
            ends.shuffle(rng);
            ends.truncate(config.max_frames_per_utterance);
            if !ends.is_empty() {
                groups.push(ends.into_iter().map(|t| (u, t)).collect());
            }
        }
        if groups.is_empty() {
            return Err(Error::EmptyDataset(
                "no sampleable frames: utterances end before the window",
            ));
        }
        groups.shuffle(rng);
        let members: Vec<(usize, usize)> = groups.into_iter().flatten().collect();

        let mut epoch_loss = 0.0;
        let mut epoch_members = 0usize;
        for chunk in members.chunks(config.batch_size) {
            let batch = build_batch(
                utts,
                chunk,
                window,
                config.positives_per_sample,
                guard,
                config.hard_negatives_per_positive,
                blank,
                rng,
            )?;
            let loss = train_step(
                stack,
                encoder,
                &recs,
                &batch,
                config.tolerance,
                &mut opt_conv,
                &mut opt_embed,
                &mut opt_fwd,
                &mut opt_bwd,
                &mut opt_affine,
            )?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite batch loss in epoch {epoch}"
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            epoch_members += batch.len();
        }
        let mean = epoch_loss / epoch_members as f64;
        log::info!("kws epoch {epoch}: mean loss {mean:.4} over {epoch_members} samples");
        stats.epoch_losses.push(mean);
        stats.members_per_epoch.push(epoch_members);
    }
    Ok(stats)
}

/// One Adam step over a batch. Returns the mean per-member loss.
#[allow(clippy::too_many_arguments)]
fn train_step(
    stack: &mut EncoderStack,
    encoder: &mut KeywordEncoder,
    recs: &[FeatureSequence],
    batch: &[BatchMember],
    tolerance: usize,
    opt_conv: &mut AdamState,
    opt_embed: &mut AdamState,
    opt_fwd: &mut AdamState,
    opt_bwd: &mut AdamState,
    opt_affine: &mut AdamState,
) -> Result<f64> {
    let kt = encoder.config.top_kernel;
    let channels = encoder.config.channels;

    // Encode each distinct keyword once per batch; positives of one member
    // reappear as negatives of the others.
    let mut filters: BTreeMap<PhoneSeq, (Tensor, EncodeCache)> = BTreeMap::new();
    for member in batch {
        for seq in member
            .samples
            .positives
            .iter()
            .chain(member.samples.negatives.iter())
        {
            if !filters.contains_key(seq) {
                let (f, cache) = encoder.encode_with_cache(seq)?;
                filters.insert(seq.clone(), (f.base, cache));
            }
        }
    }

    let mut dfilters: BTreeMap<PhoneSeq, Tensor> = BTreeMap::new();
    let mut conv_grads = stack.conv1.params.zeros_like();
    let mut enc_grads = encoder.zero_grads();
    let inv_n = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;

    for member in batch {
        let rec = &recs[member.utterance];
        let t = member.samples.t;
        let v = y_index(&stack.config, kt, t).expect("members pre-filtered");
        let pooled_len = stack
            .config
            .encoded_len(rec.frames())
            .expect("aligned utterances satisfy the minimum length");
        let y_last = pooled_len - kt;
        let vlo = v.saturating_sub(tolerance);
        let vhi = (v + tolerance).min(y_last);

        // Work on the smallest recurrent-output slice that covers pooled
        // frames vlo ..= vhi+kt-1; slice pooled index j is global vlo+j.
        let stride = stack.config.pool_stride;
        let lo = stride * vlo;
        let hi = stride * (vhi + kt - 1) + stack.config.pool_size - 1 + stack.config.conv_kernel - 1;
        let slice = slice_frames(rec, lo, hi + 1);
        let (pooled, act, pool_cache) = stack.encode_with_cache(&slice)?;
        debug_assert_eq!(pooled.frames(), vhi - vlo + kt);

        let seqs: Vec<&PhoneSeq> = member
            .samples
            .positives
            .iter()
            .chain(member.samples.negatives.iter())
            .collect();
        if seqs.is_empty() {
            continue;
        }
        let candidates = vhi - vlo + 1;
        let mut logits = Vec::with_capacity(seqs.len());
        let mut picks = Vec::with_capacity(seqs.len());
        for seq in &seqs {
            let filter = &filters[*seq].0;
            let mut best = f64::NEG_INFINITY;
            let mut best_j = 0;
            for j in 0..candidates {
                let mut z = 0.0;
                for r in 0..kt {
                    let row = pooled.row(j + r);
                    let frow = &filter.data()[r * channels..(r + 1) * channels];
                    z += row.iter().zip(frow).map(|(a, b)| a * b).sum::<f64>();
                }
                if z > best {
                    best = z;
                    best_j = j;
                }
            }
            logits.push(best);
            picks.push(best_j);
        }
        let (loss, dz) = kws_loss(&logits, member.samples.positives.len());
        total_loss += loss;

        let mut dpooled = FeatureSequence::zeros(pooled.frames(), channels);
        for ((seq, &j), &g) in seqs.iter().zip(&picks).zip(&dz) {
            let g = g * inv_n;
            let filter = &filters[*seq].0;
            let df = dfilters
                .entry((*seq).clone())
                .or_insert_with(|| Tensor::zeros(&[kt, channels]));
            for r in 0..kt {
                let prow = pooled.row(j + r);
                let frow = &filter.data()[r * channels..(r + 1) * channels];
                let drow = &mut df.data_mut()[r * channels..(r + 1) * channels];
                let urow = &mut dpooled.row_mut(j + r);
                for c in 0..channels {
                    drow[c] += g * prow[c];
                    urow[c] += g * frow[c];
                }
            }
        }
        stack.encode_backward_into(&slice, &act, &pool_cache, &dpooled, &mut conv_grads);
    }

    for (seq, df) in &dfilters {
        let (_, cache) = &filters[seq];
        encoder.encode_backward_into(seq, cache, df, &mut enc_grads);
    }

    adam_step(opt_conv, &mut stack.conv1.params, &conv_grads);
    adam_step(opt_embed, &mut encoder.embed, &enc_grads.embed);
    adam_step(opt_fwd, &mut encoder.fwd.params, &enc_grads.fwd);
    adam_step(opt_bwd, &mut encoder.bwd.params, &enc_grads.bwd);
    adam_step(opt_affine, &mut encoder.affine.params, &enc_grads.affine);
    Ok(total_loss * inv_n)
}

fn slice_frames(feats: &FeatureSequence, lo: usize, hi_excl: usize) -> FeatureSequence {
    let dim = feats.dim();
    let mut data = Vec::with_capacity((hi_excl - lo) * dim);
    for t in lo..hi_excl {
        data.extend_from_slice(feats.row(t));
    }
    FeatureSequence::from_vec(hi_excl - lo, dim, data).expect("slice bounds checked by caller")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Stop after this many epochs without held-out improvement.
    pub patience: usize,
    /// Every n-th example is held out for early stopping (0 disables).
    pub holdout_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            lr: 1e-3,
            batch: 32,
            patience: 3,
            holdout_every: 5,
        }
    }
}

#[derive(Debug)]
pub struct FinetuneExample {
    pub id: String,
    /// Pooled detector features, precomputed because everything below the
    /// dynamic filters is frozen during fine-tuning.
    pub pooled: FeatureSequence,
    /// Bank index of the labeled keyword; None for negative audio.
    pub keyword: Option<usize>,
}

#[derive(Debug, Default)]
pub struct FinetuneDataset {
    pub examples: Vec<FinetuneExample>,
}

/// Build the fine-tuning set from a labeled manifest: entries with one
/// keyword label are positives (whole-utterance targets), entries with none
/// are negatives. Unknown keyword names are an error.
pub fn load_finetune_dataset(
    stack: &EncoderStack,
    bank: &FilterBank,
    manifest: &CorpusManifest,
) -> Result<FinetuneDataset> {
    let names = bank.names();
    let mut examples = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let keyword = match entry.keywords.as_slice() {
            [] => None,
            [name] => Some(
                names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::UnknownKeyword(name.clone()))?,
            ),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "fine-tuning expects at most one keyword label per utterance; '{}' has {}",
                    entry.id,
                    entry.keywords.len()
                )))
            }
        };
        let features = read_features(&manifest.feature_path(entry))?;
        let pooled = stack.encode(&features)?;
        examples.push(FinetuneExample {
            id: entry.id.clone(),
            pooled,
            keyword,
        });
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset("fine-tuning manifest has no entries"));
    }
    Ok(FinetuneDataset { examples })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FinetuneStats {
    pub epoch_train_loss: Vec<f64>,
    pub epoch_holdout_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Max-over-time logit of one effective filter over a pooled track, with its
/// argmax position.
fn max_logit(base: &Tensor, residual: &Tensor, pooled: &FeatureSequence) -> (f64, usize) {
    let kt = base.shape()[0];
    let channels = base.shape()[1];
    let track_len = pooled.frames() + 1 - kt;
    let mut best = f64::NEG_INFINITY;
    let mut best_j = 0;
    for j in 0..track_len {
        let mut z = 0.0;
        for r in 0..kt {
            let row = pooled.row(j + r);
            let b = &base.data()[r * channels..(r + 1) * channels];
            let d = &residual.data()[r * channels..(r + 1) * channels];
            for c in 0..channels {
                z += row[c] * (b[c] + d[c]);
            }
        }
        if z > best {
            best = z;
            best_j = j;
        }
    }
    (best, best_j)
}

fn finetune_example_loss(
    bank_bases: &[Tensor],
    residuals: &LayerParams,
    example: &FinetuneExample,
    mut on_grad: impl FnMut(usize, f64, usize),
) -> f64 {
    let mut loss = 0.0;
    for (k, base) in bank_bases.iter().enumerate() {
        let residual = residuals.get(&k.to_string());
        let (z, j) = max_logit(base, residual, &example.pooled);
        let positive = example.keyword == Some(k);
        if positive {
            loss += softplus(-z);
            on_grad(k, sigmoid(z) - 1.0, j);
        } else {
            loss += softplus(z);
            on_grad(k, sigmoid(z), j);
        }
    }
    loss
}

fn dataset_loss(bank_bases: &[Tensor], residuals: &LayerParams, examples: &[&FinetuneExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let total: f64 = examples
        .iter()
        .map(|e| finetune_example_loss(bank_bases, residuals, e, |_, _, _| {}))
        .sum();
    total / examples.len() as f64
}

/// Residual fine-tuning: gradient descent on the detection cross-entropy with
/// respect to the per-keyword residuals only. Base filters and everything
/// upstream stay untouched, so compiling new keywords is unaffected.
pub fn finetune<R: Rng>(
    bank: &mut FilterBank,
    data: &FinetuneDataset,
    config: &FinetuneConfig,
    rng: &mut R,
) -> Result<FinetuneStats> {
    if bank.is_empty() {
        return Err(Error::EmptyDataset("filter bank has no keywords"));
    }
    if data.examples.is_empty() {
        return Err(Error::EmptyDataset("fine-tuning dataset is empty"));
    }
    for e in &data.examples {
        if let Some(k) = e.keyword {
            if k >= bank.len() {
                return Err(Error::UnknownKeyword(format!("bank index {k}")));
            }
        }
        let kt = bank.iter().next().expect("non-empty").1.base.shape()[0];
        if e.pooled.frames() < kt {
            return Err(Error::InsufficientFrames {
                needed: kt,
                got: e.pooled.frames(),
            });
        }
    }
    if !(config.lr.is_finite() && config.lr > 0.0) || config.batch == 0 {
        return Err(Error::InvalidConfig("finetune: bad lr or batch size".into()));
    }

    let bases: Vec<Tensor> = bank.iter().map(|(_, f)| f.base.clone()).collect();
    let mut residuals = LayerParams::new();
    for (k, (_, f)) in bank.iter().enumerate() {
        residuals.insert(&k.to_string(), f.residual.clone());
    }
    let mut opt = AdamState::new(config.lr, &residuals);

    let holdout: Vec<&FinetuneExample> = data
        .examples
        .iter()
        .enumerate()
        .filter(|(i, _)| config.holdout_every > 0 && (i + 1) % config.holdout_every == 0)
        .map(|(_, e)| e)
        .collect();
    let train: Vec<&FinetuneExample> = data
        .examples
        .iter()
        .enumerate()
        .filter(|(i, _)| !(config.holdout_every > 0 && (i + 1) % config.holdout_every == 0))
        .map(|(_, e)| e)
        .collect();
    if train.is_empty() {
        return Err(Error::EmptyDataset("fine-tuning train split is empty"));
    }
    // With nothing held out, early stopping falls back to the training loss.
    let monitor = |residuals: &LayerParams, train_loss: f64| -> f64 {
        if holdout.is_empty() {
            train_loss
        } else {
            dataset_loss(&bases, residuals, &holdout)
        }
    };

    let mut stats = FinetuneStats::default();
    let mut best = residuals.clone();
    let init_train = dataset_loss(&bases, &residuals, &train);
    let mut best_loss = monitor(&residuals, init_train);
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch) {
            let mut grads = residuals.zeros_like();
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let example = train[i];
                finetune_example_loss(&bases, &residuals, example, |k, g, j| {
                    let dres = grads.get_mut(&k.to_string());
                    let kt = bases[k].shape()[0];
                    let channels = bases[k].shape()[1];
                    for r in 0..kt {
                        let prow = example.pooled.row(j + r);
                        let drow = &mut dres.data_mut()[r * channels..(r + 1) * channels];
                        for c in 0..channels {
                            drow[c] += g * inv * prow[c];
                        }
                    }
                });
            }
            adam_step(&mut opt, &mut residuals, &grads);
        }
        let train_loss = dataset_loss(&bases, &residuals, &train);
        if !train_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite fine-tuning loss in epoch {epoch}"
            )));
        }
        let mon = monitor(&residuals, train_loss);
        stats.epoch_train_loss.push(train_loss);
        stats.epoch_holdout_loss.push(mon);
        log::info!("finetune epoch {epoch}: train {train_loss:.4}, monitor {mon:.4}");
        if mon < best_loss {
            best_loss = mon;
            best = residuals.clone();
            best_epoch = epoch + 1;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stats.stopped_early = true;
                break;
            }
        }
    }
    stats.best_epoch = best_epoch;

    for (k, _) in bases.iter().enumerate() {
        let f = bank.filter_mut_at(k).expect("index in range");
        f.residual = best.get(&k.to_string()).clone();
    }
    Ok(stats)
}
