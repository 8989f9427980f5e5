//! The keyword encoder hypernetwork and the dynamic top convolution:
//! compiling phone sequences into detection filters, scoring feature
//! sequences against a filter bank, and post-processing posterior tracks
//! into detection events.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticConfig;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, AffineLayer, LstmCache, LstmLayer};
use crate::tensor::{FeatureSequence, LayerParams, PhoneSeq, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSpec {
    pub name: String,
    pub phones: PhoneSeq,
}

/// The per-keyword top convolution kernel, shaped [top_kernel, channels].
/// The filter actually applied is base + residual; residuals start at zero
/// and are the only tensors fine-tuning may touch.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordFilter {
    pub base: Tensor,
    pub residual: Tensor,
}

impl KeywordFilter {
    pub fn from_base(base: Tensor) -> Self {
        let residual = Tensor::zeros(base.shape());
        KeywordFilter { base, residual }
    }

    pub fn effective(&self) -> Tensor {
        let data = self
            .base
            .data()
            .iter()
            .zip(self.residual.data())
            .map(|(b, r)| b + r)
            .collect();
        Tensor::from_vec(self.base.shape(), data).expect("same shape")
    }

    pub fn weight_count(&self) -> usize {
        self.base.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct FilterBank {
    entries: Vec<(KeywordSpec, KeywordFilter)>,
}

impl FilterBank {
    pub fn new() -> Self {
        FilterBank::default()
    }

    pub fn push(&mut self, spec: KeywordSpec, filter: KeywordFilter) -> Result<()> {
        if self.entries.iter().any(|(s, _)| s.name == spec.name) {
            return Err(Error::DuplicateKeyword(spec.name));
        }
        self.entries.push((spec, filter));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(KeywordSpec, KeywordFilter)> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&(KeywordSpec, KeywordFilter)> {
        self.entries.iter().find(|(s, _)| s.name == name)
    }

    pub fn filter_mut(&mut self, name: &str) -> Option<&mut KeywordFilter> {
        self.entries
            .iter_mut()
            .find(|(s, _)| s.name == name)
            .map(|(_, f)| f)
    }

    pub fn filter_mut_at(&mut self, index: usize) -> Option<&mut KeywordFilter> {
        self.entries.get_mut(index).map(|(_, f)| f)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(s, _)| s.name.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Phone inventory size (embedding table rows).
    pub phones: usize,
    pub embed_dim: usize,
    /// Hidden units per direction of the bidirectional layer.
    pub hidden: usize,
    /// Top convolution kernel length (12 at paper scale).
    pub top_kernel: usize,
    /// Channels of the encoded feature sequence (96 at paper scale).
    pub channels: usize,
}

impl EncoderConfig {
    pub fn desk_scale() -> Self {
        EncoderConfig {
            phones: 12,
            embed_dim: 32,
            hidden: 32,
            top_kernel: 12,
            channels: 32,
        }
    }

    pub fn paper_scale() -> Self {
        EncoderConfig {
            phones: 46,
            embed_dim: 32,
            hidden: 128,
            top_kernel: 12,
            channels: 96,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.phones >= 1
            && self.embed_dim >= 1
            && self.hidden >= 1
            && self.top_kernel >= 1
            && self.channels >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("{self:?}")))
        }
    }

    /// Weights predicted per keyword: top_kernel x channels.
    pub fn filter_size(&self) -> usize {
        self.top_kernel * self.channels
    }
}

/// E(pi): phone embedding, one bidirectional LSTM pass, and an affine map
/// from the concatenated final hidden states to the filter weights.
pub struct KeywordEncoder {
    pub config: EncoderConfig,
    /// [phones, embed_dim] lookup table, wrapped for optimizer sharing.
    pub embed: LayerParams,
    pub fwd: LstmLayer,
    pub bwd: LstmLayer,
    pub affine: AffineLayer,
}

/// Activations kept for the backward pass through one keyword encoding.
pub struct EncodeCache {
    pub emb: FeatureSequence,
    pub emb_rev: FeatureSequence,
    pub fwd: LstmCache,
    pub bwd: LstmCache,
    pub summary: Vec<f64>,
}

/// Gradient accumulators mirroring [`KeywordEncoder`]'s parameter groups.
pub struct EncoderGrads {
    pub embed: LayerParams,
    pub fwd: LayerParams,
    pub bwd: LayerParams,
    pub affine: LayerParams,
}

impl KeywordEncoder {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut embed = LayerParams::new();
        embed.insert(
            "table",
            Tensor::uniform_init(&[config.phones, config.embed_dim], config.embed_dim, rng),
        );
        let fwd = LstmLayer::new(config.embed_dim, config.hidden, rng);
        let bwd = LstmLayer::new(config.embed_dim, config.hidden, rng);
        let affine = AffineLayer::new(2 * config.hidden, config.filter_size(), rng);
        Ok(KeywordEncoder {
            config,
            embed,
            fwd,
            bwd,
            affine,
        })
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            embed: self.embed.zeros_like(),
            fwd: self.fwd.params.zeros_like(),
            bwd: self.bwd.params.zeros_like(),
            affine: self.affine.params.zeros_like(),
        }
    }

    fn embed_phones(&self, phones: &PhoneSeq) -> Result<FeatureSequence> {
        if phones.is_empty() {
            return Err(Error::InvalidConfig(
                "keyword encoder needs a non-empty phone sequence".into(),
            ));
        }
        phones.validate(self.config.phones)?;
        let e = self.config.embed_dim;
        let table = self.embed.get("table");
        let mut emb = FeatureSequence::zeros(phones.len(), e);
        for (i, &p) in phones.as_slice().iter().enumerate() {
            emb.row_mut(i).copy_from_slice(table.row(p as usize));
        }
        Ok(emb)
    }

    pub fn encode_with_cache(&self, phones: &PhoneSeq) -> Result<(KeywordFilter, EncodeCache)> {
        let emb = self.embed_phones(phones)?;
        let emb_rev = emb.reversed();
        let (_, fwd_cache) = self.fwd.forward(&emb)?;
        let (_, bwd_cache) = self.bwd.forward(&emb_rev)?;
        let mut summary = self.fwd.final_hidden(&fwd_cache).to_vec();
        summary.extend_from_slice(self.bwd.final_hidden(&bwd_cache));
        let flat = self.affine.forward(&summary)?;
        let base = Tensor::from_vec(&[self.config.top_kernel, self.config.channels], flat)?;
        Ok((
            KeywordFilter::from_base(base),
            EncodeCache {
                emb,
                emb_rev,
                fwd: fwd_cache,
                bwd: bwd_cache,
                summary,
            },
        ))
    }

    /// Predict the filter for one keyword (Eq. 2).
    pub fn encode_keyword(&self, phones: &PhoneSeq) -> Result<KeywordFilter> {
        Ok(self.encode_with_cache(phones)?.0)
    }

    /// Backpropagate a gradient w.r.t. the predicted base filter into the
    /// encoder parameter grads.
    pub fn encode_backward_into(
        &self,
        phones: &PhoneSeq,
        cache: &EncodeCache,
        dfilter: &Tensor,
        grads: &mut EncoderGrads,
    ) {
        let h = self.config.hidden;
        let dsummary = self
            .affine
            .backward_into(&cache.summary, dfilter.data(), &mut grads.affine);

        let n = cache.emb.frames();
        let mut dfwd_out = FeatureSequence::zeros(n, h);
        dfwd_out.row_mut(n - 1).copy_from_slice(&dsummary[..h]);
        let demb_fwd = self
            .fwd
            .backward_into(&cache.emb, &cache.fwd, &dfwd_out, &mut grads.fwd);

        let mut dbwd_out = FeatureSequence::zeros(n, h);
        dbwd_out.row_mut(n - 1).copy_from_slice(&dsummary[h..]);
        let demb_bwd_rev =
            self.bwd
                .backward_into(&cache.emb_rev, &cache.bwd, &dbwd_out, &mut grads.bwd);
        let demb_bwd = demb_bwd_rev.reversed();

        let table = grads.embed.get_mut("table");
        let e = self.config.embed_dim;
        for (i, &p) in phones.as_slice().iter().enumerate() {
            let row = &mut table.data_mut()[p as usize * e..(p as usize + 1) * e];
            for (acc, (a, b)) in row
                .iter_mut()
                .zip(demb_fwd.row(i).iter().zip(demb_bwd.row(i)))
            {
                *acc += a + b;
            }
        }
    }

    /// Compile a keyword set into a filter bank (Eq. 2 applied per keyword).
    pub fn compile(&self, specs: &[KeywordSpec]) -> Result<FilterBank> {
        let mut bank = FilterBank::new();
        for spec in specs {
            let filter = self.encode_keyword(&spec.phones)?;
            bank.push(spec.clone(), filter)?;
        }
        Ok(bank)
    }
}

/// Logit track of one filter over an encoded feature sequence: valid
/// convolution with no bias term.
pub fn filter_logits(filter: &Tensor, feats: &FeatureSequence) -> Result<Vec<f64>> {
    let kt = filter.shape()[0];
    let c = filter.shape()[1];
    if feats.dim() != c {
        return Err(Error::Shape {
            context: "filter_logits",
            expected: format!("{c} channels"),
            got: format!("{}", feats.dim()),
        });
    }
    if feats.frames() < kt {
        return Err(Error::InsufficientFrames {
            needed: kt,
            got: feats.frames(),
        });
    }
    let w = filter.data();
    let mut out = Vec::with_capacity(feats.frames() - kt + 1);
    for v in 0..=feats.frames() - kt {
        let mut z = 0.0;
        for j in 0..kt {
            let row = feats.row(v + j);
            let wrow = &w[j * c..(j + 1) * c];
            for i in 0..c {
                z += wrow[i] * row[i];
            }
        }
        out.push(z);
    }
    Ok(out)
}

/// y[k][v] = sigmoid((base_k + residual_k) * feats) for every bank entry
/// (Eq. 1). Track length is feats.frames() - top_kernel + 1.
pub fn posteriors(bank: &FilterBank, feats: &FeatureSequence) -> Result<Vec<Vec<f64>>> {
    bank.iter()
        .map(|(_, f)| {
            let z = filter_logits(&f.effective(), feats)?;
            Ok(z.into_iter().map(sigmoid).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub keyword: String,
    /// Pooled-feature frame of the posterior local maximum.
    pub frame: usize,
    pub score: f64,
}

/// Turn posterior tracks into events: one per local maximum >= tau, with
/// further events for the same keyword suppressed until `hangover` frames
/// have passed. Events are time-ordered; ties prefer the higher score, then
/// the lexicographically smaller name.
pub fn events_from_tracks(
    names: &[String],
    tracks: &[Vec<f64>],
    tau: f64,
    hangover: usize,
) -> Vec<DetectionEvent> {
    let mut events = Vec::new();
    for (name, y) in names.iter().zip(tracks) {
        let mut last: Option<usize> = None;
        for v in 0..y.len() {
            let rising = v == 0 || y[v] > y[v - 1];
            let falling = v + 1 == y.len() || y[v] >= y[v + 1];
            if y[v] >= tau && rising && falling {
                if let Some(prev) = last {
                    if v - prev < hangover {
                        continue;
                    }
                }
                last = Some(v);
                events.push(DetectionEvent {
                    keyword: name.clone(),
                    frame: v,
                    score: y[v],
                });
            }
        }
    }
    events.sort_by(|a, b| {
        a.frame
            .cmp(&b.frame)
            .then(b.score.partial_cmp(&a.score).expect("finite scores"))
            .then(a.keyword.cmp(&b.keyword))
    });
    events
}

/// Detect keywords in an encoded feature sequence. Inputs too short for the
/// top kernel produce no events rather than an error.
pub fn detect(
    bank: &FilterBank,
    feats: &FeatureSequence,
    tau: f64,
    hangover: usize,
) -> Result<Vec<DetectionEvent>> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::InvalidConfig(format!("threshold {tau} not in (0,1)")));
    }
    if hangover < 1 {
        return Err(Error::InvalidConfig("hangover must be >= 1".into()));
    }
    if bank.is_empty() {
        return Ok(Vec::new());
    }
    let kt = bank.iter().next().expect("non-empty").1.base.shape()[0];
    if feats.frames() < kt {
        return Ok(Vec::new());
    }
    let tracks = posteriors(bank, feats)?;
    Ok(events_from_tracks(&bank.names(), &tracks, tau, hangover))
}

/// Input frames covered by one output of the dynamic top convolution.
pub fn receptive_field(acoustic: &AcousticConfig, top_kernel: usize) -> usize {
    acoustic.pool_stride * (top_kernel - 1)
        + (acoustic.pool_size - 1)
        + (acoustic.conv_kernel - 1)
        + 1
}

/// Detector output index whose receptive field ends at input frame `t`, or
/// None when `t` is too close to the start of the utterance.
pub fn y_index(acoustic: &AcousticConfig, top_kernel: usize, t: usize) -> Option<usize> {
    acoustic.last_pooled_at(t)?.checked_sub(top_kernel - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_encoder(seed: u64) -> KeywordEncoder {
        let cfg = EncoderConfig {
            phones: 5,
            embed_dim: 4,
            hidden: 6,
            top_kernel: 3,
            channels: 2,
        };
        KeywordEncoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn encoding_is_deterministic_and_sized() {
        let enc = tiny_encoder(1);
        let phones = PhoneSeq(vec![0, 2, 4]);
        let a = enc.encode_keyword(&phones).unwrap();
        let b = enc.encode_keyword(&phones).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.base.shape(), &[3, 2]);
        assert_eq!(a.weight_count(), 6);
        assert!(a.residual.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_scale_filter_has_1152_weights() {
        let cfg = EncoderConfig::paper_scale();
        assert_eq!(cfg.filter_size(), 1152);
        let enc = KeywordEncoder::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let f = enc.encode_keyword(&PhoneSeq(vec![1, 5, 9, 13])).unwrap();
        assert_eq!(f.weight_count(), 1152);
    }

    #[test]
    fn compile_is_pure_and_order_independent_per_entry() {
        let enc = tiny_encoder(3);
        let specs: Vec<KeywordSpec> = [(0u32, 1u32), (2, 3), (4, 0)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| KeywordSpec {
                name: format!("k{i}"),
                phones: PhoneSeq(vec![a, b]),
            })
            .collect();
        let bank2 = enc.compile(&specs[..2]).unwrap();
        let bank3 = enc.compile(&specs).unwrap();
        assert!(bank2.len() == 2 && bank3.len() == 3);
        for (a, b) in bank2.iter().zip(bank3.iter()) {
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn compile_rejects_duplicates_and_unknown_phones() {
        let enc = tiny_encoder(4);
        let dup = vec![
            KeywordSpec {
                name: "same".into(),
                phones: PhoneSeq(vec![0]),
            },
            KeywordSpec {
                name: "same".into(),
                phones: PhoneSeq(vec![1]),
            },
        ];
        assert!(matches!(
            enc.compile(&dup),
            Err(Error::DuplicateKeyword(_))
        ));
        assert!(matches!(
            enc.encode_keyword(&PhoneSeq(vec![99])),
            Err(Error::UnknownPhone { .. })
        ));
        assert!(enc.encode_keyword(&PhoneSeq(vec![])).is_err());
    }

    #[test]
    fn empty_bank_detects_nothing() {
        let feats = FeatureSequence::zeros(20, 2);
        let events = detect(&FilterBank::new(), &feats, 0.5, 3).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn zero_filter_gives_half_posteriors() {
        let mut bank = FilterBank::new();
        bank.push(
            KeywordSpec {
                name: "z".into(),
                phones: PhoneSeq(vec![0]),
            },
            KeywordFilter::from_base(Tensor::zeros(&[3, 2])),
        )
        .unwrap();
        let feats = FeatureSequence::from_vec(5, 2, (0..10).map(|v| v as f64).collect()).unwrap();
        let y = posteriors(&bank, &feats).unwrap();
        assert_eq!(y[0].len(), 3);
        assert!(y[0].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn indicator_kernel_reads_single_value() {
        // kernel [1, 0, 0] on one channel picks feats[v][0]
        let base = Tensor::from_vec(&[3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let feats =
            FeatureSequence::from_vec(5, 1, vec![0.3, -0.7, 1.4, 0.0, 2.0]).unwrap();
        let z = filter_logits(&base, &feats).unwrap();
        assert_eq!(z, vec![0.3, -0.7, 1.4]);
        let y: Vec<f64> = z.into_iter().map(sigmoid).collect();
        assert!((y[0] - sigmoid(0.3)).abs() < 1e-15);
    }

    #[test]
    fn scaling_a_filter_pushes_posteriors_from_half() {
        let enc = tiny_encoder(5);
        let f = enc.encode_keyword(&PhoneSeq(vec![0, 1, 2])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = FeatureSequence::from_vec(
            6,
            2,
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y1 = filter_logits(&f.effective(), &feats).unwrap();
        let scaled = Tensor::from_vec(
            f.base.shape(),
            f.base.data().iter().map(|v| v * 3.0).collect(),
        )
        .unwrap();
        let y2 = filter_logits(&scaled, &feats).unwrap();
        for (a, b) in y1.iter().zip(&y2) {
            assert!((sigmoid(*b) - 0.5).abs() >= (sigmoid(*a) - 0.5).abs());
        }
    }

    #[test]
    fn residual_zero_means_effective_equals_base() {
        let enc = tiny_encoder(7);
        let f = enc.encode_keyword(&PhoneSeq(vec![1, 3])).unwrap();
        assert_eq!(f.effective(), f.base);
    }

    #[test]
    fn detect_finds_isolated_peaks_and_honors_hangover() {
        let names = vec!["a".to_string()];
        let flat = vec![vec![0.2; 10]];
        assert!(events_from_tracks(&names, &flat, 0.5, 3).is_empty());

        let mut y = vec![0.1; 12];
        y[4] = 0.9;
        y[5] = 0.4;
        let one = events_from_tracks(&names, &[y], 0.5, 3);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].frame, 4);

        // peaks 4 apart with hangover 3: both fire
        let mut y2 = vec![0.1; 12];
        y2[2] = 0.8;
        y2[6] = 0.85;
        let two = events_from_tracks(&names, &[y2.clone()], 0.5, 3);
        assert_eq!(two.iter().map(|e| e.frame).collect::<Vec<_>>(), vec![2, 6]);

        // same peaks with hangover 5: second suppressed
        let hung = events_from_tracks(&names, &[y2], 0.5, 5);
        assert_eq!(hung.len(), 1);
    }

    #[test]
    fn events_sort_by_time_then_score_then_name() {
        let names = vec!["b".to_string(), "a".to_string(), "c".to_string()];
        let mut yb = vec![0.0; 6];
        let mut ya = vec![0.0; 6];
        let mut yc = vec![0.0; 6];
        yb[2] = 0.7;
        ya[2] = 0.7;
        yc[2] = 0.9;
        let ev = events_from_tracks(&names, &[yb, ya, yc], 0.5, 2);
        let order: Vec<&str> = ev.iter().map(|e| e.keyword.as_str()).collect();
        assert_eq!(order, vec!["c", "a", "b"]);
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(receptive_field(&AcousticConfig::desk_scale(), 12), 29);
        assert_eq!(receptive_field(&AcousticConfig::paper_scale(64), 12), 29);
        assert_eq!(receptive_field(&AcousticConfig::paper_scale(64), 24), 53);
        let trivial = AcousticConfig {
            conv_kernel: 1,
            pool_size: 1,
            pool_stride: 1,
            ..AcousticConfig::desk_scale()
        };
        assert_eq!(receptive_field(&trivial, 1), 1);
    }
}
