//! One function per pipeline stage, shared by the CLI and the examples.
//! Each takes file paths plus the pipeline config and returns a small
//! summary struct that serializes cleanly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{phone_error_rate, pretrain_ctc, PretrainConfig};
use crate::datagen::{self, GenConfig, GenSummary};
use crate::error::{Error, Result};
use crate::eval::{
    self, command_metrics, exact_rate, filter_distances, keyword_f1, nearest_words,
    operating_point_at_fa, CommandScores, MetricReport,
};
use crate::io::features::read_features;
use crate::io::manifest::{
    load_keyword_lines, read_jsonl, write_jsonl, AlignmentRecord, CorpusManifest,
    DetectionRecord, Lexicon, RefRecord,
};
use crate::io::model::{KwsModel, ModelConfig};
use crate::keyword::{detect, filter_logits, KeywordEncoder, KeywordSpec};
use crate::tensor::{FeatureSequence, PhoneSeq};
use crate::trainer::{
    align_corpus, alignment_records, finetune, load_aligned, load_finetune_dataset, train_kws,
    FinetuneConfig, FinetuneStats, TrainConfig, TrainStats,
};

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_scale()
    }
}

/// Everything tunable from one JSON file; every field has a desk-scale
/// default so a partial config works.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    /// Detection threshold on the posterior.
    pub tau: f64,
    /// Pooled frames a fresh detection of the same keyword is suppressed for.
    pub hangover: usize,
    /// Neighbors listed per keyword by analyze.
    pub top_n: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gen: GenConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            tau: 0.5,
            hangover: 10,
            top_n: 5,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn gen_data(config: &PipelineConfig, out: &Path, seed: u64) -> Result<GenSummary> {
    datagen::generate(&config.gen, out, seed)
}

#[derive(Debug, Serialize)]
pub struct PretrainSummary {
    pub utterances: usize,
    pub epoch_losses: Vec<f64>,
    pub train_per: f64,
}

fn load_pairs(manifest: &CorpusManifest) -> Result<Vec<(FeatureSequence, PhoneSeq)>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok((
                read_features(&manifest.feature_path(e))?,
                PhoneSeq(e.phones.clone()),
            ))
        })
        .collect()
}

fn check_manifest_shape(config: &ModelConfig, manifest: &CorpusManifest) -> Result<()> {
    if manifest.dim != config.acoustic.dim || manifest.phones != config.acoustic.phones {
        return Err(Error::InvalidConfig(format!(
            "manifest is {} dims / {} phones but the model config wants {} / {}",
            manifest.dim, manifest.phones, config.acoustic.dim, config.acoustic.phones
        )));
    }
    Ok(())
}

/// CTC-pretrain the acoustic stack on a manifest and save a fresh model
/// (random conv1 gets trained later, random keyword encoder included).
pub fn pretrain(
    config: &PipelineConfig,
    corpus: &Path,
    out_model: &Path,
    seed: u64,
) -> Result<PretrainSummary> {
    let manifest = CorpusManifest::load(corpus)?;
    check_manifest_shape(&config.model, &manifest)?;
    let pairs = load_pairs(&manifest)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (stack, epoch_losses) =
        pretrain_ctc(&config.model.acoustic, &pairs, &config.pretrain, &mut rng)?;
    let train_per = phone_error_rate(&stack, &pairs)?;
    let encoder = KeywordEncoder::new(config.model.encoder_config(), &mut rng)?;
    let model = KwsModel {
        config: config.model.clone(),
        stack,
        encoder: Some(encoder),
        bank: crate::keyword::FilterBank::new(),
    };
    model.save(out_model, false, false)?;
    Ok(PretrainSummary {
        utterances: pairs.len(),
        epoch_losses,
        train_per,
    })
}

#[derive(Debug, Serialize)]
pub struct AlignSummary {
    pub aligned: usize,
    pub total: usize,
}

pub fn align(model_path: &Path, corpus: &Path, out: &Path) -> Result<AlignSummary> {
    let model = KwsModel::load(model_path)?;
    let manifest = CorpusManifest::load(corpus)?;
    check_manifest_shape(&model.config, &manifest)?;
    let aligned = align_corpus(&model.stack, &manifest)?;
    let records = alignment_records(&aligned);
    write_jsonl(out, &records)?;
    Ok(AlignSummary {
        aligned: records.len(),
        total: manifest.entries.len(),
    })
}

/// Joint KWS training; updates conv1 and the keyword encoder in the model.
pub fn train(
    config: &PipelineConfig,
    model_path: &Path,
    corpus: &Path,
    alignments: &Path,
    out_model: &Path,
    seed: u64,
) -> Result<TrainStats> {
    let mut model = KwsModel::load(model_path)?;
    let manifest = CorpusManifest::load(corpus)?;
    check_manifest_shape(&model.config, &manifest)?;
    let records: Vec<AlignmentRecord> = read_jsonl(alignments)?;
    let utts = load_aligned(&manifest, &records)?;
    let encoder = model.encoder.as_mut().ok_or(Error::MissingSection("encoder"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stats = train_kws(&mut model.stack, encoder, &utts, &config.train, &mut rng)?;
    model.save(out_model, false, false)?;
    Ok(stats)
}

#[derive(Debug, Serialize)]
pub struct CompileSummary {
    pub keywords: usize,
    pub weights_per_keyword: usize,
    pub quantized: bool,
    pub encoder_stripped: bool,
    pub model_bytes: u64,
}

/// Compile a keyword list into the model's filter bank and save the result,
/// optionally quantized and with the encoder stripped for deployment.
pub fn compile(
    model_path: &Path,
    keywords: &Path,
    lexicon: Option<&Path>,
    out_model: &Path,
    quantize: bool,
    strip_encoder: bool,
) -> Result<CompileSummary> {
    let mut model = KwsModel::load(model_path)?;
    let lexicon = match lexicon {
        Some(p) => Some(Lexicon::load(p, model.config.acoustic.phones)?),
        None => None,
    };
    let items = load_keyword_lines(keywords, lexicon.as_ref(), model.config.acoustic.phones)?;
    let specs: Vec<KeywordSpec> = items
        .into_iter()
        .map(|(name, phones)| KeywordSpec { name, phones })
        .collect();
    let encoder = model.encoder.as_ref().ok_or(Error::MissingSection("encoder"))?;
    model.bank = encoder.compile(&specs)?;
    model.save(out_model, quantize, strip_encoder)?;
    Ok(CompileSummary {
        keywords: model.bank.len(),
        weights_per_keyword: model.config.encoder_config().filter_size(),
        quantized: quantize,
        encoder_stripped: strip_encoder,
        model_bytes: fs::metadata(out_model)?.len(),
    })
}

/// Feature files to run detection over: a single .kwsf file, or every
/// manifest entry / .kwsf file under a directory (sorted by id).
fn collect_feature_files(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    if path.is_file() {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "utterance".into());
        return Ok(vec![(id, path.to_path_buf())]);
    }
    let manifest_path = path.join("manifest.json");
    if manifest_path.is_file() {
        let manifest = CorpusManifest::load(&manifest_path)?;
        return Ok(manifest
            .entries
            .iter()
            .map(|e| (e.id.clone(), manifest.feature_path(e)))
            .collect());
    }
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(path)? {
        let entry = entry?;
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "kwsf") {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            files.push((id, p));
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyDataset("no .kwsf files under the given path"));
    }
    files.sort();
    Ok(files)
}

#[derive(Debug, Serialize)]
pub struct DetectSummary {
    pub utterances: usize,
    pub events: usize,
}

pub fn run_detect(
    model_path: &Path,
    features: &Path,
    tau: f64,
    hangover: usize,
    out: &Path,
) -> Result<DetectSummary> {
    let model = KwsModel::load(model_path)?;
    let files = collect_feature_files(features)?;
    let mut records = Vec::new();
    for (id, file) in &files {
        let feats = read_features(file)?;
        let pooled = model.stack.encode(&feats)?;
        for event in detect(&model.bank, &pooled, tau, hangover)? {
            records.push(DetectionRecord {
                utterance: id.clone(),
                keyword: event.keyword,
                frame: event.frame,
                score: event.score,
            });
        }
    }
    write_jsonl(out, &records)?;
    Ok(DetectSummary {
        utterances: files.len(),
        events: records.len(),
    })
}

pub fn run_finetune(
    config: &PipelineConfig,
    model_path: &Path,
    data: &Path,
    out_model: &Path,
    seed: u64,
) -> Result<FinetuneStats> {
    let mut model = KwsModel::load(model_path)?;
    let manifest = CorpusManifest::load(data)?;
    check_manifest_shape(&model.config, &manifest)?;
    let dataset = load_finetune_dataset(&model.stack, &model.bank, &manifest)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stats = finetune(&mut model.bank, &dataset, &config.finetune, &mut rng)?;
    model.save(out_model, false, false)?;
    Ok(stats)
}

/// Detection plus metrics over a labeled corpus. Keyword F1 and exact rate
/// always; FRR / FA-per-hour when the corpus is command-style (every labeled
/// utterance has exactly one keyword and negative audio is present).
pub fn evaluate(
    config: &PipelineConfig,
    model_path: &Path,
    corpus: &Path,
    refs_path: &Path,
    report_out: &Path,
    curve_out: Option<&Path>,
) -> Result<MetricReport> {
    let model = KwsModel::load(model_path)?;
    let manifest = CorpusManifest::load(corpus)?;
    check_manifest_shape(&model.config, &manifest)?;
    let refs: Vec<RefRecord> = read_jsonl(refs_path)?;

    let mut detections: Vec<DetectionRecord> = Vec::new();
    let mut command = CommandScores::default();
    let mut command_style = true;
    let mut negative_frames = 0usize;
    let by_id: std::collections::BTreeMap<&str, &RefRecord> =
        refs.iter().map(|r| (r.utterance.as_str(), r)).collect();

    for entry in &manifest.entries {
        let Some(reference) = by_id.get(entry.id.as_str()) else {
            continue;
        };
        let feats = read_features(&manifest.feature_path(entry))?;
        let pooled = model.stack.encode(&feats)?;
        for event in detect(&model.bank, &pooled, config.tau, config.hangover)? {
            detections.push(DetectionRecord {
                utterance: entry.id.clone(),
                keyword: event.keyword,
                frame: event.frame,
                score: event.score,
            });
        }
        match reference.keywords.as_slice() {
            [] => {
                negative_frames += feats.frames();
                // Candidate alarm events at the bottom of the sweep grid.
                for event in detect(&model.bank, &pooled, 0.01, config.hangover)? {
                    command.negative_event_scores.push(event.score);
                }
            }
            [name] => {
                match model.bank.get(name) {
                    Some((_, filter)) => {
                        let track = filter_logits(&filter.effective(), &pooled)?;
                        let best = track.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        command.positive_scores.push(crate::nn::sigmoid(best));
                    }
                    None => command_style = false,
                }
            }
            _ => command_style = false,
        }
    }

    let summary = keyword_f1(&detections, &refs)?;
    let exact = exact_rate(&detections, &refs)?;
    let mut report = MetricReport {
        utterances: refs.len(),
        precision: summary.precision(),
        recall: summary.recall(),
        f1: summary.f1(),
        exact_rate: exact,
        true_positives: summary.tp,
        false_positives: summary.fp,
        false_negatives: summary.fn_,
        per_keyword: summary.per_keyword,
        frr: None,
        fa_per_hour: None,
        operating_tau: None,
    };

    command.negative_hours = negative_frames as f64 / manifest.frame_rate_hz / 3600.0;
    if command_style && !command.positive_scores.is_empty() && command.negative_hours > 0.0 {
        let curve = command_metrics(&command)?;
        if let Some(point) = operating_point_at_fa(&curve, 1.0) {
            report.frr = Some(point.frr);
            report.fa_per_hour = Some(point.fa_per_hour);
            report.operating_tau = Some(point.tau);
        }
        if let Some(curve_path) = curve_out {
            eval::write_curve_csv(curve_path, &curve)?;
        }
    } else if let Some(curve_path) = curve_out {
        log::warn!(
            "corpus is not command-style; no operating curve written to {}",
            curve_path.display()
        );
    }
    report.save(report_out)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct NeighborEntry {
    pub word: String,
    pub distance: f64,
    pub final_phone_match: bool,
}

#[derive(Debug, Serialize)]
pub struct KeywordNeighbors {
    pub keyword: String,
    pub phones: Vec<u32>,
    pub neighbors: Vec<NeighborEntry>,
}

#[derive(Debug, Serialize)]
pub struct AnalyzeReport {
    pub keywords: Vec<KeywordNeighbors>,
    /// Share of keywords whose nearest lexicon word ends on the same phone.
    pub top1_final_phone_share: f64,
    pub median_pairwise_distance: f64,
    /// The closest keyword pair in filter space.
    pub closest_pair: (String, String, f64),
}

/// Filter-geometry analysis: nearest lexicon words per keyword and the
/// pairwise structure of the keyword set itself.
pub fn analyze(
    model_path: &Path,
    lexicon_path: &Path,
    keywords: &Path,
    top_n: usize,
    out: Option<&Path>,
) -> Result<AnalyzeReport> {
    let model = KwsModel::load(model_path)?;
    let encoder = model.encoder.as_ref().ok_or(Error::MissingSection("encoder"))?;
    let phones = model.config.acoustic.phones;
    let lexicon = Lexicon::load(lexicon_path, phones)?;
    let items = load_keyword_lines(keywords, Some(&lexicon), phones)?;
    if items.is_empty() {
        return Err(Error::EmptyDataset("keyword list is empty"));
    }
    let lex_items: Vec<(String, PhoneSeq)> = lexicon
        .iter()
        .map(|(w, p)| (w.to_string(), p.clone()))
        .collect();

    let specs: Vec<KeywordSpec> = items
        .iter()
        .map(|(name, phones)| KeywordSpec {
            name: name.clone(),
            phones: phones.clone(),
        })
        .collect();
    let bank = encoder.compile(&specs)?;

    let mut out_keywords = Vec::with_capacity(items.len());
    let mut top1_matches = 0usize;
    for (spec, filter) in bank.iter() {
        let ranked = nearest_words(&filter.effective(), &lex_items, encoder, top_n)?;
        let neighbors: Vec<NeighborEntry> = ranked
            .into_iter()
            .map(|(word, distance)| {
                let final_phone_match = lexicon
                    .get(&word)
                    .and_then(|p| p.as_slice().last())
                    .copied()
                    == spec.phones.as_slice().last().copied();
                NeighborEntry {
                    word,
                    distance,
                    final_phone_match,
                }
            })
            .collect();
        if neighbors.first().is_some_and(|n| n.final_phone_match) {
            top1_matches += 1;
        }
        out_keywords.push(KeywordNeighbors {
            keyword: spec.name.clone(),
            phones: spec.phones.0.clone(),
            neighbors,
        });
    }

    let (median, closest) = if bank.len() >= 2 {
        let d = filter_distances(&bank)?;
        let names = bank.names();
        let mut flat = Vec::new();
        let mut best = (0usize, 1usize);
        for i in 0..d.len() {
            for j in i + 1..d.len() {
                flat.push(d[i][j]);
                if d[i][j] < d[best.0][best.1] {
                    best = (i, j);
                }
            }
        }
        flat.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let median = flat[flat.len() / 2];
        (
            median,
            (names[best.0].clone(), names[best.1].clone(), d[best.0][best.1]),
        )
    } else {
        (0.0, (String::new(), String::new(), 0.0))
    };

    let report = AnalyzeReport {
        top1_final_phone_share: top1_matches as f64 / out_keywords.len() as f64,
        keywords: out_keywords,
        median_pairwise_distance: median,
        closest_pair: closest,
    };
    if let Some(path) = out {
        fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}
