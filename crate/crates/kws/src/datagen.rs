//! Synthetic corpus generator.
//!
//! Each phone id gets a fixed random prototype vector; an utterance is a
//! random phone string where every phone is held for 3..=8 frames of
//! prototype plus Gaussian noise. On top of the generic train/test split the
//! generator emits a pseudo-word lexicon, an evaluation keyword list that is
//! guaranteed never to occur in the training utterances, and an
//! isolated-command set with an hour of negative audio for fine-tuning.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::features::write_features;
use crate::io::manifest::{
    save_keyword_lines, write_jsonl, CorpusManifest, Lexicon, ManifestEntry, RefRecord,
};
use crate::tensor::{FeatureSequence, PhoneSeq};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub phones: usize,
    pub dim: usize,
    /// Per-frame Gaussian noise added to the phone prototype.
    pub noise: f64,
    /// Frames a phone is held for, inclusive bounds.
    pub min_dur: usize,
    pub max_dur: usize,
    /// Phones per generic utterance, inclusive bounds.
    pub min_len: usize,
    pub max_len: usize,
    pub train_utterances: usize,
    pub test_utterances: usize,
    pub lexicon_words: usize,
    pub keywords: usize,
    pub commands: usize,
    /// Fine-tuning positives generated per command.
    pub command_train_positives: usize,
    /// Command-free utterances mixed into the fine-tuning set.
    pub command_train_negatives: usize,
    /// Held-out positives per command for the FRR measurement.
    pub command_test_positives: usize,
    /// Negative audio for the FA/h measurement.
    pub negative_seconds: f64,
    pub frame_rate_hz: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            phones: 12,
            dim: 16,
            noise: 0.3,
            min_dur: 3,
            max_dur: 8,
            min_len: 5,
            max_len: 20,
            train_utterances: 2000,
            test_utterances: 200,
            lexicon_words: 200,
            keywords: 20,
            commands: 5,
            command_train_positives: 50,
            command_train_negatives: 100,
            command_test_positives: 25,
            negative_seconds: 3600.0,
            frame_rate_hz: 100.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidConfig(format!("gen-data: {reason}"));
        if self.phones < 4 {
            return Err(bad("need at least 4 phones"));
        }
        if self.phones > syllable_count() {
            return Err(bad("phone inventory exceeds the name alphabet"));
        }
        if self.dim == 0 {
            return Err(bad("dim must be positive"));
        }
        if self.min_dur < 1 || self.min_dur > self.max_dur {
            return Err(bad("phone duration range is empty"));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(bad("utterance length range is empty"));
        }
        if self.train_utterances == 0 {
            return Err(bad("need at least one training utterance"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(bad("noise must be finite and non-negative"));
        }
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(bad("frame rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub train_utterances: usize,
    pub train_frames: usize,
    pub test_utterances: usize,
    pub test_with_keywords: usize,
    pub lexicon_words: usize,
    pub keywords: usize,
    pub commands: usize,
    pub command_train_utterances: usize,
    pub command_test_positives: usize,
    pub negative_utterances: usize,
    pub negative_hours: f64,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvzcjhqwx";
const VOWELS: &[u8] = b"aeiou";

fn syllable_count() -> usize {
    CONSONANTS.len() * VOWELS.len()
}

fn syllable(phone: u32) -> String {
    let i = phone as usize;
    let c = CONSONANTS[i / VOWELS.len()] as char;
    let v = VOWELS[i % VOWELS.len()] as char;
    format!("{c}{v}")
}

/// Pronunciation-derived word name; injective because every syllable is
/// exactly two characters.
pub fn word_name(phones: &PhoneSeq) -> String {
    phones.as_slice().iter().map(|&p| syllable(p)).collect()
}

/// Fixed per-phone prototype vectors, N(0,1) entries.
pub fn prototypes(phones: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..phones)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// Render a phone string to frames: each phone held for a random duration,
/// prototype plus Gaussian noise.
pub fn synthesize(
    protos: &[Vec<f64>],
    phones: &PhoneSeq,
    config: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> FeatureSequence {
    let dim = config.dim;
    let mut data = Vec::new();
    let mut frames = 0;
    for &p in phones.as_slice() {
        let dur = rng.gen_range(config.min_dur..=config.max_dur);
        for _ in 0..dur {
            for d in 0..dim {
                let n: f64 = StandardNormal.sample(rng);
                data.push(protos[p as usize][d] + config.noise * n);
            }
            frames += 1;
        }
    }
    FeatureSequence::from_vec(frames, dim, data).expect("generator produced a full matrix")
}

fn random_seq(len: usize, phones: usize, rng: &mut ChaCha8Rng) -> PhoneSeq {
    PhoneSeq((0..len).map(|_| rng.gen_range(0..phones as u32)).collect())
}

fn contains_any(seq: &PhoneSeq, patterns: &[PhoneSeq]) -> bool {
    patterns.iter().any(|p| seq.contains_seq(p))
}

fn count_occurrences(seq: &[u32], pattern: &[u32]) -> usize {
    if pattern.is_empty() || pattern.len() > seq.len() {
        return 0;
    }
    seq.windows(pattern.len()).filter(|w| w == &pattern).count()
}

/// Sample a phone string of length in `lens` that avoids every pattern in
/// `avoid`. Patterns are short relative to the inventory so rejection is rare.
fn clean_seq(
    lens: (usize, usize),
    phones: usize,
    avoid: &[PhoneSeq],
    rng: &mut ChaCha8Rng,
) -> Result<PhoneSeq> {
    for _ in 0..1000 {
        let len = rng.gen_range(lens.0..=lens.1);
        let seq = random_seq(len, phones, rng);
        if !contains_any(&seq, avoid) {
            return Ok(seq);
        }
    }
    Err(Error::InvalidConfig(
        "gen-data: could not sample an utterance avoiding the keyword set; \
         inventory too small for the requested word lists"
            .into(),
    ))
}

fn has_adjacent_repeat(seq: &PhoneSeq) -> bool {
    seq.as_slice().windows(2).any(|w| w[0] == w[1])
}

/// Distinct words, none a substring of another, none colliding with `avoid`.
/// With `distinct_adjacent` the words never repeat a phone back to back;
/// detection targets use this because a doubled phone only differs from a
/// single long one by its blank gap, which a fixed window cannot count.
fn word_set(
    count: usize,
    lens: (usize, usize),
    phones: usize,
    avoid: &[PhoneSeq],
    mutual: bool,
    distinct_adjacent: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PhoneSeq>> {
    let mut words: Vec<PhoneSeq> = Vec::with_capacity(count);
    let mut tries = 0;
    while words.len() < count {
        tries += 1;
        if tries > 1000 * count {
            return Err(Error::InvalidConfig(
                "gen-data: could not sample enough distinct words; \
                 increase the phone inventory or shrink the word lists"
                    .into(),
            ));
        }
        let len = rng.gen_range(lens.0..=lens.1);
        let w = random_seq(len, phones, rng);
        if distinct_adjacent && has_adjacent_repeat(&w) {
            continue;
        }
        if avoid.iter().any(|a| *a == w) {
            continue;
        }
        let clash = if mutual {
            words
                .iter()
                .any(|u| u.contains_seq(&w) || w.contains_seq(u))
        } else {
            words.iter().any(|u| *u == w)
        };
        if !clash {
            words.push(w);
        }
    }
    Ok(words)
}

/// The spoken commands. The first two are a deliberate minimal pair with a
/// shared long suffix (the "increase"/"decrease" analog): near-identical
/// filters that fine-tuning has to pull apart. The rest are random.
fn command_set(
    config: &GenConfig,
    keywords: &[PhoneSeq],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PhoneSeq>> {
    let p = config.phones;
    if config.commands < 2 {
        return word_set(config.commands, (4, 8), p, keywords, true, true, rng);
    }
    let mut commands = loop {
        let shared = random_seq(5, p, rng);
        if has_adjacent_repeat(&shared) {
            continue;
        }
        let first = shared.as_slice()[0];
        let heads: Vec<u32> = (0..p as u32).filter(|&c| c != first).collect();
        let a = heads[rng.gen_range(0..heads.len())];
        let b = loop {
            let c = heads[rng.gen_range(0..heads.len())];
            if c != a {
                break c;
            }
        };
        let mut pair0 = vec![a];
        pair0.extend_from_slice(shared.as_slice());
        let mut pair1 = vec![b];
        pair1.extend_from_slice(shared.as_slice());
        let pair = vec![PhoneSeq(pair0), PhoneSeq(pair1)];
        let clash = keywords.iter().any(|k| contains_any(k, &pair))
            || pair.iter().any(|c| contains_any(c, keywords));
        if !clash {
            break pair;
        }
    };
    if config.commands > 2 {
        let mut avoid = keywords.to_vec();
        avoid.extend(commands.iter().cloned());
        commands.extend(word_set(config.commands - 2, (4, 8), p, &avoid, true, true, rng)?);
    }
    Ok(commands)
}

/// The last `n` phones (the whole string when shorter). The detector's
/// window only ever sees about this much of a long keyword, so a chance
/// occurrence of the tail is indistinguishable from the keyword itself.
fn tail(seq: &PhoneSeq, n: usize) -> PhoneSeq {
    let s = seq.as_slice();
    PhoneSeq(s[s.len().saturating_sub(n)..].to_vec())
}

struct Writer<'a> {
    protos: &'a [Vec<f64>],
    config: &'a GenConfig,
    manifest: CorpusManifest,
    dir: std::path::PathBuf,
    frames: usize,
}

impl<'a> Writer<'a> {
    fn new(protos: &'a [Vec<f64>], config: &'a GenConfig, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Writer {
            protos,
            config,
            manifest: CorpusManifest::new(config.phones, config.dim, config.frame_rate_hz, dir),
            dir: dir.to_path_buf(),
            frames: 0,
        })
    }

    fn add(
        &mut self,
        id: String,
        phones: PhoneSeq,
        keywords: Vec<String>,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let feats = synthesize(self.protos, &phones, self.config, rng);
        let file = format!("{id}.kwsf");
        write_features(&self.dir.join(&file), &feats)?;
        let frames = feats.frames();
        self.frames += frames;
        self.manifest.entries.push(ManifestEntry {
            id,
            features: file,
            phones: phones.0,
            keywords,
        });
        Ok(frames)
    }

    fn finish(self) -> Result<usize> {
        self.manifest.save(&self.dir.join("manifest.json"))?;
        Ok(self.frames)
    }
}

/// Generate the full corpus tree under `out`:
/// lexicon.tsv, keywords.tsv, commands.tsv, train/, test/ (with refs.jsonl),
/// cmd_train/, cmd_test/ (positives plus negative hours, with refs.jsonl).
pub fn generate(config: &GenConfig, out: &Path, seed: u64) -> Result<GenSummary> {
    use rand::SeedableRng;
    config.validate()?;
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(config.phones, config.dim, &mut rng);

    let keywords = word_set(
        config.keywords,
        (4, 8),
        config.phones,
        &[],
        true,
        true,
        &mut rng,
    )?;
    let commands = command_set(config, &keywords, &mut rng)?;
    let lexicon_seqs = {
        let mut avoid = keywords.clone();
        avoid.extend(commands.iter().cloned());
        word_set(
            config.lexicon_words,
            (3, 8),
            config.phones,
            &avoid,
            false,
            false,
            &mut rng,
        )?
    };

    let mut lexicon = Lexicon::new();
    for w in &lexicon_seqs {
        lexicon.insert(word_name(w), w.clone())?;
    }
    lexicon.save(&out.join("lexicon.tsv"))?;
    let named = |seqs: &[PhoneSeq]| -> Vec<(String, PhoneSeq)> {
        seqs.iter().map(|s| (word_name(s), s.clone())).collect()
    };
    let keyword_items = named(&keywords);
    let command_items = named(&commands);
    save_keyword_lines(&out.join("keywords.tsv"), &keyword_items)?;
    save_keyword_lines(&out.join("commands.tsv"), &command_items)?;

    // Patterns the generic training text must never contain, so the eval
    // keywords stay genuinely unseen by every training stage.
    let mut banned = keywords.clone();
    banned.extend(commands.iter().cloned());

    let mut train = Writer::new(&protos, config, &out.join("train"))?;
    for i in 0..config.train_utterances {
        let seq = clean_seq((config.min_len, config.max_len), config.phones, &banned, &mut rng)?;
        train.add(format!("train_{i:04}"), seq, Vec::new(), &mut rng)?;
    }
    let train_frames = train.finish()?;

    let (test_with_keywords, refs) = {
        let mut test = Writer::new(&protos, config, &out.join("test"))?;
        let mut refs = Vec::new();
        let mut with_kw = 0;
        for i in 0..config.test_utterances {
            let id = format!("test_{i:04}");
            // Roughly a quarter of the held-out set is keyword-free.
            let want = if i % 4 == 0 {
                0
            } else if i % 4 == 2 {
                2.min(keywords.len())
            } else {
                1
            };
            let (seq, names) =
                embed_keywords(want, &keywords, &keyword_items, config, &mut rng)?;
            if !names.is_empty() {
                with_kw += 1;
            }
            refs.push(RefRecord {
                utterance: id.clone(),
                keywords: names.clone(),
            });
            test.add(id, seq, names, &mut rng)?;
        }
        test.finish()?;
        write_jsonl(&out.join("test").join("refs.jsonl"), &refs)?;
        (with_kw, refs)
    };
    drop(refs);

    let mut cmd_train = Writer::new(&protos, config, &out.join("cmd_train"))?;
    for (c, cmd) in commands.iter().enumerate() {
        for i in 0..config.command_train_positives {
            let (seq, _) = embed_one(cmd, &commands, config, &mut rng)?;
            let name = command_items[c].0.clone();
            cmd_train.add(format!("cmd{c}_{i:03}"), seq, vec![name], &mut rng)?;
        }
    }
    for i in 0..config.command_train_negatives {
        let seq = clean_seq((15, 30), config.phones, &commands, &mut rng)?;
        cmd_train.add(format!("cmdneg_{i:03}"), seq, Vec::new(), &mut rng)?;
    }
    cmd_train.finish()?;

    let mut cmd_test = Writer::new(&protos, config, &out.join("cmd_test"))?;
    let mut cmd_refs = Vec::new();
    for (c, cmd) in commands.iter().enumerate() {
        for i in 0..config.command_test_positives {
            let (seq, _) = embed_one(cmd, &commands, config, &mut rng)?;
            let id = format!("cmdtest{c}_{i:03}");
            let name = command_items[c].0.clone();
            cmd_refs.push(RefRecord {
                utterance: id.clone(),
                keywords: vec![name.clone()],
            });
            cmd_test.add(id, seq, vec![name], &mut rng)?;
        }
    }
    let mut negative_utterances = 0;
    let negative_frames_target =
        (config.negative_seconds * config.frame_rate_hz).round() as usize;
    let mut negative_frames = 0;
    while negative_frames < negative_frames_target {
        let seq = clean_seq((40, 80), config.phones, &commands, &mut rng)?;
        let id = format!("neg_{negative_utterances:04}");
        cmd_refs.push(RefRecord {
            utterance: id.clone(),
            keywords: Vec::new(),
        });
        negative_frames += cmd_test.add(id, seq, Vec::new(), &mut rng)?;
        negative_utterances += 1;
    }
    cmd_test.finish()?;
    write_jsonl(&out.join("cmd_test").join("refs.jsonl"), &cmd_refs)?;

    let summary = GenSummary {
        train_utterances: config.train_utterances,
        train_frames,
        test_utterances: config.test_utterances,
        test_with_keywords,
        lexicon_words: config.lexicon_words,
        keywords: config.keywords,
        commands: config.commands,
        command_train_utterances: config.commands * config.command_train_positives
            + config.command_train_negatives,
        command_test_positives: config.commands * config.command_test_positives,
        negative_utterances,
        negative_hours: negative_frames as f64 / config.frame_rate_hz / 3600.0,
    };
    fs::write(
        out.join("gen_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(summary)
}

/// Prefix + keyword (+ gap + keyword) + suffix, resampled until the assembled
/// string contains exactly the intended keyword occurrences and nothing else
/// from the keyword list.
/// Build one test utterance with `want` distinct keywords in it. Besides
/// exact occurrence counts, the text may not contain any keyword's 5-phone
/// tail outside the embedded keywords themselves: the detector only sees the
/// tail of a long keyword, and a 12-phone inventory produces chance tail
/// hits far more often than a realistically sized one would.
fn embed_keywords(
    want: usize,
    keywords: &[PhoneSeq],
    items: &[(String, PhoneSeq)],
    config: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PhoneSeq, Vec<String>)> {
    let tails: Vec<PhoneSeq> = keywords.iter().map(|k| tail(k, 5)).collect();
    if want == 0 {
        let seq = clean_seq((config.min_len, config.max_len), config.phones, &tails, rng)?;
        return Ok((seq, Vec::new()));
    }
    for _ in 0..1000 {
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < want {
            let k = rng.gen_range(0..keywords.len());
            if !picked.contains(&k) {
                picked.push(k);
            }
        }
        let mut seq: Vec<u32> = Vec::new();
        let prefix = rng.gen_range(6..=10);
        seq.extend(random_seq(prefix, config.phones, rng).0);
        for (j, &k) in picked.iter().enumerate() {
            if j > 0 {
                let gap = rng.gen_range(4..=8);
                seq.extend(random_seq(gap, config.phones, rng).0);
            }
            seq.extend_from_slice(keywords[k].as_slice());
        }
        let suffix = rng.gen_range(0..=4);
        seq.extend(random_seq(suffix, config.phones, rng).0);
        let full_ok = keywords.iter().enumerate().all(|(k, kw)| {
            let expect = if picked.contains(&k) { 1 } else { 0 };
            count_occurrences(&seq, kw.as_slice()) == expect
        });
        let tails_ok = tails.iter().all(|t| {
            let expected: usize = picked
                .iter()
                .map(|&j| count_occurrences(keywords[j].as_slice(), t.as_slice()))
                .sum();
            count_occurrences(&seq, t.as_slice()) == expected
        });
        if full_ok && tails_ok {
            let names = picked.iter().map(|&k| items[k].0.clone()).collect();
            return Ok((PhoneSeq(seq), names));
        }
    }
    Err(Error::InvalidConfig(
        "gen-data: keyword embedding kept colliding; inventory too small".into(),
    ))
}

/// One command embedded once, with no other command present.
fn embed_one(
    cmd: &PhoneSeq,
    all: &[PhoneSeq],
    config: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PhoneSeq, Vec<String>)> {
    for _ in 0..1000 {
        let mut seq: Vec<u32> = Vec::new();
        let prefix = rng.gen_range(6..=10);
        seq.extend(random_seq(prefix, config.phones, rng).0);
        seq.extend_from_slice(cmd.as_slice());
        let suffix = rng.gen_range(0..=3);
        seq.extend(random_seq(suffix, config.phones, rng).0);
        let ok = all.iter().all(|c| {
            let expect = if c == cmd { 1 } else { 0 };
            count_occurrences(&seq, c.as_slice()) == expect
        });
        if ok {
            return Ok((PhoneSeq(seq), vec![word_name(cmd)]));
        }
    }
    Err(Error::InvalidConfig(
        "gen-data: command embedding kept colliding; inventory too small".into(),
    ))
}

/// Convenience for tests and examples: a small in-memory corpus of
/// (features, phone string) pairs without touching the filesystem.
pub fn in_memory_corpus(
    config: &GenConfig,
    utterances: usize,
    seed: u64,
) -> Vec<(FeatureSequence, PhoneSeq)> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = prototypes(config.phones, config.dim, &mut rng);
    (0..utterances)
        .map(|_| {
            let len = rng.gen_range(config.min_len..=config.max_len);
            let seq = random_seq(len, config.phones, &mut rng);
            let feats = synthesize(&protos, &seq, config, &mut rng);
            (feats, seq)
        })
        .collect()
}

/// Collect the distinct final phones of a word list; used by the analysis
/// stage and its tests.
pub fn final_phones(words: &[(String, PhoneSeq)]) -> HashSet<u32> {
    words
        .iter()
        .filter_map(|(_, s)| s.as_slice().last().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::features::read_features;
    use rand::SeedableRng;

    fn tiny_config() -> GenConfig {
        GenConfig {
            train_utterances: 12,
            test_utterances: 8,
            lexicon_words: 30,
            keywords: 6,
            commands: 3,
            command_train_positives: 4,
            command_train_negatives: 6,
            command_test_positives: 2,
            negative_seconds: 20.0,
            ..GenConfig::default()
        }
    }

    #[test]
    fn zero_noise_repeats_frames_within_a_segment() {
        let config = GenConfig {
            noise: 0.0,
            ..GenConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let protos = prototypes(config.phones, config.dim, &mut rng);
        let seq = PhoneSeq(vec![3, 3, 7]);
        let feats = synthesize(&protos, &seq, &config, &mut rng);
        // With sigma = 0 every frame equals some prototype exactly.
        for t in 0..feats.frames() {
            let row = feats.row(t);
            assert!(protos.iter().any(|p| p.as_slice() == row));
        }
        assert_eq!(feats.row(0), protos[3].as_slice());
        assert_eq!(feats.row(feats.frames() - 1), protos[7].as_slice());
    }

    #[test]
    fn durations_give_ctc_feasibility_margin() {
        let config = GenConfig::default();
        for (feats, seq) in in_memory_corpus(&config, 20, 3) {
            assert!(feats.frames() >= 3 * seq.len());
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let config = tiny_config();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(&config, d1.path(), 11).unwrap();
        generate(&config, d2.path(), 11).unwrap();
        let m1 = CorpusManifest::load(&d1.path().join("train/manifest.json")).unwrap();
        for e in &m1.entries {
            let f1 = std::fs::read(d1.path().join("train").join(&e.features)).unwrap();
            let f2 = std::fs::read(d2.path().join("train").join(&e.features)).unwrap();
            assert_eq!(f1, f2, "feature bytes differ for {}", e.id);
        }
        let l1 = std::fs::read(d1.path().join("lexicon.tsv")).unwrap();
        let l2 = std::fs::read(d2.path().join("lexicon.tsv")).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn training_text_never_contains_eval_keywords() {
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        generate(&config, dir.path(), 5).unwrap();
        let kws = crate::io::manifest::load_keyword_lines(
            &dir.path().join("keywords.tsv"),
            None,
            config.phones,
        )
        .unwrap();
        let train = CorpusManifest::load(&dir.path().join("train/manifest.json")).unwrap();
        for e in &train.entries {
            let seq = PhoneSeq(e.phones.clone());
            for (name, kw) in &kws {
                assert!(
                    !seq.contains_seq(kw),
                    "{} leaked into training utterance {}",
                    name,
                    e.id
                );
            }
        }
    }

    #[test]
    fn test_refs_match_manifest_and_features_load() {
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let summary = generate(&config, dir.path(), 9).unwrap();
        assert!(summary.test_with_keywords > 0);
        let test = CorpusManifest::load(&dir.path().join("test/manifest.json")).unwrap();
        let refs: Vec<RefRecord> =
            crate::io::manifest::read_jsonl(&dir.path().join("test/refs.jsonl")).unwrap();
        assert_eq!(refs.len(), test.entries.len());
        for (e, r) in test.entries.iter().zip(&refs) {
            assert_eq!(e.id, r.utterance);
            assert_eq!(e.keywords, r.keywords);
        }
        let feats = read_features(&test.feature_path(&test.entries[0])).unwrap();
        assert_eq!(feats.dim(), config.dim);
        assert!(feats.frames() >= 3 * config.min_len);
    }

    #[test]
    fn command_pair_shares_long_suffix() {
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        generate(&config, dir.path(), 13).unwrap();
        let cmds = crate::io::manifest::load_keyword_lines(
            &dir.path().join("commands.tsv"),
            None,
            config.phones,
        )
        .unwrap();
        let a = &cmds[0].1;
        let b = &cmds[1].1;
        assert_eq!(a.len(), b.len());
        assert_eq!(a.suffix(5), b.suffix(5));
        assert_ne!(a.as_slice()[0], b.as_slice()[0]);
    }

    #[test]
    fn detection_targets_never_repeat_a_phone_back_to_back() {
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        generate(&config, dir.path(), 13).unwrap();
        for file in ["keywords.tsv", "commands.tsv"] {
            let items =
                crate::io::manifest::load_keyword_lines(&dir.path().join(file), None, config.phones)
                    .unwrap();
            for (name, seq) in &items {
                assert!(
                    !seq.as_slice().windows(2).any(|w| w[0] == w[1]),
                    "{name} in {file} repeats a phone"
                );
            }
        }
    }

    #[test]
    fn test_filler_avoids_keyword_tails() {
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        generate(&config, dir.path(), 9).unwrap();
        let kws = crate::io::manifest::load_keyword_lines(
            &dir.path().join("keywords.tsv"),
            None,
            config.phones,
        )
        .unwrap();
        let by_name: std::collections::BTreeMap<&str, &PhoneSeq> =
            kws.iter().map(|(n, s)| (n.as_str(), s)).collect();
        let m = CorpusManifest::load(&dir.path().join("test/manifest.json")).unwrap();
        for e in &m.entries {
            let seq = PhoneSeq(e.phones.clone());
            for (name, kw) in &kws {
                let t = tail(kw, 5);
                let expected: usize = e
                    .keywords
                    .iter()
                    .map(|n| count_occurrences(by_name[n.as_str()].as_slice(), t.as_slice()))
                    .sum();
                assert_eq!(
                    count_occurrences(seq.as_slice(), t.as_slice()),
                    expected,
                    "tail of {} appears unexpectedly in {}",
                    name,
                    e.id
                );
            }
        }
    }

    #[test]
    fn negatives_reach_requested_duration_and_avoid_commands() {
        let config = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let summary = generate(&config, dir.path(), 21).unwrap();
        assert!(summary.negative_hours * 3600.0 >= config.negative_seconds);
        let cmds = crate::io::manifest::load_keyword_lines(
            &dir.path().join("commands.tsv"),
            None,
            config.phones,
        )
        .unwrap();
        let m = CorpusManifest::load(&dir.path().join("cmd_test/manifest.json")).unwrap();
        for e in m.entries.iter().filter(|e| e.id.starts_with("neg_")) {
            let seq = PhoneSeq(e.phones.clone());
            for (_, c) in &cmds {
                assert!(!seq.contains_seq(c));
            }
            assert!(e.keywords.is_empty());
        }
    }

    #[test]
    fn word_names_are_injective_over_the_inventory() {
        let mut seen = HashSet::new();
        for p in 0..100u32 {
            assert!(seen.insert(syllable(p)));
        }
        assert_eq!(
            word_name(&PhoneSeq(vec![0, 5, 1])),
            format!("{}{}{}", syllable(0), syllable(5), syllable(1))
        );
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = GenConfig {
            phones: 2,
            ..GenConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GenConfig {
            min_dur: 0,
            ..GenConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
