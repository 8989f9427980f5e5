//! JSON corpus manifests, the TSV lexicon, and the JSONL record streams
//! (alignments, detections, references).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PhoneSeq;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Feature file path, relative to the manifest's directory.
    pub features: String,
    pub phones: Vec<u32>,
    /// Expected keyword names in spoken order; empty for unlabeled audio.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keywords: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    /// Phone inventory size P (labels 0..P-1; blank = P is implicit).
    pub phones: usize,
    pub dim: usize,
    pub frame_rate_hz: f64,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base: PathBuf,
}

impl CorpusManifest {
    pub fn new(phones: usize, dim: usize, frame_rate_hz: f64, base: &Path) -> Self {
        CorpusManifest {
            phones,
            dim,
            frame_rate_hz,
            entries: Vec::new(),
            base: base.to_path_buf(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut m: CorpusManifest = serde_json::from_str(&text)?;
        m.base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut seen = HashSet::new();
        for e in &m.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("duplicate utterance id {:?}", e.id),
                });
            }
            let f = m.base.join(&e.features);
            if !f.is_file() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("missing feature file {}", f.display()),
                });
            }
            PhoneSeq(e.phones.clone()).validate(m.phones)?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn feature_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.base.join(&entry.features)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    words: Vec<(String, PhoneSeq)>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn new() -> Self {
        Lexicon::default()
    }

    pub fn insert(&mut self, word: String, phones: PhoneSeq) -> Result<()> {
        if self.index.contains_key(&word) {
            return Err(Error::DuplicateKeyword(word));
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push((word, phones));
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&PhoneSeq> {
        self.index.get(word).map(|&i| &self.words[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PhoneSeq)> {
        self.words.iter().map(|(w, p)| (w.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// One `word<TAB>p0 p1 ...` line per entry.
    pub fn load(path: &Path, phone_count: usize) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lex = Lexicon::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, phones) = parse_tsv_line(line).ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("line {}: expected word<TAB>phone ids", n + 1),
            })?;
            phones.validate(phone_count)?;
            lex.insert(word, phones)?;
        }
        Ok(lex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (word, phones) in &self.words {
            writeln!(w, "{}\t{}", word, join_ids(phones))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn join_ids(phones: &PhoneSeq) -> String {
    phones
        .0
        .iter()
        .map(|p| p.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_tsv_line(line: &str) -> Option<(String, PhoneSeq)> {
    let (word, rest) = line.split_once('\t')?;
    let ids: Option<Vec<u32>> = rest.split_whitespace().map(|t| t.parse().ok()).collect();
    let ids = ids?;
    if word.is_empty() || ids.is_empty() {
        return None;
    }
    Some((word.to_string(), PhoneSeq(ids)))
}

/// Keyword list: `name<TAB>p0 p1 ...` per line, or bare `name` lines
/// resolved through the lexicon.
pub fn load_keyword_lines(
    path: &Path,
    lexicon: Option<&Lexicon>,
    phone_count: usize,
) -> Result<Vec<(String, PhoneSeq)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut names = HashSet::new();
    for line in text.lines() {
        let line = line.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let (name, phones) = match parse_tsv_line(line) {
            Some(pair) => pair,
            None => {
                let name = line.trim().to_string();
                let phones = lexicon
                    .and_then(|l| l.get(&name).cloned())
                    .ok_or_else(|| Error::MissingWord(name.clone()))?;
                (name, phones)
            }
        };
        phones.validate(phone_count)?;
        if !names.insert(name.clone()) {
            return Err(Error::DuplicateKeyword(name));
        }
        out.push((name, phones));
    }
    Ok(out)
}

pub fn save_keyword_lines(path: &Path, items: &[(String, PhoneSeq)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (name, phones) in items {
        writeln!(w, "{}\t{}", name, join_ids(phones))?;
    }
    w.flush()?;
    Ok(())
}

/// One detection event as emitted by the `detect` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub utterance: String,
    pub keyword: String,
    /// Pooled-feature frame index of the posterior local maximum.
    pub frame: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub utterance: String,
    /// Per-frame label ids (phones 0..P-1, blank = P), length T.
    pub path: Vec<u32>,
}

/// Expected keyword names for one utterance, in spoken order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefRecord {
    pub utterance: String,
    pub keywords: Vec<String>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
