//! Evaluation metrics: keyword-level F1, exact-parse rate, command FRR and
//! false alarms per hour, and the filter-geometry analysis.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::manifest::{DetectionRecord, RefRecord};
use crate::keyword::{FilterBank, KeywordEncoder};
use crate::tensor::{PhoneSeq, Tensor};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeywordCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub utterances: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact_rate: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub per_keyword: BTreeMap<String, KeywordCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fa_per_hour: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub operating_tau: Option<f64>,
}

impl MetricReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Detected keyword names per utterance, in temporal order. Utterances with
/// no detections map to an empty list.
pub fn group_detections(
    detections: &[DetectionRecord],
    references: &[RefRecord],
) -> Result<BTreeMap<String, Vec<String>>> {
    let mut by_utt: BTreeMap<String, Vec<String>> = references
        .iter()
        .map(|r| (r.utterance.clone(), Vec::new()))
        .collect();
    for d in detections {
        let Some(list) = by_utt.get_mut(&d.utterance) else {
            return Err(Error::UnknownUtterance(d.utterance.clone()));
        };
        list.push(d.keyword.clone());
    }
    Ok(by_utt)
}

/// Longest common subsequence of two name lists, as matched index pairs.
fn lcs_pairs(a: &[String], b: &[String]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] = if a[i] == b[j] {
                dp[i + 1][j + 1] + 1
            } else {
                dp[i + 1][j].max(dp[i][j + 1])
            };
        }
    }
    let mut pairs = Vec::with_capacity(dp[0][0]);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if dp[i + 1][j] >= dp[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    pairs
}

#[derive(Debug, Clone, Default)]
pub struct F1Summary {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub per_keyword: BTreeMap<String, KeywordCounts>,
}

impl F1Summary {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Keyword-level precision/recall/F1: per utterance, match the detected name
/// sequence to the reference by longest common subsequence; matches are TP,
/// leftover detections FP, leftover references FN.
pub fn keyword_f1(
    detections: &[DetectionRecord],
    references: &[RefRecord],
) -> Result<F1Summary> {
    let grouped = group_detections(detections, references)?;
    let mut summary = F1Summary::default();
    for r in references {
        let detected = &grouped[&r.utterance];
        let pairs = lcs_pairs(detected, &r.keywords);
        let mut det_matched = vec![false; detected.len()];
        let mut ref_matched = vec![false; r.keywords.len()];
        for &(i, j) in &pairs {
            det_matched[i] = true;
            ref_matched[j] = true;
            summary.per_keyword.entry(detected[i].clone()).or_default().tp += 1;
        }
        summary.tp += pairs.len();
        for (i, name) in detected.iter().enumerate() {
            if !det_matched[i] {
                summary.fp += 1;
                summary.per_keyword.entry(name.clone()).or_default().fp += 1;
            }
        }
        for (j, name) in r.keywords.iter().enumerate() {
            if !ref_matched[j] {
                summary.fn_ += 1;
                summary.per_keyword.entry(name.clone()).or_default().fn_ += 1;
            }
        }
    }
    Ok(summary)
}

/// Fraction of reference utterances whose detected keyword sequence equals
/// the reference sequence exactly (order and multiplicity included).
pub fn exact_rate(detections: &[DetectionRecord], references: &[RefRecord]) -> Result<f64> {
    if references.is_empty() {
        return Ok(0.0);
    }
    let grouped = group_detections(detections, references)?;
    let exact = references
        .iter()
        .filter(|r| grouped[&r.utterance] == r.keywords)
        .count();
    Ok(exact as f64 / references.len() as f64)
}

/// Raw score table for the command-detection metrics: one max-over-time score
/// per positive utterance, candidate event scores on the negative audio, and
/// the negative duration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CommandScores {
    pub positive_scores: Vec<f64>,
    pub negative_event_scores: Vec<f64>,
    pub negative_hours: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub tau: f64,
    pub frr: f64,
    pub fa_per_hour: f64,
}

/// Sweep tau over {0.01, ..., 0.99}: FRR is the fraction of positives scoring
/// below tau, FA/h the negative events at or above tau per hour.
pub fn command_metrics(scores: &CommandScores) -> Result<Vec<OperatingPoint>> {
    if !(scores.negative_hours.is_finite() && scores.negative_hours > 0.0) {
        return Err(Error::InvalidConfig(
            "command metrics need a non-empty negative set".into(),
        ));
    }
    let positives = scores.positive_scores.len();
    let mut curve = Vec::with_capacity(99);
    for i in 1..=99u32 {
        let tau = f64::from(i) / 100.0;
        let missed = scores.positive_scores.iter().filter(|&&s| s < tau).count();
        let alarms = scores
            .negative_event_scores
            .iter()
            .filter(|&&s| s >= tau)
            .count();
        curve.push(OperatingPoint {
            tau,
            frr: ratio(missed, positives),
            fa_per_hour: alarms as f64 / scores.negative_hours,
        });
    }
    Ok(curve)
}

/// Smallest tau on the sweep whose FA/h is at or under the budget.
pub fn operating_point_at_fa(curve: &[OperatingPoint], max_fa_per_hour: f64) -> Option<OperatingPoint> {
    curve
        .iter()
        .find(|p| p.fa_per_hour <= max_fa_per_hour)
        .copied()
}

pub fn write_curve_csv(path: &Path, curve: &[OperatingPoint]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "tau,frr,fa_per_hour")?;
    for p in curve {
        writeln!(w, "{:.2},{},{}", p.tau, p.frr, p.fa_per_hour)?;
    }
    w.flush()?;
    Ok(())
}

fn euclidean(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise Euclidean distances between the bank's effective filters.
/// Exactly symmetric with a zero diagonal by construction.
pub fn filter_distances(bank: &FilterBank) -> Result<Vec<Vec<f64>>> {
    if bank.len() < 2 {
        return Err(Error::InvalidConfig(
            "filter geometry needs at least two keywords".into(),
        ));
    }
    let effective: Vec<Tensor> = bank.iter().map(|(_, f)| f.effective()).collect();
    let n = effective.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let dist = euclidean(&effective[i], &effective[j]);
            d[i][j] = dist;
            d[j][i] = dist;
        }
    }
    Ok(d)
}

/// Compile every lexicon word through the encoder and rank by distance to the
/// given filter. Ties break on the word name so the ranking is independent of
/// lexicon order.
pub fn nearest_words(
    filter: &Tensor,
    lexicon: &[(String, PhoneSeq)],
    encoder: &KeywordEncoder,
    top_n: usize,
) -> Result<Vec<(String, f64)>> {
    if lexicon.is_empty() {
        return Err(Error::EmptyDataset("lexicon has no words"));
    }
    let mut ranked: Vec<(String, f64)> = Vec::with_capacity(lexicon.len());
    for (name, phones) in lexicon {
        let candidate = encoder.encode_keyword(phones)?;
        ranked.push((name.clone(), euclidean(filter, &candidate.effective())));
    }
    ranked.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("distances are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked.truncate(top_n);
    Ok(ranked)
}

/// Fraction of (keyword, neighbor) pairs whose phone strings end on the same
/// phone; the qualitative mirror of the paper's suffix observation.
pub fn final_phone_match_share(pairs: &[(PhoneSeq, PhoneSeq)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let matches = pairs
        .iter()
        .filter(|(a, b)| a.as_slice().last() == b.as_slice().last())
        .count();
    matches as f64 / pairs.len() as f64
}
