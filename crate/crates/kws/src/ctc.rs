//! CTC loss, the collapse function, and Viterbi forced alignment.
//!
//! All recursions run in log space over the blank-extended target lattice
//! so sequences hundreds of frames long do not underflow.

use crate::error::{Error, Result};
use crate::tensor::PhoneSeq;

/// A frame-level labeling over {phones 0..P-1, blank = P}.
pub type LabelSeq = Vec<u32>;

/// T x (P+1) matrix of per-frame log-probabilities; each row must
/// log-sum-exp to 0 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPosteriorgram {
    frames: usize,
    labels: usize,
    data: Vec<f64>,
}

impl LogPosteriorgram {
    pub fn new(frames: usize, labels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * labels {
            return Err(Error::Shape {
                context: "LogPosteriorgram::new",
                expected: format!("{} values", frames * labels),
                got: format!("{}", data.len()),
            });
        }
        let pg = LogPosteriorgram {
            frames,
            labels,
            data,
        };
        for t in 0..frames {
            let lse = log_sum_exp(pg.row(t));
            if lse.abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!(
                    "posteriorgram row {t} log-sum-exps to {lse:e}, not 0"
                )));
            }
        }
        Ok(pg)
    }

    /// Rows of per-frame probabilities, normalized here.
    pub fn from_probs(frames: usize, labels: usize, probs: &[f64]) -> Result<Self> {
        let mut data = Vec::with_capacity(frames * labels);
        for t in 0..frames {
            let row = &probs[t * labels..(t + 1) * labels];
            let total: f64 = row.iter().sum();
            for &p in row {
                data.push((p / total).ln());
            }
        }
        LogPosteriorgram::new(frames, labels, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Number of labels including blank.
    pub fn labels(&self) -> usize {
        self.labels
    }

    /// Blank is the last label id.
    pub fn blank(&self) -> u32 {
        (self.labels - 1) as u32
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.labels..(t + 1) * self.labels]
    }

    pub fn logp(&self, t: usize, label: u32) -> f64 {
        self.data[t * self.labels + label as usize]
    }
}

/// The collapse function: merge adjacent duplicates, then remove blanks.
pub fn collapse(labels: &[u32], blank: u32) -> PhoneSeq {
    let mut out = Vec::new();
    let mut prev: Option<u32> = None;
    for &l in labels {
        if prev != Some(l) {
            if l != blank {
                out.push(l);
            }
            prev = Some(l);
        }
    }
    PhoneSeq(out)
}

/// Numerically stable log(sum(exp(xs))).
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn count_adjacent_repeats(target: &PhoneSeq) -> usize {
    target.0.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_feasible(frames: usize, target: &PhoneSeq) -> Result<()> {
    let repeats = count_adjacent_repeats(target);
    if frames < target.len() + repeats {
        return Err(Error::InfeasibleTarget {
            frames,
            target_len: target.len(),
            repeats,
        });
    }
    Ok(())
}

/// Blank-extended target: blank, s1, blank, s2, ..., sL, blank.
fn extend_target(target: &PhoneSeq, blank: u32) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &p in &target.0 {
        ext.push(p);
        ext.push(blank);
    }
    ext
}

/// True when the lattice allows the skip transition s-2 -> s.
fn can_skip(ext: &[u32], s: usize, blank: u32) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// CTC loss and its exact gradient with respect to the log-posteriorgram.
///
/// Loss is -log of the total probability of all frame labelings that
/// collapse to `target`, computed by the forward-backward recursion.
pub fn ctc_loss(logp: &LogPosteriorgram, target: &PhoneSeq) -> Result<(f64, Vec<f64>)> {
    let t_len = logp.frames();
    let blank = logp.blank();
    target.validate(logp.labels() - 1)?;
    check_feasible(t_len, target)?;

    let ext = extend_target(target, blank);
    let s_len = ext.len();
    let neg = f64::NEG_INFINITY;

    // alpha[t][s]: log prob of prefix paths ending in state s at t,
    // including the emission at t.
    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = logp.logp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = logp.logp(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut best = prev[s];
            if s >= 1 {
                best = log_sum_exp2(best, prev[s - 1]);
            }
            if can_skip(&ext, s, blank) {
                best = log_sum_exp2(best, prev[s - 2]);
            }
            cur[s] = if best == neg { neg } else { best + logp.logp(t, ext[s]) };
        }
    }
    let total = log_sum_exp2(
        alpha[(t_len - 1) * s_len + s_len - 1],
        if s_len > 1 { alpha[(t_len - 1) * s_len + s_len - 2] } else { neg },
    );
    if total == neg {
        // feasibility pre-check should have caught this
        return Err(Error::InfeasibleTarget {
            frames: t_len,
            target_len: target.len(),
            repeats: count_adjacent_repeats(target),
        });
    }

    // beta[t][s]: log prob of completing from state s after frame t
    // (emissions t+1..T only).
    let mut beta = vec![neg; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s] + logp.logp(t + 1, ext[s]);
            if s + 1 < s_len {
                acc = log_sum_exp2(acc, beta[(t + 1) * s_len + s + 1] + logp.logp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && can_skip(&ext, s + 2, blank) {
                acc = log_sum_exp2(acc, beta[(t + 1) * s_len + s + 2] + logp.logp(t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = acc;
        }
    }

    // dLoss/dlogp(t,c) = -sum_{s: ext[s]=c} exp(alpha[t][s] + beta[t][s] - logP)
    let labels = logp.labels();
    let mut grad = vec![0.0; t_len * labels];
    for t in 0..t_len {
        for (s, &lab) in ext.iter().enumerate() {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab != neg {
                grad[t * labels + lab as usize] -= (ab - total).exp();
            }
        }
    }
    Ok((-total, grad))
}

/// The single most probable frame labeling whose collapse equals `target`
/// (Viterbi over the blank-extended lattice).
///
/// Ties resolve toward emitting phones at the earliest possible frames and
/// leaving them for blank as soon as possible, which makes dataset-wide
/// alignment reproducible.
pub fn forced_align(logp: &LogPosteriorgram, target: &PhoneSeq) -> Result<LabelSeq> {
    let t_len = logp.frames();
    let blank = logp.blank();
    target.validate(logp.labels() - 1)?;
    check_feasible(t_len, target)?;

    let ext = extend_target(target, blank);
    let s_len = ext.len();
    let neg = f64::NEG_INFINITY;

    let mut score = vec![neg; t_len * s_len];
    let mut back = vec![0u8; t_len * s_len]; // steps back in state index (0, 1, 2)
    score[0] = logp.logp(0, ext[0]);
    if s_len > 1 {
        score[1] = logp.logp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            // among equal scores prefer the furthest-advanced predecessor
            let mut best = neg;
            let mut step = 0u8;
            let stay = score[(t - 1) * s_len + s];
            if stay > best {
                best = stay;
                step = 0;
            }
            if s >= 1 {
                let adv = score[(t - 1) * s_len + s - 1];
                if adv > best {
                    best = adv;
                    step = 1;
                }
            }
            if can_skip(&ext, s, blank) {
                let skip = score[(t - 1) * s_len + s - 2];
                if skip > best {
                    best = skip;
                    step = 2;
                }
            }
            score[t * s_len + s] = if best == neg { neg } else { best + logp.logp(t, ext[s]) };
            back[t * s_len + s] = step;
        }
    }

    let last_blank = score[(t_len - 1) * s_len + s_len - 1];
    let last_phone = if s_len > 1 { score[(t_len - 1) * s_len + s_len - 2] } else { neg };
    // ties prefer the final blank state (the phone was left earlier)
    let mut s = if last_blank >= last_phone { s_len - 1 } else { s_len - 2 };
    if score[(t_len - 1) * s_len + s] == neg {
        return Err(Error::InfeasibleTarget {
            frames: t_len,
            target_len: target.len(),
            repeats: count_adjacent_repeats(target),
        });
    }

    let mut path = vec![0u32; t_len];
    for t in (0..t_len).rev() {
        path[t] = ext[s];
        if t > 0 {
            s -= back[t * s_len + s] as usize;
        }
    }
    Ok(path)
}

/// Log probability of one explicit frame labeling under the posteriorgram.
pub fn path_log_prob(logp: &LogPosteriorgram, path: &[u32]) -> f64 {
    path.iter()
        .enumerate()
        .map(|(t, &l)| logp.logp(t, l))
        .sum()
}
