//! Exhaustive-enumeration oracle for the CTC lattice code. For every frame
//! count T <= 6, phone inventory P <= 4 and target length <= 3, the loss
//! must match the sum over all (P+1)^T frame labelings that collapse to the
//! target, and the aligned path must score exactly as well as the best of
//! those labelings.

use kws::ctc::{collapse, ctc_loss, forced_align, path_log_prob, LogPosteriorgram};
use kws::tensor::PhoneSeq;
use kws::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_posteriorgram(frames: usize, labels: usize, rng: &mut impl Rng) -> LogPosteriorgram {
    let mut probs = Vec::with_capacity(frames * labels);
    for _ in 0..frames {
        let raw: Vec<f64> = (0..labels).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|v| v / z));
    }
    LogPosteriorgram::from_probs(frames, labels, &probs).unwrap()
}

/// log(sum over all labelings collapsing to `target`), plus the best single
/// labeling's log probability; None when no labeling collapses to it.
fn brute_force(
    pg: &LogPosteriorgram,
    target: &PhoneSeq,
) -> Option<(f64, f64)> {
    let frames = pg.frames();
    let labels = pg.labels() as u32;
    let blank = pg.blank();
    let mut total: Option<f64> = None;
    let mut best = f64::NEG_INFINITY;
    let count = (labels as usize).pow(frames as u32);
    for code in 0..count {
        let mut c = code;
        let mut path = Vec::with_capacity(frames);
        for _ in 0..frames {
            path.push((c % labels as usize) as u32);
            c /= labels as usize;
        }
        if collapse(&path, blank) != *target {
            continue;
        }
        let lp = path_log_prob(pg, &path);
        best = best.max(lp);
        total = Some(match total {
            None => lp,
            Some(acc) => {
                let m = acc.max(lp);
                m + ((acc - m).exp() + (lp - m).exp()).ln()
            }
        });
    }
    total.map(|t| (t, best))
}

#[test]
fn loss_and_alignment_match_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0usize;
    for frames in 1..=6usize {
        for phones in 1..=4usize {
            let labels = phones + 1;
            for target_len in 0..=3usize {
                for _ in 0..3 {
                    let target = PhoneSeq(
                        (0..target_len)
                            .map(|_| rng.gen_range(0..phones as u32))
                            .collect(),
                    );
                    let pg = random_posteriorgram(frames, labels, &mut rng);
                    let oracle = brute_force(&pg, &target);
                    match (ctc_loss(&pg, &target), oracle) {
                        (Ok((loss, _)), Some((log_total, log_best))) => {
                            assert!(
                                (loss - (-log_total)).abs() < 1e-8,
                                "loss {loss} vs oracle {} (T={frames} P={phones} target={:?})",
                                -log_total,
                                target
                            );
                            let path = forced_align(&pg, &target).unwrap();
                            assert_eq!(collapse(&path, pg.blank()), target);
                            assert!(
                                (path_log_prob(&pg, &path) - log_best).abs() < 1e-12,
                                "viterbi path prob mismatch (T={frames} P={phones} target={:?})",
                                target
                            );
                            checked += 1;
                        }
                        (Err(Error::InfeasibleTarget { .. }), None) => {
                            assert!(matches!(
                                forced_align(&pg, &target),
                                Err(Error::InfeasibleTarget { .. })
                            ));
                            checked += 1;
                        }
                        (got, oracle) => panic!(
                            "implementation and oracle disagree on feasibility: \
                             got {:?}, oracle feasible={} (T={frames} P={phones} target={:?})",
                            got.map(|(l, _)| l),
                            oracle.is_some(),
                            target
                        ),
                    }
                }
            }
        }
    }
    assert!(checked >= 250, "grid too small: {checked}");
}

#[test]
fn gradient_matches_enumeration_posteriors() {
    // dloss/dlogp(t, c) must equal minus the posterior probability that a
    // path emits label c at frame t, computed by enumeration.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let frames = rng.gen_range(2..=5usize);
        let phones = rng.gen_range(1..=3usize);
        let labels = phones + 1;
        let target_len = rng.gen_range(1..=2usize).min(frames);
        let target = PhoneSeq(
            (0..target_len)
                .map(|_| rng.gen_range(0..phones as u32))
                .collect(),
        );
        let pg = random_posteriorgram(frames, labels, &mut rng);
        let Ok((_, dlogp)) = ctc_loss(&pg, &target) else {
            continue;
        };

        // enumerate: gamma[t][c] = P(paths through (t,c) | collapse = target)
        let blank = pg.blank();
        let count = labels.pow(frames as u32);
        let mut mass = vec![0.0f64; frames * labels];
        let mut total = 0.0f64;
        for code in 0..count {
            let mut c = code;
            let mut path = Vec::with_capacity(frames);
            for _ in 0..frames {
                path.push((c % labels) as u32);
                c /= labels;
            }
            if collapse(&path, blank) != target {
                continue;
            }
            let p = path_log_prob(&pg, &path).exp();
            total += p;
            for (t, &lab) in path.iter().enumerate() {
                mass[t * labels + lab as usize] += p;
            }
        }
        for t in 0..frames {
            for c in 0..labels {
                let gamma = mass[t * labels + c] / total;
                let got = dlogp[t * labels + c];
                assert!(
                    (got + gamma).abs() < 1e-8,
                    "dlogp[{t},{c}] = {got}, oracle gamma = {gamma}"
                );
            }
        }
    }
}
