//! Shared helpers for the integration suites: central finite differences
//! against analytical gradients.

use kws::tensor::{FeatureSequence, LayerParams};
use rand::Rng;

pub const H: f64 = 1e-5;

/// Relative error with a floor so near-zero gradient pairs compare in
/// absolute terms instead of amplifying float noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-3)
}

pub fn sampled_indices(len: usize, max: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, max).into_vec()
    }
}

/// Central-difference check of every (sampled) parameter element of a layer
/// against the analytic gradients. `params` is a plain fn so the helper can
/// alternate mutable access with read-only loss evaluations.
pub fn check_params<S>(
    subject: &mut S,
    params: fn(&mut S) -> &mut LayerParams,
    analytic: &LayerParams,
    loss: impl Fn(&S) -> f64,
    max_per_tensor: usize,
    rng: &mut impl Rng,
) -> f64 {
    let names: Vec<String> = params(subject)
        .iter()
        .map(|(n, _)| n.to_string())
        .collect();
    let mut worst = 0.0f64;
    for name in &names {
        let len = params(subject).get(name).len();
        for i in sampled_indices(len, max_per_tensor, rng) {
            let orig = params(subject).get(name).data()[i];
            params(subject).get_mut(name).data_mut()[i] = orig + H;
            let fp = loss(&*subject);
            params(subject).get_mut(name).data_mut()[i] = orig - H;
            let fm = loss(&*subject);
            params(subject).get_mut(name).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            worst = worst.max(rel_err(analytic.get(name).data()[i], numeric));
        }
    }
    worst
}

/// Same check for gradients with respect to an input sequence.
pub fn check_input(
    input: &mut FeatureSequence,
    analytic: &FeatureSequence,
    loss: impl Fn(&FeatureSequence) -> f64,
    max_elems: usize,
    rng: &mut impl Rng,
) -> f64 {
    let len = input.data().len();
    let mut worst = 0.0f64;
    for i in sampled_indices(len, max_elems, rng) {
        let orig = input.data()[i];
        input.data_mut()[i] = orig + H;
        let fp = loss(&*input);
        input.data_mut()[i] = orig - H;
        let fm = loss(&*input);
        input.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * H);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

/// A fixed random projection so scalar losses exercise every output element
/// with distinct weights.
pub fn projection(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}
