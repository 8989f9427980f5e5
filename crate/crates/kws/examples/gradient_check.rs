//! Numerical gradient check of the bottom convolution layer.
//!
//! Perturbs a handful of kernel weights with central differences and
//! compares against the analytic backward pass. The integration tests run
//! the same check across every layer; this is the single-layer version to
//! read alongside the backward code.

use kws::nn::{conv1d_backward, Conv1dLayer};
use kws::tensor::FeatureSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_seq<R: Rng>(frames: usize, dim: usize, rng: &mut R) -> FeatureSequence {
    let data = (0..frames * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureSequence::from_vec(frames, dim, data).expect("shape matches data")
}

fn loss(layer: &Conv1dLayer, input: &FeatureSequence, probe: &[f64]) -> f64 {
    let out = layer.forward(input).expect("forward");
    out.data().iter().zip(probe).map(|(y, p)| y * p).sum()
}

fn main() -> kws::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (kernel, in_dim, channels, frames) = (5, 3, 4, 9);
    let mut layer = Conv1dLayer::new(kernel, in_dim, channels, &mut rng);
    let input = random_seq(frames, in_dim, &mut rng);

    // Random linear probe so every output influences the scalar loss.
    let out_frames = frames - kernel + 1;
    let probe: Vec<f64> = (0..out_frames * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let upstream = FeatureSequence::from_vec(out_frames, channels, probe.clone())?;
    let (dkernel, _, _) = conv1d_backward(layer.params.get("kernel"), &input, &upstream, false);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for check in 0..10 {
        let i = rng.gen_range(0..dkernel.len());
        let analytic = dkernel.data()[i];
        let orig = layer.params.get("kernel").data()[i];

        layer.params.get_mut("kernel").data_mut()[i] = orig + h;
        let up = loss(&layer, &input, &probe);
        layer.params.get_mut("kernel").data_mut()[i] = orig - h;
        let down = loss(&layer, &input, &probe);
        layer.params.get_mut("kernel").data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-3);
        worst = worst.max(rel);
        println!("weight {check}: analytic {analytic:+.8} numeric {numeric:+.8} rel err {rel:.2e}");
    }
    println!("\nworst relative error: {worst:.2e} (tolerance 1e-3)");
    assert!(worst < 1e-3);
    Ok(())
}
