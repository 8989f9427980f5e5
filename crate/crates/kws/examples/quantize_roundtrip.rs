//! 8-bit quantization: round-trip error bound and its effect on detection.
//!
//! Quantizes a random filter bank, verifies the per-element error stays
//! under scale/2, and runs float and quantized filters over the same
//! features to count event disagreements.

use kws::keyword::{detect, FilterBank, KeywordFilter, KeywordSpec};
use kws::quant::{dequantize, quantize, round_trip_error};
use kws::tensor::{FeatureSequence, PhoneSeq, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> kws::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (kt, channels) = (12, 32);

    let mut float_bank = FilterBank::new();
    let mut quant_bank = FilterBank::new();
    for k in 0..5 {
        let data: Vec<f64> = (0..kt * channels).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let base = Tensor::from_vec(&[kt, channels], data)?;
        let q = quantize(&base);
        let err = round_trip_error(&base, &q);
        println!(
            "filter {k}: scale {:.6} max round-trip err {:.6} (bound {:.6})",
            q.scale,
            err,
            q.scale / 2.0
        );
        assert!(err <= q.scale / 2.0 + 1e-12);

        let spec = KeywordSpec {
            name: format!("kw{k}"),
            phones: PhoneSeq(vec![k as u32, (k as u32 + 1) % 8, 3]),
        };
        float_bank.push(spec.clone(), KeywordFilter::from_base(base))?;
        quant_bank.push(spec, KeywordFilter::from_base(dequantize(&q)))?;
    }

    // Pooled-feature stand-in: what the acoustic stack would hand the bank.
    let frames = 400;
    let data: Vec<f64> = (0..frames * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let feats = FeatureSequence::from_vec(frames, channels, data)?;

    let (tau, hangover) = (0.5, 10);
    let float_events = detect(&float_bank, &feats, tau, hangover)?;
    let quant_events = detect(&quant_bank, &feats, tau, hangover)?;

    let agree = float_events
        .iter()
        .filter(|e| {
            quant_events
                .iter()
                .any(|q| q.keyword == e.keyword && q.frame.abs_diff(e.frame) <= 1)
        })
        .count();
    println!("\nfloat events {} quantized events {}", float_events.len(), quant_events.len());
    if !float_events.is_empty() {
        println!(
            "agreement within one frame: {:.1}%",
            100.0 * agree as f64 / float_events.len() as f64
        );
    }
    Ok(())
}
