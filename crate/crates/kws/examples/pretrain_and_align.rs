//! Pretrain the acoustic stack with CTC on a small corpus, then force-align.
//!
//! Shows the blank-collapse plateau breaking once the optimizer has seen a
//! few hundred updates, and compares one utterance's forced alignment with
//! its true transcript.

use kws::acoustic::{greedy_decode, phone_error_rate, pretrain_ctc, PretrainConfig};
use kws::ctc::{collapse, forced_align};
use kws::datagen::{in_memory_corpus, GenConfig};
use kws::io::model::ModelConfig;
use kws::tensor::PhoneSeq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> kws::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gen = GenConfig::default();
    let data: Vec<(kws::tensor::FeatureSequence, PhoneSeq)> = in_memory_corpus(&gen, 300, 3);
    let model = ModelConfig::desk_scale();

    // CTC sits on a blank-collapse plateau for the first few hundred
    // updates; the epoch count is chosen so this small corpus gets past it.
    let pt = PretrainConfig {
        epochs: 30,
        lr: 3e-3,
        batch: 8,
    };
    let (stack, losses) = pretrain_ctc(&model.acoustic, &data, &pt, &mut rng)?;
    for (e, l) in losses.iter().enumerate() {
        if e % 10 == 0 || e + 1 == losses.len() {
            println!("epoch {e:>3}: {l:.4} nats/frame");
        }
    }

    let per = phone_error_rate(&stack, &data)?;
    println!("\ntrain phone error rate: {:.1}%", 100.0 * per);

    let (feats, truth) = &data[0];
    let pg = stack.phone_posteriors(feats)?;
    let path = forced_align(&pg, truth)?;
    println!("\ntrue phones     {:?}", truth.as_slice());
    println!("aligned path    {:?} (first 40 frames)", &path[..path.len().min(40)]);
    println!("path collapses  {:?}", collapse(&path, pg.blank()).as_slice());
    println!("greedy decode   {:?}", greedy_decode(&pg).as_slice());
    Ok(())
}
