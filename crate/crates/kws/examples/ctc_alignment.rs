//! CTC loss and forced alignment on a hand-made posteriorgram.
//!
//! Builds a 7-frame, 3-phone-plus-blank posteriorgram that clearly favors
//! the target "0 1 0", then prints the loss, the Viterbi path, and what the
//! path collapses back to.

use kws::ctc::{collapse, ctc_loss, forced_align, path_log_prob, LogPosteriorgram};
use kws::tensor::PhoneSeq;

fn main() -> kws::Result<()> {
    let labels = 4; // phones 0..=2 plus blank 3
    let frames = 7;
    // Rows roughly spell out: 0 0 blank 1 1 blank 0.
    #[rustfmt::skip]
    let probs = vec![
        0.85, 0.05, 0.05, 0.05,
        0.70, 0.10, 0.10, 0.10,
        0.10, 0.20, 0.10, 0.60,
        0.05, 0.80, 0.05, 0.10,
        0.10, 0.75, 0.05, 0.10,
        0.10, 0.10, 0.10, 0.70,
        0.75, 0.10, 0.05, 0.10,
    ];
    let pg = LogPosteriorgram::from_probs(frames, labels, &probs)?;
    let target = PhoneSeq(vec![0, 1, 0]);

    let (loss, grad) = ctc_loss(&pg, &target)?;
    println!("target          {:?}", target.as_slice());
    println!("ctc loss        {loss:.6} nats ({} grad entries)", grad.len());

    let path = forced_align(&pg, &target)?;
    println!("aligned path    {path:?} (blank = {})", pg.blank());
    println!("path collapses  {:?}", collapse(&path, pg.blank()).as_slice());
    println!("path log prob   {:.6}", path_log_prob(&pg, &path));

    // The same lattice rejects targets that cannot fit in 7 frames.
    let too_long = PhoneSeq(vec![0, 1, 0, 1, 0, 1, 0, 1]);
    match ctc_loss(&pg, &too_long) {
        Err(e) => println!("8 phones in 7 frames: {e}"),
        Ok(_) => unreachable!("target longer than the lattice"),
    }
    Ok(())
}
