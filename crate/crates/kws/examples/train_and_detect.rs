//! The whole pipeline at miniature scale: generate, pretrain, align, train,
//! compile a keyword list, detect, and score the result.
//!
//! Mirrors what the CLI subcommands do, one library call per stage. Takes
//! around half a minute; the full desk-scale run lives in the README.

use kws::pipeline::{
    align, compile, evaluate, gen_data, pretrain, run_detect, train, PipelineConfig,
};

fn main() -> kws::Result<()> {
    let dir = std::env::temp_dir().join("kws_example_pipeline");
    let mut config = PipelineConfig::default();
    config.gen.train_utterances = 300;
    config.gen.test_utterances = 40;
    config.gen.lexicon_words = 80;
    config.gen.keywords = 8;
    config.gen.commands = 2;
    config.gen.command_train_positives = 5;
    config.gen.command_train_negatives = 10;
    config.gen.command_test_positives = 3;
    config.gen.negative_seconds = 60.0;
    config.pretrain.epochs = 30;
    config.train.epochs = 10;
    config.train.batch_size = 16;
    config.train.lr = 3e-3;
    config.tau = 0.3;

    let seed = 5;
    println!("== gen-data ==");
    let summary = gen_data(&config, &dir, seed)?;
    println!(
        "{} train / {} test utterances, {} keywords",
        summary.train_utterances, summary.test_utterances, summary.keywords
    );

    println!("== pretrain ==");
    let pt = pretrain(&config, &dir.join("train/manifest.json"), &dir.join("model.kwsm"), seed)?;
    println!(
        "ctc {:.3} -> {:.3} nats/frame, train PER {:.1}%",
        pt.epoch_losses[0],
        pt.epoch_losses.last().unwrap(),
        100.0 * pt.train_per
    );

    println!("== align ==");
    let al = align(&dir.join("model.kwsm"), &dir.join("train/manifest.json"), &dir.join("ali.jsonl"))?;
    println!("{}/{} utterances aligned", al.aligned, al.total);

    println!("== train ==");
    let stats = train(
        &config,
        &dir.join("model.kwsm"),
        &dir.join("train/manifest.json"),
        &dir.join("ali.jsonl"),
        &dir.join("trained.kwsm"),
        seed,
    )?;
    println!(
        "kws loss {:.3} -> {:.3} (window {} frames)",
        stats.epoch_losses[0],
        stats.epoch_losses.last().unwrap(),
        stats.window
    );

    println!("== compile ==");
    let comp = compile(
        &dir.join("trained.kwsm"),
        &dir.join("keywords.tsv"),
        None,
        &dir.join("compiled.kwsm"),
        false,
        false,
    )?;
    println!("{} keywords, {} weights each", comp.keywords, comp.weights_per_keyword);

    println!("== detect ==");
    let det = run_detect(
        &dir.join("compiled.kwsm"),
        &dir.join("test"),
        config.tau,
        config.hangover,
        &dir.join("detections.jsonl"),
    )?;
    println!("{} events over {} test utterances", det.events, det.utterances);

    println!("== eval ==");
    let report = evaluate(
        &config,
        &dir.join("compiled.kwsm"),
        &dir.join("test/manifest.json"),
        &dir.join("test/refs.jsonl"),
        &dir.join("report.json"),
        None,
    )?;
    println!(
        "precision {:.3} recall {:.3} f1 {:.3} exact {:.3}",
        report.precision, report.recall, report.f1, report.exact_rate
    );
    println!("\nartifacts in {}", dir.display());
    Ok(())
}
