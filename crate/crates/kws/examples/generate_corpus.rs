//! Generate a miniature synthetic corpus and peek at what came out.
//!
//! Writes the same layout the CLI's gen-data subcommand produces: train and
//! test splits with feature files and manifests, keyword and command lists,
//! a lexicon, and fine-tuning/negative audio for the command stages.

use kws::datagen::{generate, GenConfig};
use kws::io::manifest::CorpusManifest;

fn main() -> kws::Result<()> {
    let dir = std::env::temp_dir().join("kws_example_corpus");
    let config = GenConfig {
        train_utterances: 40,
        test_utterances: 10,
        lexicon_words: 60,
        keywords: 6,
        commands: 3,
        command_train_positives: 8,
        command_train_negatives: 12,
        command_test_positives: 4,
        negative_seconds: 120.0,
        ..GenConfig::default()
    };
    let summary = generate(&config, &dir, 7)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);

    let manifest = CorpusManifest::load(&dir.join("train/manifest.json"))?;
    let entry = &manifest.entries[0];
    println!(
        "\nfirst train utterance: id={} phones={:?} keywords={:?}",
        entry.id, entry.phones, entry.keywords
    );

    let keywords = std::fs::read_to_string(dir.join("keywords.tsv"))?;
    println!("\nkeywords.tsv:\n{keywords}");
    println!("corpus written to {}", dir.display());
    Ok(())
}
