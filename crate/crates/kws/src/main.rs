//! `kws` command line: the full pipeline from corpus synthesis to filter
//! analysis. Errors print one machine-parsable line on stderr
//! (`error kind=<kind>: <message>`) and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kws::pipeline::{self, PipelineConfig};

#[derive(Parser)]
#[command(name = "kws", about = "open-vocabulary keyword spotting pipeline", version)]
struct Cli {
    /// JSON pipeline config; missing fields take desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArg {
    /// Trained model file (.kwsm).
    #[arg(long)]
    model: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a corpus (train/test/lexicon/keywords/commands).
    GenData {
        /// Output directory for the corpus tree.
        #[arg(long)]
        out: PathBuf,
    },
    /// CTC-pretrain the acoustic encoder on a corpus manifest.
    Pretrain {
        /// Corpus manifest (manifest.json).
        #[arg(long)]
        corpus: PathBuf,
        /// Where to write the pretrained model.
        #[arg(long)]
        out: PathBuf,
    },
    /// Forced-align a corpus with a pretrained model.
    Align {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        corpus: PathBuf,
        /// Output alignments (JSONL, one record per utterance).
        #[arg(long)]
        out: PathBuf,
    },
    /// Jointly train the keyword encoder and detector input layer.
    Train {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        corpus: PathBuf,
        /// Alignments from `kws align`.
        #[arg(long)]
        alignments: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile a keyword list into the model's filter bank.
    Compile {
        #[command(flatten)]
        model: ModelArg,
        /// Keyword list: `name<TAB>phone phone ...` or bare lexicon words.
        #[arg(long)]
        keywords: PathBuf,
        /// Lexicon for resolving bare words.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Store filters and acoustic weights as 8-bit.
        #[arg(long)]
        quantize: bool,
        /// Drop the encoder section for deployment-size models.
        #[arg(long)]
        strip_encoder: bool,
    },
    /// Run detection over feature files and emit detection records.
    Detect {
        #[command(flatten)]
        model: ModelArg,
        /// A .kwsf file, a corpus directory, or a directory of .kwsf files.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Posterior threshold; defaults to the config value.
        #[arg(long)]
        threshold: Option<f64>,
        /// Suppression window in output frames; defaults to the config value.
        #[arg(long)]
        hangover: Option<usize>,
    },
    /// Learn per-keyword residual filters from enrollment data.
    Finetune {
        #[command(flatten)]
        model: ModelArg,
        /// Enrollment corpus manifest with keyword labels.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect over a labeled corpus and report metrics.
    Eval {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        corpus: PathBuf,
        /// Reference labels (JSONL of utterance -> keywords).
        #[arg(long)]
        refs: PathBuf,
        /// Metric report output (JSON).
        #[arg(long)]
        report: PathBuf,
        /// Optional FRR / FA-per-hour sweep as CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Inspect filter geometry: nearest words and pairwise distances.
    Analyze {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        keywords: PathBuf,
        /// Report output (JSON); printed to stdout regardless.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Neighbors listed per keyword.
        #[arg(long)]
        top_n: Option<usize>,
    },
}

fn run(cli: Cli) -> kws::Result<()> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::GenData { out } => {
            let summary = pipeline::gen_data(&config, &out, cli.seed)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Pretrain { corpus, out } => {
            let summary = pipeline::pretrain(&config, &corpus, &out, cli.seed)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Align { model, corpus, out } => {
            let summary = pipeline::align(&model.model, &corpus, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Train {
            model,
            corpus,
            alignments,
            out,
        } => {
            let stats = pipeline::train(&config, &model.model, &corpus, &alignments, &out, cli.seed)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Compile {
            model,
            keywords,
            lexicon,
            out,
            quantize,
            strip_encoder,
        } => {
            let summary = pipeline::compile(
                &model.model,
                &keywords,
                lexicon.as_deref(),
                &out,
                quantize,
                strip_encoder,
            )?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Detect {
            model,
            features,
            out,
            threshold,
            hangover,
        } => {
            let tau = threshold.unwrap_or(config.tau);
            let hang = hangover.unwrap_or(config.hangover);
            let summary = pipeline::run_detect(&model.model, &features, tau, hang, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Finetune { model, data, out } => {
            let stats = pipeline::run_finetune(&config, &model.model, &data, &out, cli.seed)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Eval {
            model,
            corpus,
            refs,
            report,
            curve,
        } => {
            let metrics = pipeline::evaluate(
                &config,
                &model.model,
                &corpus,
                &refs,
                &report,
                curve.as_deref(),
            )?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Analyze {
            model,
            lexicon,
            keywords,
            out,
            top_n,
        } => {
            let report = pipeline::analyze(
                &model.model,
                &lexicon,
                &keywords,
                top_n.unwrap_or(config.top_n),
                out.as_deref(),
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={}: {}", e.kind(), e);
            ExitCode::FAILURE
        }
    }
}
