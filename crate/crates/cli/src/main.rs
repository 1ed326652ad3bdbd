use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crfasn_core::autodiff::GradCheckOptions;
use crfasn_core::corpus::{generate_synthetic, parse_jsonl, write_jsonl, Conversation, SyntheticSpec, Utterance};
use crfasn_core::crf::{Decoder, DecoderRegistry};
use crfasn_core::eval::{confusion, export_attention};
use crfasn_core::model::CrfAsn;
use crfasn_core::oracle::{chain_oracle, selection_oracle, toy_gradient_check};
use crfasn_core::train::{predict_all, train_loop, TrainConfig};
use crfasn_core::Error;

#[derive(Parser)]
#[command(name = "crfasn", version, about = "Dialogue act tagging with a CRF-attentive structured network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its best checkpoint and epoch history.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled corpus and write a JSON report.
    Eval(DecodeArgs),
    /// Label every utterance of a corpus.
    Predict(DecodeArgs),
    /// Generate a synthetic corpus and the model that produced it.
    GenSynthetic(GenArgs),
    /// Finite-difference check of the training loss on a toy model.
    Gradcheck(SeedArgs),
    /// Write marginals and attention weights per conversation as JSONL.
    ExportAttn(DecodeArgs),
    /// Compare the CRF dynamic programs against brute-force enumeration.
    OracleCheck(OracleArgs),
}

#[derive(Args)]
struct SeedArgs {
    /// Seed for every random draw; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Key-value config file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Where the best checkpoint is written.
    #[arg(long)]
    checkpoint: PathBuf,
    /// History JSONL; defaults to `<checkpoint>.history.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArgs,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input corpus.
    #[arg(long)]
    test: PathBuf,
    /// Output file; eval writes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config whose `decoder` key picks the decoding strategy.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Decoding strategy by name; overrides the config.
    #[arg(long)]
    decoder: Option<String>,
}

#[derive(Args)]
struct GenArgs {
    /// Generator spec file.
    #[arg(long)]
    spec: PathBuf,
    /// Corpus JSONL; the generator is written next to it as `<out>.generator.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 6)]
    max_n: usize,
    #[arg(long, default_value_t = 4)]
    max_labels: usize,
    #[command(flatten)]
    seed: SeedArgs,
}

const DEFAULT_SEED: u64 = 42;

enum Failure {
    /// Bad invocation or unreadable input: exit 1.
    Usage(String),
    /// Invalid data or a failed check: exit 2.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::UnknownStrategy { .. } => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn write_lines<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<(), Failure> {
    let mut w = create(path)?;
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Failure::Check(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| io_failure(path, e))?;
    }
    w.flush().map_err(|e| io_failure(path, e))
}

fn decoder(args: &DecodeArgs) -> Result<std::sync::Arc<dyn Decoder>, Failure> {
    let name = match (&args.decoder, &args.config) {
        (Some(name), _) => name.clone(),
        (None, Some(path)) => TrainConfig::load(path)?.decoder,
        (None, None) => TrainConfig::default().decoder,
    };
    Ok(DecoderRegistry::default().get(&name)?)
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed.seed {
        config.seed = seed;
    }
    let train = parse_jsonl(&args.train)?;
    let valid = parse_jsonl(&args.valid)?;
    let outcome = train_loop(&train, &valid, &config, Some(&args.checkpoint), |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val acc {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.val_accuracy, r.seconds
        );
    })?;
    let history = args
        .out
        .unwrap_or_else(|| PathBuf::from(format!("{}.history.jsonl", args.checkpoint.display())));
    write_lines(&history, &outcome.history)?;
    eprintln!(
        "best epoch {} with validation accuracy {:.4}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_accuracy,
        args.checkpoint.display()
    );
    Ok(())
}

fn labeled(model: &CrfAsn, convs: &[Conversation], dec: &dyn Decoder) -> Result<Vec<Conversation>, Failure> {
    let idx = convs.iter().map(|c| model.index(c)).collect::<Result<Vec<_>, _>>()?;
    let preds = predict_all(model, &model.params, &idx, dec)?;
    let mut out = Vec::with_capacity(convs.len());
    for (conv, path) in convs.iter().zip(preds) {
        let utts = conv
            .utterances
            .iter()
            .zip(path)
            .map(|(u, y)| Utterance::new(&u.speaker, u.tokens.clone(), model.vocab.acts.symbol(y).map(str::to_string)))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(Conversation::new(&conv.id, utts)?);
    }
    Ok(out)
}

fn eval(args: DecodeArgs) -> Result<(), Failure> {
    let dec = decoder(&args)?;
    let model = CrfAsn::load(&args.checkpoint)?;
    let convs = parse_jsonl(&args.test)?;
    let idx = convs
        .iter()
        .map(|c| model.vocab.index(c, true))
        .collect::<Result<Vec<_>, _>>()?;
    let preds = predict_all(&model, &model.params, &idx, dec.as_ref())?;
    let golds: Vec<Vec<usize>> = idx.iter().map(|c| c.labels.clone().unwrap_or_default()).collect();
    let ids: Vec<String> = idx.iter().map(|c| c.id.clone()).collect();
    let report = confusion(&preds, &golds, model.vocab.acts.symbols(), Some(&ids))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Check(e.to_string()))?;
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{json}").map_err(|e| io_failure(path, e))?;
            w.flush().map_err(|e| io_failure(path, e))?;
        }
        None => println!("{json}"),
    }
    eprintln!("accuracy {:.4} over {} utterances", report.accuracy, report.total_utterances);
    Ok(())
}

fn required_out(args: &DecodeArgs) -> Result<&Path, Failure> {
    args.out
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out is required for this subcommand".into()))
}

fn predict(args: DecodeArgs) -> Result<(), Failure> {
    let out = required_out(&args)?;
    let dec = decoder(&args)?;
    let model = CrfAsn::load(&args.checkpoint)?;
    let convs = parse_jsonl(&args.test)?;
    write_jsonl(out, &labeled(&model, &convs, dec.as_ref())?)?;
    Ok(())
}

fn export_attn(args: DecodeArgs) -> Result<(), Failure> {
    let out = required_out(&args)?;
    let model = CrfAsn::load(&args.checkpoint)?;
    let convs = parse_jsonl(&args.test)?;
    let exports = convs
        .iter()
        .map(|c| export_attention(&model, &model.params, c))
        .collect::<Result<Vec<_>, _>>()?;
    write_lines(out, &exports)
}

fn gen_synthetic(args: GenArgs) -> Result<(), Failure> {
    let mut spec = SyntheticSpec::load(&args.spec)?;
    if let Some(seed) = args.seed.seed {
        spec.seed = seed;
    }
    let (convs, generator) = generate_synthetic(&spec)?;
    write_jsonl(&args.out, &convs)?;
    generator.save(Path::new(&format!("{}.generator.json", args.out.display())))?;
    eprintln!("wrote {} conversations to {}", convs.len(), args.out.display());
    Ok(())
}

fn gradcheck(args: SeedArgs) -> Result<(), Failure> {
    let report = toy_gradient_check(args.seed.unwrap_or(DEFAULT_SEED), &GradCheckOptions::default())?;
    println!("{report}");
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Check("gradient check failed".into()))
    }
}

fn oracle_check(args: OracleArgs) -> Result<(), Failure> {
    let seed = args.seed.seed.unwrap_or(DEFAULT_SEED);
    let chain = chain_oracle(args.trials, args.max_n, args.max_labels, seed, 1e-9)?;
    let selection = selection_oracle(args.trials, args.max_n, seed.wrapping_add(1), 1e-9)?;
    println!("{chain}");
    println!("{selection}");
    if chain.ok() && selection.ok() {
        Ok(())
    } else {
        Err(Failure::Check("oracle mismatch".into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ExportAttn(a) => export_attn(a),
        Command::OracleCheck(a) => oracle_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
