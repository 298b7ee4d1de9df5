mod commands;
mod inputs;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use contrastdef::data::{DatasetFormat, DataError, TargetOccurrence};
use contrastdef::decode::DecodeError;
use contrastdef::experiments::AblationAxis;
use contrastdef::model::ModelError;
use contrastdef::objectives::ObjectiveError;
use contrastdef::training::TrainError;

/// Generate dictionary definitions for words in context, with contrastive
/// alignment of encoder and decoder representations.
#[derive(Parser, Debug)]
#[command(name = "contrastdef", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenize and validate a dataset; write split caches, a vocabulary
    /// and a run-config template.
    Prepare(PrepareArgs),
    /// Train stage one, stage two, or the one-stage baseline.
    Train(TrainArgs),
    /// Sweep one ablation axis over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and of the full loss.
    Gradcheck(GradcheckArgs),
    /// Decode definitions for `word \t context` lines.
    Generate(GenerateArgs),
    /// Decode a labelled split and report BLEU and NIST.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// A dataset file (split 80/10/10) or a directory holding
    /// train/valid/test files.
    #[arg(long, required_unless_present = "demo_data", conflicts_with = "demo_data")]
    data: Option<PathBuf>,
    /// Use the bundled synthetic demo corpus.
    #[arg(long)]
    demo_data: bool,
    /// Input format; inferred from the extension when omitted.
    #[arg(long, value_parser = parse_format)]
    format: Option<DatasetFormat>,
    /// Fail on the first bad record instead of skipping it.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    #[arg(long, default_value_t = 30_000)]
    max_vocab: usize,
    /// Seed of the split assignment when `--data` is a single file.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Stage thresholds for the config template: demo, wordnet, oxford or urban.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "one-shot")]
    OneShot,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Checkpoint to start from. Required for stage 2.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sum the contrastive loss over the batch instead of averaging it.
    #[arg(long)]
    literal_sum: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_parser = parse_axis)]
    axis: AblationAxis,
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Sum the contrastive loss over the batch instead of averaging it.
    #[arg(long)]
    literal_sum: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Run config whose `model` section is used for the full-loss check;
    /// the one-layer toy model when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Maximum relative error for op-level checks.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Maximum relative error for the full-model check.
    #[arg(long, default_value_t = 1e-4)]
    loss_tolerance: f64,
    /// Parameter coordinates sampled in the full-model check.
    #[arg(long, default_value_t = 256)]
    coords: usize,
    /// Deliberately scale matmul gradients so the check must fail.
    #[arg(long)]
    corrupt_gradients: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input file, or `-` for standard input.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_format)]
    format: Option<DatasetFormat>,
    /// Beam width; greedy decoding when omitted.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    #[arg(long, value_parser = parse_occurrence, default_value = "context")]
    target_occurrence: TargetOccurrence,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_format(s: &str) -> Result<DatasetFormat, String> {
    s.parse()
}

fn parse_axis(s: &str) -> Result<AblationAxis, String> {
    s.parse()
}

fn parse_occurrence(s: &str) -> Result<TargetOccurrence, String> {
    match s {
        "context" => Ok(TargetOccurrence::Context),
        "word-prefix" | "word_prefix" => Ok(TargetOccurrence::WordPrefix),
        other => Err(format!("unknown target occurrence {other:?} (context or word-prefix)")),
    }
}

/// A problem with what the user supplied: arguments, files or configs.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// A failed check: gradient check or ablation arm.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Numerics(_) => 1,
        _ => 2,
    }
}

fn objective_code(e: &ObjectiveError) -> u8 {
    match e {
        ObjectiveError::Model(m) => model_code(m),
        ObjectiveError::Numerics(_) => 1,
        ObjectiveError::LambdaOutOfRange(_) | ObjectiveError::InvalidTemperature(_) => 2,
    }
}

fn decode_code(e: &DecodeError) -> u8 {
    match e {
        DecodeError::Model(m) => model_code(m),
        DecodeError::Numerics(_) => 1,
        _ => 2,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::DivergedLoss { .. } | TrainError::NonFiniteGradient { .. } => 1,
        TrainError::Objective(o) => objective_code(o),
        TrainError::Decode(d) => decode_code(d),
        _ => 2,
    }
}

/// 2 for bad input, 1 for failures during a run.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<CheckFailed>() {
            return 1;
        }
        if cause.is::<InputError>()
            || cause.is::<DataError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
        {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return train_code(e);
        }
        if let Some(e) = cause.downcast_ref::<DecodeError>() {
            return decode_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ObjectiveError>() {
            return objective_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_code(e);
        }
    }
    1
}

fn main() -> ExitCode {
    manifest::mark_start();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        let code = |e: anyhow::Error| exit_code(&e);
        assert_eq!(code(InputError("x".into()).into()), 2);
        assert_eq!(code(CheckFailed("x".into()).into()), 1);
        assert_eq!(code(TrainError::ConfigMismatch("x".into()).into()), 2);
        assert_eq!(code(TrainError::DivergedLoss { epoch: 1, step: 2 }.into()), 1);
        assert_eq!(code(TrainError::Decode(DecodeError::EmptyHypothesisSet).into()), 2);
        assert_eq!(code(DataError::EmptyCorpus.into()), 2);
        let nested = anyhow::Error::from(TrainError::CorruptCheckpoint("bad".into())).context("loading x");
        assert_eq!(code(nested), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
