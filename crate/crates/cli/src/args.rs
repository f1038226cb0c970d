use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use wordconf::{AggKind, FeatureKind, NormalizeFlags, PipelineOptions, Temperature};

#[derive(Debug, Parser)]
#[command(
    name = "wordconf",
    version,
    about = "Word-level confidence scoring for ASR posteriors"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (vocab.txt, records.jsonl, truth.jsonl).
    Gen(GenArgs),
    /// Write one JSON line of scores per hypothesis word.
    Score(ScoreArgs),
    /// Fit a calibration model on a labeled development set.
    Fit(FitArgs),
    /// Label words by alignment and report AUPRe, AUPRs, AUROC and WER.
    Eval(EvalArgs),
    /// Evaluate with the first N runs averaged, for several N.
    SweepDropout(SweepArgs),
    /// Error fraction per word length in tokens.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator config; explicit flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub utts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Number of perturbed runs per utterance.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Emit sparse top-k steps instead of dense ones.
    #[arg(long)]
    pub topk: Option<usize>,
    /// Ground-truth temperature of the injected miscalibration.
    #[arg(long)]
    pub sharpen: Option<f64>,
    #[arg(long)]
    pub run_noise: Option<f64>,
    #[arg(long)]
    pub token_error_rate: Option<f64>,
    #[arg(long)]
    pub length_error_slope: Option<f64>,
    #[arg(long)]
    pub mean_word_len: Option<f64>,
    #[arg(long)]
    pub min_words: Option<usize>,
    #[arg(long)]
    pub max_words: Option<usize>,
    /// Rate of -ln(peak probability) for tokens of correct words.
    #[arg(long)]
    pub peak_rate_correct: Option<f64>,
    /// Rate of -ln(peak probability) for tokens of erroneous words.
    #[arg(long)]
    pub peak_rate_error: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Utterance records, one JSON object per line.
    #[arg(long)]
    pub records: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Average the selected runs before scoring.
    #[arg(long, overrides_with = "no_combine")]
    pub combine: bool,
    /// Score a single run (the default).
    #[arg(long = "no-combine")]
    pub no_combine: bool,
    /// Comma-separated run indices to use.
    #[arg(long, value_delimiter = ',')]
    pub runs: Option<Vec<usize>>,
    /// Lowercase words before alignment.
    #[arg(long)]
    pub lowercase: bool,
    /// Trim ASCII punctuation from words before alignment.
    #[arg(long)]
    pub strip_punctuation: bool,
}

impl PipelineArgs {
    pub fn options(&self) -> Result<PipelineOptions, String> {
        let combine = self.combine && !self.no_combine;
        if let Some(runs) = &self.runs {
            if runs.is_empty() {
                return Err("--runs needs at least one index".into());
            }
            if !combine && runs.len() != 1 {
                return Err(format!(
                    "--runs lists {} runs; pass --combine to average them",
                    runs.len()
                ));
            }
        }
        Ok(PipelineOptions {
            combine,
            subset: self.runs.clone(),
        })
    }

    pub fn normalize(&self) -> NormalizeFlags {
        NormalizeFlags {
            lowercase: self.lowercase,
            strip_punctuation: self.strip_punctuation,
        }
    }
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// Token feature: log-proba or neg-entropy [default: log-proba].
    #[arg(long)]
    pub feature: Option<FeatureKind>,
    /// Word aggregation: sum, min or avg [default: sum].
    #[arg(long)]
    pub agg: Option<AggKind>,
    /// Temperature applied to every posterior before averaging.
    #[arg(long, value_parser = parse_temperature)]
    pub temperature: Option<Temperature>,
}

fn parse_temperature(s: &str) -> Result<Temperature, String> {
    let tau: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    Temperature::new(tau).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Calibration model; adds a "confidence" field to every line.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Output file [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long)]
    pub feature: Option<FeatureKind>,
    #[arg(long)]
    pub agg: Option<AggKind>,
    /// Keep the temperature fixed and fit only the logistic parameters.
    #[arg(long, value_parser = parse_temperature)]
    pub fix_temperature: Option<Temperature>,
    /// Output file for the model JSON [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Evaluate calibrated probabilities from this model.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Directory for pr_errors.csv, pr_correct.csv and roc.csv.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Output file for the report JSON [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub strip_punctuation: bool,
    /// Comma-separated run counts [default: 1,2,4,...,64 up to the runs available].
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// Output CSV [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub strip_punctuation: bool,
    /// Output CSV [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}
