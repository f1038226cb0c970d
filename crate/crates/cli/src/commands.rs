use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;
use wordconf::alignment::align_words;
use wordconf::calibration::CalibrationProblem;
use wordconf::data::RecordReader;
use wordconf::metrics::{
    error_vs_length, write_curve_csv, DropoutSweep, EvalAccumulator, MetricError, SweepError,
};
use wordconf::pipeline::{evaluate_record, score_record, PipelineError};
use wordconf::synth::{generate, write_truth, GenConfig, SynthError};
use wordconf::{
    apply_calibration, AggKind, CalibrationError, CalibrationModel, DataError, EvalReport,
    FeatureKind, NormalizeFlags, ScoreConfig, UtteranceRecord, Vocabulary,
};

use crate::args::{
    EvalArgs, FeatureArgs, FitArgs, GenArgs, InputArgs, PipelineArgs, ScoreArgs, StatsArgs,
    SweepArgs,
};
use crate::Failure;

/// Records handed to the worker pool at a time.
const CHUNK: usize = 512;

const DEFAULT_SWEEP_COUNTS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Data(e.into())
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::NonFinite(_) => Failure::Numeric(e.into()),
            MetricError::Undefined(_) => Failure::Data(e.into()),
        }
    }
}

impl From<SweepError> for Failure {
    fn from(e: SweepError) -> Self {
        match e {
            SweepError::BadRunCounts => Failure::Usage(e.into()),
            SweepError::Metric(m) => m.into(),
            other => Failure::Data(other.into()),
        }
    }
}

fn io_failure<'a>(path: &'a Path, action: &'a str) -> impl FnOnce(io::Error) -> Failure + 'a {
    move |e| Failure::Data(anyhow::Error::new(e).context(format!("{action} {}", path.display())))
}

fn open(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(io_failure(path, "cannot open"))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(io_failure(p, "cannot create"))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_failure(e: io::Error) -> Failure {
    Failure::Data(anyhow::Error::new(e).context("write failed"))
}

/// Validated input: the vocabulary plus a streaming record reader.
struct Input {
    vocab: Vocabulary,
    records: RecordReader<File>,
}

impl Input {
    fn open(args: &InputArgs) -> Result<Self, Failure> {
        let vocab = Vocabulary::from_reader(open(&args.vocab)?)
            .with_context(|| format!("in {}", args.vocab.display()))
            .map_err(Failure::Data)?;
        let records = RecordReader::new(open(&args.records)?, vocab.size());
        Ok(Self { vocab, records })
    }

    /// Feeds records to `sink` in chunks, in file order.
    fn for_each_chunk(
        self,
        mut sink: impl FnMut(&[UtteranceRecord]) -> Result<(), Failure>,
    ) -> Result<(), Failure> {
        let mut chunk = Vec::with_capacity(CHUNK);
        for rec in self.records {
            chunk.push(rec?);
            if chunk.len() == CHUNK {
                sink(&chunk)?;
                chunk.clear();
            }
        }
        if !chunk.is_empty() {
            sink(&chunk)?;
        }
        Ok(())
    }
}

fn read_model(path: &Path) -> Result<CalibrationModel, Failure> {
    let text = fs::read_to_string(path).map_err(io_failure(path, "cannot read"))?;
    let model: CalibrationModel = serde_json::from_str(&text)
        .with_context(|| format!("invalid calibration model {}", path.display()))
        .map_err(Failure::Data)?;
    model
        .validate()
        .with_context(|| format!("in {}", path.display()))
        .map_err(Failure::Data)?;
    Ok(model)
}

/// Scoring settings from the flags, or from the calibration model when one
/// is given. Explicit flags that disagree with the model are rejected.
fn score_config(
    features: &FeatureArgs,
    pipeline: &PipelineArgs,
    model: Option<&CalibrationModel>,
) -> Result<ScoreConfig, Failure> {
    let mut config = match model {
        None => {
            let mut c = ScoreConfig::new(
                features.feature.unwrap_or(FeatureKind::LogProba),
                features.agg.unwrap_or(AggKind::Sum),
            );
            c.tau = features.temperature;
            c
        }
        Some(m) => {
            if features.feature.is_some_and(|f| f != m.feature)
                || features.agg.is_some_and(|a| a != m.agg)
            {
                return Err(Failure::usage(format!(
                    "--feature/--agg disagree with the calibration model ({} {})",
                    m.feature, m.agg
                )));
            }
            if features.temperature.is_some_and(|t| t.value() != m.tau) {
                return Err(Failure::usage(format!(
                    "--temperature disagrees with the calibration model (tau {})",
                    m.tau
                )));
            }
            let mut c = ScoreConfig::new(m.feature, m.agg);
            c.tau = Some(m.temperature().map_err(|e| Failure::Data(e.into()))?);
            c
        }
    };
    config.pipeline = pipeline.options().map_err(Failure::usage)?;
    config.normalize = pipeline.normalize();
    Ok(config)
}

pub fn gen(args: GenArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_failure(path, "cannot read"))?;
            serde_json::from_str(&text)
                .with_context(|| format!("invalid generator config {}", path.display()))
                .map_err(Failure::Data)?
        }
        None => GenConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = args.$flag { config.$field = v; })*
        };
    }
    set!(
        utts => n_utts,
        seed => seed,
        vocab_size => vocab_size,
        runs => n_runs,
        sharpen => sharpen,
        run_noise => run_noise,
        token_error_rate => token_error_rate,
        length_error_slope => length_error_slope,
        mean_word_len => mean_word_len,
        min_words => min_words,
        max_words => max_words,
        peak_rate_correct => peak_rate_correct,
        peak_rate_error => peak_rate_error,
    );
    if args.topk.is_some() {
        config.topk = args.topk;
    }

    let generated = generate(&config).map_err(|e| match e {
        SynthError::InvalidConfig { .. } => Failure::Data(e.into()),
        SynthError::Data(d) => d.into(),
    })?;

    fs::create_dir_all(&args.out).map_err(io_failure(&args.out, "cannot create"))?;
    let write =
        |name: &str, body: &dyn Fn(&mut dyn Write) -> io::Result<()>| -> Result<(), Failure> {
            let path = args.out.join(name);
            let mut out =
                BufWriter::new(File::create(&path).map_err(io_failure(&path, "cannot create"))?);
            body(&mut out)
                .and_then(|_| out.flush())
                .map_err(io_failure(&path, "cannot write"))
        };
    write("vocab.txt", &|out| {
        generated.dataset.vocabulary.write_to(out)
    })?;
    write("records.jsonl", &|out| generated.dataset.write_records(out))?;
    write("truth.jsonl", &|out| write_truth(out, &generated))?;
    eprintln!(
        "wrote {} utterances, {} words to {}",
        generated.dataset.utterances.len(),
        generated.dataset.n_words(),
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    utt_id: &'a str,
    word_index: usize,
    word: &'a str,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    confidence: Option<f64>,
}

pub fn score(args: ScoreArgs) -> Result<(), Failure> {
    let model = args.calibration.as_deref().map(read_model).transpose()?;
    let config = score_config(&args.features, &args.pipeline, model.as_ref())?;
    let input = Input::open(&args.input)?;
    let v = input.vocab.size();
    let mut out = output(args.out.as_deref())?;

    input.for_each_chunk(|chunk| {
        let scored = chunk
            .par_iter()
            .map(|rec| score_record(rec, v, &config))
            .collect::<Result<Vec<_>, _>>()?;
        for (rec, words) in chunk.iter().zip(&scored) {
            for w in words {
                let line = ScoreLine {
                    utt_id: &rec.utt_id,
                    word_index: w.word_index,
                    word: &rec.hyp_words[w.word_index],
                    score: w.score,
                    confidence: model.as_ref().map(|m| apply_calibration(m, w.score)),
                };
                serde_json::to_writer(&mut out, &line).map_err(|e| write_failure(e.into()))?;
                out.write_all(b"\n").map_err(write_failure)?;
            }
        }
        Ok(())
    })?;
    out.flush().map_err(write_failure)
}

pub fn fit(args: FitArgs) -> Result<(), Failure> {
    let options = args.pipeline.options().map_err(Failure::usage)?;
    let feature = args.feature.unwrap_or(FeatureKind::LogProba);
    let agg = args.agg.unwrap_or(AggKind::Sum);
    let dev = wordconf::parse_dataset(open(&args.input.vocab)?, open(&args.input.records)?)?;

    let problem = CalibrationProblem::new(&dev, feature, agg, &options, args.pipeline.normalize())
        .map_err(calibration_failure)?;
    let (model, degenerate) = match problem.fit(args.fix_temperature) {
        Ok(m) => (m, None),
        Err(CalibrationError::Degenerate {
            fallback,
            n_words,
            all_correct,
        }) => {
            let e = CalibrationError::Degenerate {
                fallback: fallback.clone(),
                n_words,
                all_correct,
            };
            (fallback, Some(e))
        }
        Err(e) => return Err(calibration_failure(e)),
    };

    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &model).map_err(|e| write_failure(e.into()))?;
    out.write_all(b"\n")
        .and_then(|_| out.flush())
        .map_err(write_failure)?;

    match degenerate {
        Some(e) => {
            eprintln!("warning: {e}");
            Err(Failure::Numeric(anyhow::anyhow!(
                "degenerate development set; wrote the fallback model"
            )))
        }
        None => {
            eprintln!(
                "tau {:.4}  alpha {:.4}  beta {:.4}  dev NLL {:.5}  words {}",
                model.tau, model.alpha, model.beta, model.dev_nll, model.n_dev_words
            );
            Ok(())
        }
    }
}

fn calibration_failure(e: CalibrationError) -> Failure {
    match e {
        CalibrationError::Degenerate { .. } | CalibrationError::Empty => Failure::Numeric(e.into()),
        _ => Failure::Data(e.into()),
    }
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let model = args.calibration.as_deref().map(read_model).transpose()?;
    let config = score_config(&args.features, &args.pipeline, model.as_ref())?;
    let input = Input::open(&args.input)?;
    let v = input.vocab.size();

    let mut acc = EvalAccumulator::default();
    input.for_each_chunk(|chunk| {
        let results = chunk
            .par_iter()
            .map(|rec| evaluate_record(rec, v, &config))
            .collect::<Result<Vec<_>, _>>()?;
        for res in &results {
            match &model {
                Some(m) => acc.push(res, |s| apply_calibration(m, s)),
                None => acc.push(res, |s| s),
            }
        }
        Ok(())
    })?;
    let report = acc.report(args.curves.is_some())?;

    if let Some(dir) = &args.curves {
        write_curves(dir, &report)?;
    }
    let mut out = output(args.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report).map_err(|e| write_failure(e.into()))?;
    out.write_all(b"\n")
        .and_then(|_| out.flush())
        .map_err(write_failure)?;
    drop(out);
    if args.out.is_some() {
        println!("{}", report.summary_line());
    } else {
        eprintln!("{}", report.summary_line());
    }
    Ok(())
}

fn write_curves(dir: &Path, report: &EvalReport) -> Result<(), Failure> {
    let Some(curves) = &report.curves else {
        return Ok(());
    };
    fs::create_dir_all(dir).map_err(io_failure(dir, "cannot create"))?;
    for (name, points) in [
        ("pr_errors.csv", &curves.pr_e),
        ("pr_correct.csv", &curves.pr_s),
        ("roc.csv", &curves.roc),
    ] {
        let path: PathBuf = dir.join(name);
        let mut out =
            BufWriter::new(File::create(&path).map_err(io_failure(&path, "cannot create"))?);
        write_curve_csv(&mut out, points)
            .and_then(|_| out.flush())
            .map_err(io_failure(&path, "cannot write"))?;
    }
    Ok(())
}

fn csv_value(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_dropout(args: SweepArgs) -> Result<(), Failure> {
    let pipeline = PipelineArgs {
        combine: true,
        no_combine: false,
        runs: None,
        lowercase: args.lowercase,
        strip_punctuation: args.strip_punctuation,
    };
    let config = score_config(&args.features, &pipeline, None)?;
    if let Some(counts) = &args.counts {
        if counts.is_empty() || counts.contains(&0) {
            return Err(SweepError::BadRunCounts.into());
        }
    }
    let input = Input::open(&args.input)?;
    let v = input.vocab.size();

    let mut sweep: Option<DropoutSweep> = None;
    input.for_each_chunk(|chunk| {
        let sweep = match &mut sweep {
            Some(s) => s,
            None => {
                // without explicit counts, use the defaults the first record can serve
                let counts = args.counts.clone().unwrap_or_else(|| {
                    let available = chunk[0].runs.len();
                    DEFAULT_SWEEP_COUNTS
                        .into_iter()
                        .filter(|&n| n <= available)
                        .collect()
                });
                sweep.insert(DropoutSweep::new(config.clone(), counts)?)
            }
        };
        let results = chunk
            .par_iter()
            .map(|rec| sweep.evaluate(rec, v))
            .collect::<Result<Vec<_>, _>>()?;
        for res in &results {
            sweep.absorb(res);
        }
        Ok(())
    })?;
    let Some(sweep) = sweep else {
        return Err(Failure::Data(anyhow::anyhow!(
            "no records in {}",
            args.input.records.display()
        )));
    };

    let mut out = output(args.out.as_deref())?;
    let mut body = String::from("n_runs,aupr_e,aupr_s,auroc\n");
    for (n, report) in sweep.finish()? {
        body += &format!(
            "{n},{},{},{}\n",
            csv_value(report.aupr_e),
            csv_value(report.aupr_s),
            csv_value(report.auroc)
        );
    }
    out.write_all(body.as_bytes())
        .and_then(|_| out.flush())
        .map_err(write_failure)
}

pub fn stats(args: StatsArgs) -> Result<(), Failure> {
    let flags = NormalizeFlags {
        lowercase: args.lowercase,
        strip_punctuation: args.strip_punctuation,
    };
    let input = Input::open(&args.input)?;
    let mut words = Vec::new();
    input.for_each_chunk(|chunk| {
        for rec in chunk {
            let (labels, _) = align_words(&rec.hyp_words, &rec.ref_words, flags);
            words.extend(
                rec.word_boundaries
                    .iter()
                    .zip(&labels)
                    .map(|(span, l)| (span.len(), l.correct)),
            );
        }
        Ok(())
    })?;

    let mut out = output(args.out.as_deref())?;
    let mut body = String::from("length,n_words,error_fraction\n");
    for row in error_vs_length(&words) {
        body += &format!("{},{},{}\n", row.length, row.n_words, row.error_fraction);
    }
    out.write_all(body.as_bytes())
        .and_then(|_| out.flush())
        .map_err(write_failure)
}
