//! Domain types, validation, and the JSONL wire format.
//!
//! A dataset is a vocabulary file (one token per line, line number = token
//! index) plus a records file with one utterance per JSON line:
//!
//! ```text
//! {"utt_id": "u1", "hyp_tokens": [3, 7, 0], "word_boundaries": [[0, 2]],
//!  "hyp_words": ["cat"], "ref_words": ["cat"],
//!  "runs": [{"run_id": "0", "steps": [{"dense": [...]}, {"topk": [[7, 0.9]], "rest": 0.1}, ...]}]}
//! ```
//!
//! A step is either a dense distribution over the whole vocabulary or a
//! top-k list plus the leftover mass. The leftover mass of a sparse step is
//! treated as uniform over the unlisted tokens (see [`densify`]).

use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::MASS_TOLERANCE;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("vocabulary line {line}: {message}")]
    Vocabulary { line: usize, message: String },

    #[error("line {line}: utterance '{utt_id}': {field}: {message}")]
    Invalid {
        line: usize,
        utt_id: String,
        field: String,
        message: String,
    },

    #[error("line {line}: duplicate utt_id '{utt_id}'")]
    DuplicateUtterance { line: usize, utt_id: String },
}

/// A field-level validation failure, before it is attached to a line.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }

    fn within(self, prefix: &str) -> Self {
        Self {
            field: format!("{prefix}{}", self.field),
            message: self.message,
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// The recognizer's output token inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.len() < 2 {
            return Err(DataError::Vocabulary {
                line: tokens.len(),
                message: format!("vocabulary needs at least 2 tokens, found {}", tokens.len()),
            });
        }
        let mut seen = HashSet::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(DataError::Vocabulary {
                    line: i,
                    message: "empty token".into(),
                });
            }
            if !seen.insert(tok.as_str()) {
                return Err(DataError::Vocabulary {
                    line: i,
                    message: format!("duplicate token '{tok}'"),
                });
            }
        }
        Ok(Self { tokens })
    }

    /// Reads one token per line. Line numbers in errors are 0-based, i.e.
    /// they equal the token index.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut tokens = Vec::new();
        for line in BufReader::new(reader).lines() {
            let line = line?;
            tokens.push(line.strip_suffix('\r').unwrap_or(&line).to_string());
        }
        Self::new(tokens)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        for tok in &self.tokens {
            writeln!(out, "{tok}")?;
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Probability distribution over the vocabulary at one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "StepWire", into = "StepWire")]
pub enum TokenPosterior {
    Dense(Vec<f64>),
    /// Listed `(token, probability)` pairs plus the mass left for every
    /// token not listed.
    Sparse {
        entries: Vec<(usize, f64)>,
        rest: f64,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StepWire {
    Dense(DenseWire),
    Sparse(SparseWire),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseWire {
    dense: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SparseWire {
    topk: Vec<(usize, f64)>,
    rest: f64,
}

impl From<StepWire> for TokenPosterior {
    fn from(wire: StepWire) -> Self {
        match wire {
            StepWire::Dense(d) => TokenPosterior::Dense(d.dense),
            StepWire::Sparse(s) => TokenPosterior::Sparse {
                entries: s.topk,
                rest: s.rest,
            },
        }
    }
}

impl From<TokenPosterior> for StepWire {
    fn from(p: TokenPosterior) -> Self {
        match p {
            TokenPosterior::Dense(dense) => StepWire::Dense(DenseWire { dense }),
            TokenPosterior::Sparse { entries, rest } => StepWire::Sparse(SparseWire {
                topk: entries,
                rest,
            }),
        }
    }
}

fn check_prob(p: f64, what: &str) -> Result<(), FieldError> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(FieldError::new(
            what,
            format!("probability {p} outside [0, 1]"),
        ));
    }
    Ok(())
}

impl TokenPosterior {
    pub fn validate(&self, vocab_size: usize) -> Result<(), FieldError> {
        match self {
            TokenPosterior::Dense(values) => {
                if values.len() != vocab_size {
                    return Err(FieldError::new(
                        "dense",
                        format!(
                            "length {} differs from vocabulary size {vocab_size}",
                            values.len()
                        ),
                    ));
                }
                for (i, &p) in values.iter().enumerate() {
                    check_prob(p, &format!("dense[{i}]"))?;
                }
                let mass: f64 = values.iter().sum();
                if (mass - 1.0).abs() > MASS_TOLERANCE {
                    return Err(FieldError::new(
                        "dense",
                        format!(
                            "probability mass {mass} differs from 1 by more than {MASS_TOLERANCE}"
                        ),
                    ));
                }
            }
            TokenPosterior::Sparse { entries, rest } => {
                if entries.len() > vocab_size {
                    return Err(FieldError::new(
                        "topk",
                        format!(
                            "{} entries exceed vocabulary size {vocab_size}",
                            entries.len()
                        ),
                    ));
                }
                let mut seen = HashSet::with_capacity(entries.len());
                for (i, &(idx, p)) in entries.iter().enumerate() {
                    if idx >= vocab_size {
                        return Err(FieldError::new(
                            format!("topk[{i}]"),
                            format!(
                                "token index {idx} out of range for vocabulary size {vocab_size}"
                            ),
                        ));
                    }
                    if !seen.insert(idx) {
                        return Err(FieldError::new(
                            format!("topk[{i}]"),
                            format!("token index {idx} listed twice"),
                        ));
                    }
                    check_prob(p, &format!("topk[{i}]"))?;
                }
                check_prob(*rest, "rest")?;
                let mass: f64 = entries.iter().map(|&(_, p)| p).sum::<f64>() + rest;
                if (mass - 1.0).abs() > MASS_TOLERANCE {
                    return Err(FieldError::new(
                        "topk",
                        format!(
                            "probability mass {mass} (listed plus rest) differs from 1 by more than {MASS_TOLERANCE}"
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Expands a posterior into a length-`vocab_size` probability vector.
///
/// Sparse leftover mass is spread uniformly over the unlisted tokens. When
/// every token is listed the leftover has nowhere to go and is dropped (it is
/// at most the mass tolerance for a valid posterior).
pub fn densify(p: &TokenPosterior, vocab_size: usize) -> Vec<f64> {
    match p {
        TokenPosterior::Dense(values) => values.clone(),
        TokenPosterior::Sparse { entries, rest } => {
            let unlisted = vocab_size - entries.len();
            let fill = if unlisted > 0 {
                rest / unlisted as f64
            } else {
                0.0
            };
            let mut out = vec![fill; vocab_size];
            for &(idx, prob) in entries {
                out[idx] = prob;
            }
            out
        }
    }
}

/// Half-open range `[start, end)` of token positions forming one word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct WordSpan {
    pub start: usize,
    pub end: usize,
}

impl WordSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl From<(usize, usize)> for WordSpan {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<WordSpan> for (usize, usize) {
    fn from(span: WordSpan) -> Self {
        (span.start, span.end)
    }
}

/// Posteriors for every hypothesis token from one stochastic forward pass
/// (a dropout sample or an ensemble member).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorRun {
    pub run_id: String,
    pub steps: Vec<TokenPosterior>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub hyp_tokens: Vec<usize>,
    pub word_boundaries: Vec<WordSpan>,
    pub hyp_words: Vec<String>,
    pub ref_words: Vec<String>,
    pub runs: Vec<PosteriorRun>,
}

impl UtteranceRecord {
    pub fn n_tokens(&self) -> usize {
        self.hyp_tokens.len()
    }

    pub fn n_words(&self) -> usize {
        self.word_boundaries.len()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), FieldError> {
        let t = self.hyp_tokens.len();
        for (i, &tok) in self.hyp_tokens.iter().enumerate() {
            if tok >= vocab_size {
                return Err(FieldError::new(
                    format!("hyp_tokens[{i}]"),
                    format!("token index {tok} out of range for vocabulary size {vocab_size}"),
                ));
            }
        }

        let mut prev_end = 0;
        for (j, span) in self.word_boundaries.iter().enumerate() {
            let field = format!("word_boundaries[{j}]");
            if span.end <= span.start {
                return Err(FieldError::new(
                    field,
                    format!("empty range [{}, {})", span.start, span.end),
                ));
            }
            if span.end > t {
                return Err(FieldError::new(
                    field,
                    format!(
                        "range [{}, {}) exceeds token count {t}",
                        span.start, span.end
                    ),
                ));
            }
            if j > 0 && span.start < prev_end {
                return Err(FieldError::new(
                    field,
                    "ranges must be sorted and non-overlapping",
                ));
            }
            prev_end = span.end;
        }

        if self.hyp_words.len() != self.word_boundaries.len() {
            return Err(FieldError::new(
                "hyp_words",
                format!(
                    "{} words but {} word boundaries",
                    self.hyp_words.len(),
                    self.word_boundaries.len()
                ),
            ));
        }

        if self.runs.is_empty() {
            return Err(FieldError::new("runs", "at least one run is required"));
        }
        for (r, run) in self.runs.iter().enumerate() {
            if run.steps.len() != t {
                return Err(FieldError::new(
                    format!("runs[{r}].steps"),
                    format!("{} steps but {t} hypothesis tokens", run.steps.len()),
                ));
            }
            for (k, step) in run.steps.iter().enumerate() {
                step.validate(vocab_size)
                    .map_err(|e| e.within(&format!("runs[{r}].steps[{k}].")))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub utterances: Vec<UtteranceRecord>,
}

impl Dataset {
    /// Validates every utterance against the vocabulary. Line numbers in
    /// errors are the 1-based record positions.
    pub fn new(
        vocabulary: Vocabulary,
        utterances: Vec<UtteranceRecord>,
    ) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(utterances.len());
        for (i, utt) in utterances.iter().enumerate() {
            check_record(utt, vocabulary.size(), i + 1, &mut seen)?;
        }
        Ok(Self {
            vocabulary,
            utterances,
        })
    }

    pub fn write_records<W: Write>(&self, out: W) -> io::Result<()> {
        write_records(out, &self.utterances)
    }

    pub fn n_words(&self) -> usize {
        self.utterances.iter().map(UtteranceRecord::n_words).sum()
    }
}

fn check_record(
    utt: &UtteranceRecord,
    vocab_size: usize,
    line: usize,
    seen: &mut HashSet<String>,
) -> Result<(), DataError> {
    utt.validate(vocab_size).map_err(|e| DataError::Invalid {
        line,
        utt_id: utt.utt_id.clone(),
        field: e.field,
        message: e.message,
    })?;
    if !seen.insert(utt.utt_id.clone()) {
        return Err(DataError::DuplicateUtterance {
            line,
            utt_id: utt.utt_id.clone(),
        });
    }
    Ok(())
}

/// Writes one JSON object per line.
pub fn write_records<'a, W, I>(mut out: W, records: I) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a UtteranceRecord>,
{
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Streams validated records from a JSONL source, one line at a time.
///
/// Blank lines are skipped. Duplicate `utt_id`s are rejected, which is the
/// only state kept across lines.
pub struct RecordReader<R> {
    lines: io::Lines<BufReader<R>>,
    vocab_size: usize,
    line_no: usize,
    seen: HashSet<String>,
    failed: bool,
}

impl<R: Read> RecordReader<R> {
    pub fn new(source: R, vocab_size: usize) -> Self {
        Self {
            lines: BufReader::new(source).lines(),
            vocab_size,
            line_no: 0,
            seen: HashSet::new(),
            failed: false,
        }
    }
}

impl<R: Read> Iterator for RecordReader<R> {
    type Item = Result<UtteranceRecord, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e.into()));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let result = serde_json::from_str::<UtteranceRecord>(&line)
                .map_err(|source| DataError::Json {
                    line: self.line_no,
                    source,
                })
                .and_then(|rec| {
                    check_record(&rec, self.vocab_size, self.line_no, &mut self.seen)?;
                    Ok(rec)
                });
            if result.is_err() {
                self.failed = true;
            }
            return Some(result);
        }
    }
}

/// Reads a vocabulary and a JSONL records stream into a validated dataset.
pub fn parse_dataset<V: Read, R: Read>(
    vocab_source: V,
    records_source: R,
) -> Result<Dataset, DataError> {
    let vocabulary = Vocabulary::from_reader(vocab_source)?;
    let utterances =
        RecordReader::new(records_source, vocabulary.size()).collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        vocabulary,
        utterances,
    })
}
