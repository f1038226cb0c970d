//! Ranking metrics for word confidence scores.
//!
//! AUPR is estimated as step-wise average precision with tied scores grouped
//! into a single threshold; AUROC is the Mann-Whitney statistic with ties
//! counted half. Undefined metrics (a class is missing) are `None`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::AlignmentSummary;
use crate::data::UtteranceRecord;
use crate::pipeline::{evaluate_record, PipelineError, ScoreConfig};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("score at position {0} is not finite")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledScore {
    /// Confidence; higher means more likely correct.
    pub score: f64,
    pub correct: bool,
}

impl LabeledScore {
    pub fn new(score: f64, correct: bool) -> Self {
        Self { score, correct }
    }
}

/// Which class is treated as positive for precision/recall.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positives {
    /// Erroneous words, detected by low confidence.
    Errors,
    /// Correct words, detected by high confidence.
    Correct,
}

fn check_finite(items: &[LabeledScore]) -> Result<(), MetricError> {
    match items.iter().position(|it| !it.score.is_finite()) {
        Some(i) => Err(MetricError::NonFinite(i)),
        None => Ok(()),
    }
}

/// `(detection score, is_positive)` sorted by descending detection score.
fn ranked(items: &[LabeledScore], positives: Positives) -> Vec<(f64, bool)> {
    let mut out: Vec<(f64, bool)> = items
        .iter()
        .map(|it| match positives {
            Positives::Correct => (it.score, it.correct),
            Positives::Errors => (-it.score, !it.correct),
        })
        .collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out
}

/// Iterates `(tp, fp)` counts per tie group of a ranked list.
fn tie_groups(ranked: &[(f64, bool)]) -> impl Iterator<Item = (usize, usize)> + '_ {
    let mut i = 0;
    std::iter::from_fn(move || {
        if i >= ranked.len() {
            return None;
        }
        let score = ranked[i].0;
        let (mut tp, mut fp) = (0, 0);
        while i < ranked.len() && ranked[i].0 == score {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        Some((tp, fp))
    })
}

/// Probability that a random correct word outscores a random erroneous one,
/// ties counted half.
pub fn auroc(items: &[LabeledScore]) -> Result<f64, MetricError> {
    check_finite(items)?;
    let n_pos = items.iter().filter(|it| it.correct).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined(
            "AUROC needs both correct and erroneous words",
        ));
    }
    // Walk from the highest score down: every correct word in a group beats
    // the erroneous words in all lower groups.
    let ranked = ranked(items, Positives::Correct);
    let mut neg_above = 0usize;
    let mut u = 0.0f64;
    for (pos, neg) in tie_groups(&ranked) {
        let beaten = n_neg - neg_above - neg;
        u += pos as f64 * (beaten as f64 + 0.5 * neg as f64);
        neg_above += neg;
    }
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Step-wise average precision `sum_i (R_i - R_{i-1}) P_i` over tie-grouped
/// thresholds.
pub fn average_precision(items: &[LabeledScore], positives: Positives) -> Result<f64, MetricError> {
    check_finite(items)?;
    let ranked = ranked(items, positives);
    let n_pos = ranked.iter().filter(|r| r.1).count();
    if n_pos == 0 {
        return Err(MetricError::Undefined(
            "average precision needs at least one positive",
        ));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut weighted = 0.0;
    for (g_tp, g_fp) in tie_groups(&ranked) {
        tp += g_tp;
        fp += g_fp;
        if g_tp > 0 {
            weighted += g_tp as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(weighted / n_pos as f64)
}

/// Precision-recall points `(recall, precision)`, one per threshold.
pub fn pr_curve(items: &[LabeledScore], positives: Positives) -> Vec<(f64, f64)> {
    let ranked = ranked(items, positives);
    let n_pos = ranked.iter().filter(|r| r.1).count().max(1);
    let (mut tp, mut fp) = (0usize, 0usize);
    tie_groups(&ranked)
        .map(|(g_tp, g_fp)| {
            tp += g_tp;
            fp += g_fp;
            (tp as f64 / n_pos as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect()
}

/// ROC points `(false positive rate, true positive rate)` with correct words
/// as positives, starting at `(0, 0)`.
pub fn roc_curve(items: &[LabeledScore]) -> Vec<(f64, f64)> {
    let ranked = ranked(items, Positives::Correct);
    let n_pos = ranked.iter().filter(|r| r.1).count().max(1);
    let n_neg = (ranked.len() - ranked.iter().filter(|r| r.1).count()).max(1);
    let (mut tp, mut fp) = (0usize, 0usize);
    std::iter::once((0.0, 0.0))
        .chain(tie_groups(&ranked).map(|(g_tp, g_fp)| {
            tp += g_tp;
            fp += g_fp;
            (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64)
        }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Curves {
    pub pr_e: Vec<(f64, f64)>,
    pub pr_s: Vec<(f64, f64)>,
    pub roc: Vec<(f64, f64)>,
}

/// Writes a curve as CSV with header `x,y`.
pub fn write_curve_csv<W: std::io::Write>(
    mut out: W,
    points: &[(f64, f64)],
) -> std::io::Result<()> {
    writeln!(out, "x,y")?;
    for (x, y) in points {
        writeln!(out, "{x},{y}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aupr_e: Option<f64>,
    pub aupr_s: Option<f64>,
    pub auroc: Option<f64>,
    pub wer: f64,
    pub n_words: usize,
    pub n_errors: usize,
    #[serde(skip)]
    pub curves: Option<Curves>,
}

impl EvalReport {
    pub fn compute(
        items: &[LabeledScore],
        wer: f64,
        with_curves: bool,
    ) -> Result<Self, MetricError> {
        check_finite(items)?;
        let defined = |r: Result<f64, MetricError>| match r {
            Ok(v) => Ok(Some(v)),
            Err(MetricError::Undefined(_)) => Ok(None),
            Err(e) => Err(e),
        };
        let curves = with_curves.then(|| Curves {
            pr_e: pr_curve(items, Positives::Errors),
            pr_s: pr_curve(items, Positives::Correct),
            roc: roc_curve(items),
        });
        Ok(Self {
            aupr_e: defined(average_precision(items, Positives::Errors))?,
            aupr_s: defined(average_precision(items, Positives::Correct))?,
            auroc: defined(auroc(items))?,
            wer,
            n_words: items.len(),
            n_errors: items.iter().filter(|it| !it.correct).count(),
            curves,
        })
    }

    /// One console line in percent form, e.g.
    /// `AUPRe 34.96  AUPRs 96.10  AUROC 81.25  WER 12.00  words 1000  errors 120`.
    pub fn summary_line(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), format_percent);
        format!(
            "AUPRe {}  AUPRs {}  AUROC {}  WER {}  words {}  errors {}",
            pct(self.aupr_e),
            pct(self.aupr_s),
            pct(self.auroc),
            format_percent(self.wer),
            self.n_words,
            self.n_errors
        )
    }
}

/// A fraction as a two-decimal percentage (`0.34962 -> "34.96"`).
pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}", fraction * 100.0)
}

/// Inverse of [`format_percent`].
pub fn parse_percent(text: &str) -> Option<f64> {
    text.trim().parse::<f64>().ok().map(|p| p / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LengthRow {
    pub length: usize,
    pub n_words: usize,
    pub error_fraction: f64,
}

/// Fraction of erroneous words per word length (in tokens).
pub fn error_vs_length(words: &[(usize, bool)]) -> Vec<LengthRow> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(len, correct) in words {
        let entry = counts.entry(len).or_default();
        entry.0 += 1;
        if !correct {
            entry.1 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(length, (n_words, n_err))| LengthRow {
            length,
            n_words,
            error_fraction: n_err as f64 / n_words as f64,
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties. `None` when fewer
/// than two points or either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut vx, mut vy) = (0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Collects per-word scores, labels, and alignment counts across utterances.
#[derive(Debug, Clone, Default)]
pub struct EvalAccumulator {
    pub items: Vec<LabeledScore>,
    pub lengths: Vec<(usize, bool)>,
    summaries: Vec<AlignmentSummary>,
}

impl EvalAccumulator {
    pub fn push(
        &mut self,
        result: &crate::pipeline::UtteranceResult,
        map_score: impl Fn(f64) -> f64,
    ) {
        for (word, label) in result.words.iter().zip(&result.labels) {
            self.items
                .push(LabeledScore::new(map_score(word.score), label.correct));
            self.lengths.push((word.n_tokens, label.correct));
        }
        self.summaries.push(result.summary);
    }

    pub fn alignment(&self) -> AlignmentSummary {
        AlignmentSummary::pool(&self.summaries)
    }

    pub fn report(&self, with_curves: bool) -> Result<EvalReport, MetricError> {
        EvalReport::compute(&self.items, self.alignment().wer, with_curves)
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("utterance '{utt_id}' has {available} runs but the sweep needs {needed}")]
    InsufficientRuns {
        utt_id: String,
        needed: usize,
        available: usize,
    },
    #[error("run counts must be non-empty and positive")]
    BadRunCounts,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Incremental form of [`dropout_sweep`] for streaming input.
#[derive(Debug, Clone)]
pub struct DropoutSweep {
    config: ScoreConfig,
    run_counts: Vec<usize>,
    accumulators: Vec<EvalAccumulator>,
}

impl DropoutSweep {
    pub fn new(config: ScoreConfig, run_counts: Vec<usize>) -> Result<Self, SweepError> {
        if run_counts.is_empty() || run_counts.contains(&0) {
            return Err(SweepError::BadRunCounts);
        }
        let accumulators = vec![EvalAccumulator::default(); run_counts.len()];
        Ok(Self {
            config,
            run_counts,
            accumulators,
        })
    }

    /// Evaluates one utterance under every run count.
    pub fn evaluate(
        &self,
        record: &UtteranceRecord,
        vocab_size: usize,
    ) -> Result<Vec<crate::pipeline::UtteranceResult>, SweepError> {
        let needed = self.run_counts.iter().copied().max().unwrap_or(1);
        if record.runs.len() < needed {
            return Err(SweepError::InsufficientRuns {
                utt_id: record.utt_id.clone(),
                needed,
                available: record.runs.len(),
            });
        }
        self.run_counts
            .iter()
            .map(|&n| {
                let mut cfg = self.config.clone();
                cfg.pipeline.combine = true;
                cfg.pipeline.subset = Some((0..n).collect());
                Ok(evaluate_record(record, vocab_size, &cfg)?)
            })
            .collect()
    }

    /// Adds results produced by [`DropoutSweep::evaluate`].
    pub fn absorb(&mut self, results: &[crate::pipeline::UtteranceResult]) {
        for (acc, res) in self.accumulators.iter_mut().zip(results) {
            acc.push(res, |s| s);
        }
    }

    pub fn finish(&self) -> Result<Vec<(usize, EvalReport)>, SweepError> {
        self.run_counts
            .iter()
            .zip(&self.accumulators)
            .map(|(&n, acc)| Ok((n, acc.report(false)?)))
            .collect()
    }
}

/// Evaluates the dataset after averaging the first `N` runs of every
/// utterance, for each `N` in `run_counts`.
pub fn dropout_sweep(
    utterances: &[UtteranceRecord],
    vocab_size: usize,
    config: &ScoreConfig,
    run_counts: &[usize],
) -> Result<Vec<(usize, EvalReport)>, SweepError> {
    let mut sweep = DropoutSweep::new(config.clone(), run_counts.to_vec())?;
    for rec in utterances {
        let results = sweep.evaluate(rec, vocab_size)?;
        sweep.absorb(&results);
    }
    sweep.finish()
}
