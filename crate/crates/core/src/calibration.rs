//! Learning and applying the word-level calibration `P(correct) =
//! sigmoid(alpha * s + beta)`, where `s` is computed on temperature-scaled
//! posteriors.
//!
//! Fitting searches the temperature on a log grid followed by golden-section
//! refinement; for every candidate temperature the word scores are recomputed
//! and `(alpha, beta)` are solved exactly by damped Newton-Raphson on the
//! (convex) logistic loss.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{align_words, NormalizeFlags};
use crate::data::{densify, Dataset};
use crate::features::{aggregate_word, AggKind, FeatureKind};
use crate::numeric::{clamp_prob, logit, safe_ln, sigmoid, xlogx};
use crate::pipeline::PipelineOptions;
use crate::transform::{Temperature, TransformError};

/// Temperature grid: 41 log-spaced points over `[0.05, 20]`.
pub const TAU_GRID_MIN: f64 = 0.05;
pub const TAU_GRID_MAX: f64 = 20.0;
pub const TAU_GRID_POINTS: usize = 41;
/// Golden-section stopping width, in log-temperature.
pub const LOG_TAU_TOLERANCE: f64 = 1e-4;

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_STEP_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub feature: FeatureKind,
    pub agg: AggKind,
    pub dev_nll: f64,
    pub n_dev_words: usize,
}

impl CalibrationModel {
    pub fn temperature(&self) -> Result<Temperature, TransformError> {
        Temperature::new(self.tau)
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(CalibrationError::InvalidModel(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(CalibrationError::InvalidModel(
                "alpha and beta must be finite".into(),
            ));
        }
        if !self.dev_nll.is_finite() || self.dev_nll < 0.0 {
            return Err(CalibrationError::InvalidModel(format!(
                "dev_nll must be finite and non-negative, got {}",
                self.dev_nll
            )));
        }
        Ok(())
    }
}

/// `sigmoid(alpha * score + beta)`.
pub fn apply_calibration(model: &CalibrationModel, score: f64) -> f64 {
    sigmoid(model.alpha * score + model.beta)
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("development set contains no scored words")]
    Empty,
    #[error("all {n_words} development words are {}; fitted a constant model instead", if *.all_correct { "correct" } else { "erroneous" })]
    Degenerate {
        fallback: CalibrationModel,
        n_words: usize,
        all_correct: bool,
    },
    #[error("utterance '{utt_id}': {source}")]
    Transform {
        utt_id: String,
        #[source]
        source: TransformError,
    },
    #[error("invalid calibration model: {0}")]
    InvalidModel(String),
}

/// Mean binary cross-entropy of `sigmoid(alpha * x + beta)` against `y`,
/// with probabilities clamped to `[1e-12, 1 - 1e-12]`.
pub fn logistic_nll(alpha: f64, beta: f64, scores: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            let z = alpha * x + beta;
            if y {
                -clamp_prob(sigmoid(z)).ln()
            } else {
                -clamp_prob(sigmoid(-z)).ln()
            }
        })
        .sum();
    total / scores.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub alpha: f64,
    pub beta: f64,
    pub nll: f64,
    pub iterations: usize,
    /// Loss after every accepted step, starting with the initial loss.
    pub loss_trace: Vec<f64>,
}

/// Fits `(alpha, beta)` by damped Newton-Raphson from `(1, 0)`. Each step is
/// halved until the loss strictly decreases; the fit stops when no decrease
/// is found, the step is below `1e-10`, or after 100 iterations.
pub fn fit_logistic(scores: &[f64], labels: &[bool]) -> LogisticFit {
    let n = scores.len().max(1) as f64;
    let (mut alpha, mut beta) = (1.0, 0.0);
    let mut loss = logistic_nll(alpha, beta, scores, labels);
    let mut trace = vec![loss];
    let mut iterations = 0;

    while iterations < NEWTON_MAX_ITER {
        iterations += 1;
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in scores.iter().zip(labels) {
            let p = sigmoid(alpha * x + beta);
            let r = p - if y { 1.0 } else { 0.0 };
            let w = p * (1.0 - p);
            ga += r * x;
            gb += r;
            haa += w * x * x;
            hab += w * x;
            hbb += w;
        }
        let (ga, gb, mut haa, hab, mut hbb) = (ga / n, gb / n, haa / n, hab / n, hbb / n);
        let mut det = haa * hbb - hab * hab;
        if det.is_nan() || det <= 1e-300 {
            // Singular curvature (constant scores or saturated sigmoid):
            // ridge the diagonal so the step stays finite.
            let ridge = 1e-10 * (1.0 + haa + hbb);
            haa += ridge;
            hbb += ridge;
            det = haa * hbb - hab * hab;
        }
        let da = -(hbb * ga - hab * gb) / det;
        let db = -(haa * gb - hab * ga) / det;
        if !da.is_finite() || !db.is_finite() {
            break;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let (ca, cb) = (alpha + step * da, beta + step * db);
            let cand = logistic_nll(ca, cb, scores, labels);
            if cand < loss {
                accepted = Some((ca, cb, cand));
                break;
            }
            step *= 0.5;
        }
        let Some((ca, cb, cand)) = accepted else {
            break;
        };
        let moved = (ca - alpha).abs().max((cb - beta).abs());
        alpha = ca;
        beta = cb;
        loss = cand;
        trace.push(loss);
        if moved < NEWTON_STEP_TOL {
            break;
        }
    }

    LogisticFit {
        alpha,
        beta,
        nll: loss,
        iterations,
        loss_trace: trace,
    }
}

/// Posteriors of one token across the selected runs, with vocabulary entries
/// that carry identical probabilities in every run merged into one column.
///
/// Temperature scaling and run averaging act entry-wise, so merged entries
/// stay equal; features only need each distinct value and its multiplicity.
#[derive(Debug, Clone)]
struct TokenColumns {
    n_runs: usize,
    /// `values[g * n_runs + r]`: probability of column `g` in run `r`.
    values: Vec<f64>,
    counts: Vec<f64>,
    vocab_size: usize,
}

impl TokenColumns {
    fn from_dense(runs: &[Vec<f64>]) -> Self {
        let n_runs = runs.len();
        let vocab_size = runs[0].len();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut values = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut key = Vec::with_capacity(n_runs);
        for i in 0..vocab_size {
            key.clear();
            key.extend(runs.iter().map(|r| r[i].to_bits()));
            if let Some(&g) = index.get(&key) {
                counts[g] += 1.0;
            } else {
                index.insert(key.clone(), counts.len());
                counts.push(1.0);
                values.extend(runs.iter().map(|r| r[i]));
            }
        }
        Self {
            n_runs,
            values,
            counts,
            vocab_size,
        }
    }

    fn n_columns(&self) -> usize {
        self.counts.len()
    }

    /// Per-column probabilities after scaling every run by `tau` and
    /// averaging over runs.
    fn transformed(&self, tau: f64) -> Vec<f64> {
        let g_n = self.n_columns();
        let mut mean = vec![0.0; g_n];
        let mut scaled = vec![0.0; g_n];
        for r in 0..self.n_runs {
            if tau == 1.0 {
                for (g, s) in scaled.iter_mut().enumerate() {
                    *s = self.values[g * self.n_runs + r];
                }
            } else {
                let inv = 1.0 / tau;
                let mut max = f64::NEG_INFINITY;
                for (g, s) in scaled.iter_mut().enumerate() {
                    let p = self.values[g * self.n_runs + r];
                    *s = if p > 0.0 {
                        p.ln() * inv
                    } else {
                        f64::NEG_INFINITY
                    };
                    max = max.max(*s);
                }
                let mut norm = 0.0;
                for (s, &c) in scaled.iter_mut().zip(&self.counts) {
                    *s = (*s - max).exp();
                    norm += c * *s;
                }
                for s in &mut scaled {
                    *s /= norm;
                }
            }
            for g in 0..g_n {
                mean[g] += scaled[g];
            }
        }
        if self.n_runs > 1 {
            let n = self.n_runs as f64;
            for m in &mut mean {
                *m /= n;
            }
        }
        mean
    }

    fn feature(&self, tau: f64, kind: FeatureKind) -> f64 {
        let q = self.transformed(tau);
        let log_max = safe_ln(q.iter().copied().fold(0.0, f64::max));
        match kind {
            FeatureKind::LogProba => log_max,
            FeatureKind::NegEntropy => {
                let ne: f64 = q
                    .iter()
                    .zip(&self.counts)
                    .map(|(&p, &c)| c * xlogx(p))
                    .sum();
                ne.min(log_max).max(-(self.vocab_size as f64).ln())
            }
        }
    }
}

/// Development words with their labels, ready to be rescored under any
/// temperature.
#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    feature: FeatureKind,
    agg: AggKind,
    tokens: Vec<TokenColumns>,
    /// Token ranges into `tokens`, one per word, in sorted-utt_id order.
    words: Vec<std::ops::Range<usize>>,
    labels: Vec<bool>,
}

impl CalibrationProblem {
    /// Labels every hypothesis word by alignment and caches the posteriors
    /// of its tokens. Utterances are processed in `utt_id` order.
    pub fn new(
        dev: &Dataset,
        feature: FeatureKind,
        agg: AggKind,
        pipeline: &PipelineOptions,
        normalize: NormalizeFlags,
    ) -> Result<Self, CalibrationError> {
        let vocab_size = dev.vocabulary.size();
        let mut order: Vec<usize> = (0..dev.utterances.len()).collect();
        order.sort_by(|&a, &b| dev.utterances[a].utt_id.cmp(&dev.utterances[b].utt_id));

        let per_utt: Vec<(Vec<Vec<TokenColumns>>, Vec<bool>)> = order
            .par_iter()
            .map(|&u| {
                let rec = &dev.utterances[u];
                let subset = select_runs(rec.runs.len(), pipeline).map_err(|source| {
                    CalibrationError::Transform {
                        utt_id: rec.utt_id.clone(),
                        source,
                    }
                })?;
                let (labels, _) = align_words(&rec.hyp_words, &rec.ref_words, normalize);
                let words = rec
                    .word_boundaries
                    .iter()
                    .map(|span| {
                        span.positions()
                            .map(|k| {
                                let runs: Vec<Vec<f64>> = subset
                                    .iter()
                                    .map(|&r| densify(&rec.runs[r].steps[k], vocab_size))
                                    .collect();
                                TokenColumns::from_dense(&runs)
                            })
                            .collect()
                    })
                    .collect();
                Ok((words, labels.into_iter().map(|l| l.correct).collect()))
            })
            .collect::<Result<_, CalibrationError>>()?;

        let mut tokens = Vec::new();
        let mut words = Vec::new();
        let mut labels = Vec::new();
        for (utt_words, utt_labels) in per_utt {
            for word in utt_words {
                let start = tokens.len();
                tokens.extend(word);
                words.push(start..tokens.len());
            }
            labels.extend(utt_labels);
        }
        Ok(Self {
            feature,
            agg,
            tokens,
            words,
            labels,
        })
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    /// Word scores with every posterior scaled by `tau` before averaging
    /// and feature extraction.
    pub fn scores(&self, tau: f64) -> Vec<f64> {
        self.words
            .par_iter()
            .map(|range| {
                let token_scores: Vec<f64> = self.tokens[range.clone()]
                    .iter()
                    .map(|t| t.feature(tau, self.feature))
                    .collect();
                aggregate_word(&token_scores, self.agg).expect("word boundaries are non-empty")
            })
            .collect()
    }

    pub fn fit_at(&self, tau: f64) -> LogisticFit {
        fit_logistic(&self.scores(tau), &self.labels)
    }

    /// NLL of a fixed model on these words.
    pub fn nll(&self, model: &CalibrationModel) -> f64 {
        logistic_nll(
            model.alpha,
            model.beta,
            &self.scores(model.tau),
            &self.labels,
        )
    }

    fn model(&self, tau: f64, fit: &LogisticFit) -> CalibrationModel {
        CalibrationModel {
            tau,
            alpha: fit.alpha,
            beta: fit.beta,
            feature: self.feature,
            agg: self.agg,
            dev_nll: fit.nll,
            n_dev_words: self.n_words(),
        }
    }

    fn check_classes(&self, fixed_tau: Option<Temperature>) -> Result<(), CalibrationError> {
        let n = self.n_words();
        if n == 0 {
            return Err(CalibrationError::Empty);
        }
        let n_correct = self.labels.iter().filter(|&&c| c).count();
        if n_correct == 0 || n_correct == n {
            let prior = n_correct as f64 / n as f64;
            let beta = logit(prior);
            let tau = fixed_tau.map_or(1.0, Temperature::value);
            let scores = vec![0.0; n];
            let fallback = CalibrationModel {
                tau,
                alpha: 0.0,
                beta,
                feature: self.feature,
                agg: self.agg,
                dev_nll: logistic_nll(0.0, beta, &scores, &self.labels),
                n_dev_words: n,
            };
            return Err(CalibrationError::Degenerate {
                fallback,
                n_words: n,
                all_correct: n_correct == n,
            });
        }
        Ok(())
    }

    /// Learns `(tau, alpha, beta)`, or only `(alpha, beta)` when the
    /// temperature is fixed.
    pub fn fit(
        &self,
        fixed_tau: Option<Temperature>,
    ) -> Result<CalibrationModel, CalibrationError> {
        self.check_classes(fixed_tau)?;
        if let Some(tau) = fixed_tau {
            let fit = self.fit_at(tau.value());
            return Ok(self.model(tau.value(), &fit));
        }

        let grid = tau_grid();
        let grid_fits: Vec<LogisticFit> = grid.iter().map(|&t| self.fit_at(t)).collect();
        let best = grid_fits.iter().enumerate().fold(0, |best, (i, f)| {
            if f.nll < grid_fits[best].nll {
                i
            } else {
                best
            }
        });

        let lo = grid[best.saturating_sub(1)].ln();
        let hi = grid[(best + 1).min(grid.len() - 1)].ln();
        let (log_tau, fit) = golden_section(lo, hi, |lt| self.fit_at(lt.exp()));
        if fit.nll < grid_fits[best].nll {
            Ok(self.model(log_tau.exp(), &fit))
        } else {
            Ok(self.model(grid[best], &grid_fits[best]))
        }
    }
}

/// The 41-point log-spaced temperature grid.
pub fn tau_grid() -> Vec<f64> {
    let (lo, hi) = (TAU_GRID_MIN.ln(), TAU_GRID_MAX.ln());
    let step = (hi - lo) / (TAU_GRID_POINTS - 1) as f64;
    (0..TAU_GRID_POINTS)
        .map(|i| {
            if i + 1 == TAU_GRID_POINTS {
                TAU_GRID_MAX
            } else {
                (lo + step * i as f64).exp()
            }
        })
        .collect()
}

/// Minimizes `f(x).nll` on `[lo, hi]`; returns the best evaluated point.
fn golden_section(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> LogisticFit) -> (f64, LogisticFit) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > LOG_TAU_TOLERANCE {
        if f1.nll <= f2.nll {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1.nll <= f2.nll {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

fn select_runs(n_runs: usize, options: &PipelineOptions) -> Result<Vec<usize>, TransformError> {
    let subset = match &options.subset {
        Some(s) => s.clone(),
        None if options.combine => (0..n_runs).collect(),
        None => vec![0],
    };
    if subset.is_empty() {
        return Err(TransformError::EmptySubset);
    }
    if !options.combine && subset.len() != 1 {
        return Err(TransformError::SingleRunRequired(subset.len()));
    }
    if let Some(&index) = subset.iter().find(|&&i| i >= n_runs) {
        return Err(TransformError::RunOutOfRange {
            index,
            available: n_runs,
        });
    }
    Ok(subset)
}

/// Fits a calibration model for one (feature, aggregation) setting on a
/// labeled development set.
pub fn fit_calibration(
    dev: &Dataset,
    feature: FeatureKind,
    agg: AggKind,
    pipeline: &PipelineOptions,
    fixed_tau: Option<Temperature>,
    normalize: NormalizeFlags,
) -> Result<CalibrationModel, CalibrationError> {
    CalibrationProblem::new(dev, feature, agg, pipeline, normalize)?.fit(fixed_tau)
}
