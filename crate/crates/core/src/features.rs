//! Token-level confidence features and their aggregation to words.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{densify, PosteriorRun, UtteranceRecord};
use crate::numeric::{safe_ln, xlogx};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("cannot aggregate an empty list of token scores")]
    EmptyWord,
    #[error("run has {found} steps but the utterance has {expected} tokens")]
    StepCountMismatch { expected: usize, found: usize },
    #[error("unknown {kind} '{value}'")]
    UnknownKind { kind: &'static str, value: String },
}

/// Token feature extracted from one posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// `log max p`
    LogProba,
    /// `sum_i p_i log p_i`
    NegEntropy,
}

/// Pooling of token scores into a word score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggKind {
    Sum,
    Min,
    Avg,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 2] = [FeatureKind::LogProba, FeatureKind::NegEntropy];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::LogProba => "log-proba",
            FeatureKind::NegEntropy => "neg-entropy",
        }
    }
}

impl AggKind {
    pub const ALL: [AggKind; 3] = [AggKind::Sum, AggKind::Min, AggKind::Avg];

    pub fn as_str(self) -> &'static str {
        match self {
            AggKind::Sum => "sum",
            AggKind::Min => "min",
            AggKind::Avg => "avg",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| FeatureError::UnknownKind {
                kind: "feature",
                value: s.to_string(),
            })
    }
}

impl FromStr for AggKind {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AggKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| FeatureError::UnknownKind {
                kind: "aggregation",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredToken {
    pub position: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredWord {
    pub word_index: usize,
    pub score: f64,
    pub n_tokens: usize,
}

/// Confidence feature of a single token posterior; always in `[-ln V, 0]`.
///
/// Both features are clamped to the bounds they satisfy in real arithmetic
/// (`-ln V <= log max p`, and negative entropy in `[-ln V, log max p]`), so
/// rounding cannot break them.
pub fn token_feature(p: &[f64], kind: FeatureKind) -> f64 {
    let floor = -(p.len() as f64).ln();
    let log_max = safe_ln(p.iter().copied().fold(0.0, f64::max)).max(floor);
    match kind {
        FeatureKind::LogProba => log_max,
        FeatureKind::NegEntropy => p
            .iter()
            .map(|&pi| xlogx(pi))
            .sum::<f64>()
            .clamp(floor, log_max),
    }
}

/// Pools token scores. The average is kept inside `[min, max]` of its
/// inputs so rounding cannot push it past the minimum.
pub fn aggregate_word(token_scores: &[f64], kind: AggKind) -> Result<f64, FeatureError> {
    if token_scores.is_empty() {
        return Err(FeatureError::EmptyWord);
    }
    let min = token_scores.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(match kind {
        AggKind::Sum => token_scores.iter().sum(),
        AggKind::Min => min,
        AggKind::Avg => {
            let max = token_scores
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            (token_scores.iter().sum::<f64>() / token_scores.len() as f64).clamp(min, max)
        }
    })
}

/// Token scores for every position of `run`.
pub fn score_tokens(
    run: &PosteriorRun,
    vocab_size: usize,
    feature: FeatureKind,
) -> Vec<ScoredToken> {
    run.steps
        .iter()
        .enumerate()
        .map(|(position, step)| ScoredToken {
            position,
            score: token_feature(&densify(step, vocab_size), feature),
        })
        .collect()
}

/// Scores every hypothesis word of `record` from the posteriors in `run`.
/// Tokens outside all word boundaries are ignored.
pub fn score_utterance(
    record: &UtteranceRecord,
    run: &PosteriorRun,
    vocab_size: usize,
    feature: FeatureKind,
    agg: AggKind,
) -> Result<Vec<ScoredWord>, FeatureError> {
    if run.steps.len() != record.n_tokens() {
        return Err(FeatureError::StepCountMismatch {
            expected: record.n_tokens(),
            found: run.steps.len(),
        });
    }
    let mut token_scores: Vec<Option<f64>> = vec![None; run.steps.len()];
    record
        .word_boundaries
        .iter()
        .enumerate()
        .map(|(word_index, span)| {
            let scores: Vec<f64> = span
                .positions()
                .map(|k| {
                    *token_scores[k].get_or_insert_with(|| {
                        token_feature(&densify(&run.steps[k], vocab_size), feature)
                    })
                })
                .collect();
            Ok(ScoredWord {
                word_index,
                score: aggregate_word(&scores, agg)?,
                n_tokens: span.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{TokenPosterior, WordSpan};
    use proptest::prelude::*;

    #[test]
    fn dirac_scores_zero() {
        let p = [0.0, 0.0, 1.0];
        assert_eq!(token_feature(&p, FeatureKind::LogProba), 0.0);
        assert_eq!(token_feature(&p, FeatureKind::NegEntropy), 0.0);
    }

    #[test]
    fn uniform_neg_entropy() {
        let p = [0.25; 4];
        assert!((token_feature(&p, FeatureKind::NegEntropy) + 4f64.ln()).abs() < 1e-12);
        assert!((token_feature(&p, FeatureKind::NegEntropy) + 1.386294).abs() < 1e-6);
    }

    #[test]
    fn uniform_bounds_survive_rounding() {
        for v in 2..300 {
            let p = vec![1.0 / v as f64; v];
            let lp = token_feature(&p, FeatureKind::LogProba);
            let ne = token_feature(&p, FeatureKind::NegEntropy);
            let floor = -(v as f64).ln();
            assert!(
                floor <= ne && ne <= lp && lp <= 0.0,
                "v={v}: {floor} {ne} {lp}"
            );
        }
    }

    #[test]
    fn three_way_posterior() {
        let p = [0.7, 0.2, 0.1];
        assert!((token_feature(&p, FeatureKind::LogProba) - 0.7f64.ln()).abs() < 1e-15);
        let want = 0.7 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln();
        assert!((token_feature(&p, FeatureKind::NegEntropy) - want).abs() < 1e-15);
    }

    #[test]
    fn aggregation_examples() {
        let s = [-0.5, -0.2, -0.3];
        assert!((aggregate_word(&s, AggKind::Sum).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(aggregate_word(&s, AggKind::Min).unwrap(), -0.5);
        assert!((aggregate_word(&s, AggKind::Avg).unwrap() + 1.0 / 3.0).abs() < 1e-15);
        for kind in AggKind::ALL {
            assert_eq!(aggregate_word(&[-0.7], kind).unwrap(), -0.7);
        }
        assert_eq!(
            aggregate_word(&[], AggKind::Sum),
            Err(FeatureError::EmptyWord)
        );
    }

    #[test]
    fn average_of_equal_values_stays_put() {
        // 3 * -0.1 rounds below -0.3; the mean must not dip under the min
        let s = [-0.1, -0.1, -0.1];
        assert_eq!(aggregate_word(&s, AggKind::Avg).unwrap(), -0.1);
    }

    #[test]
    fn kinds_parse_round_trip() {
        for k in FeatureKind::ALL {
            assert_eq!(k.as_str().parse::<FeatureKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        for k in AggKind::ALL {
            assert_eq!(k.as_str().parse::<AggKind>().unwrap(), k);
        }
        assert!("max".parse::<AggKind>().is_err());
    }

    fn utterance(
        steps: Vec<Vec<f64>>,
        spans: Vec<(usize, usize)>,
    ) -> (UtteranceRecord, PosteriorRun) {
        let run = PosteriorRun {
            run_id: "0".into(),
            steps: steps.into_iter().map(TokenPosterior::Dense).collect(),
        };
        let rec = UtteranceRecord {
            utt_id: "u".into(),
            hyp_tokens: vec![0; run.steps.len()],
            word_boundaries: spans.iter().map(|&s| s.into()).collect(),
            hyp_words: spans.iter().map(|_| "w".to_string()).collect(),
            ref_words: vec![],
            runs: vec![run.clone()],
        };
        (rec, run)
    }

    #[test]
    fn single_dirac_word() {
        let (rec, run) = utterance(vec![vec![0.0, 1.0, 0.0]], vec![(0, 1)]);
        for f in FeatureKind::ALL {
            for a in AggKind::ALL {
                let words = score_utterance(&rec, &run, 3, f, a).unwrap();
                assert_eq!(words.len(), 1);
                assert_eq!(words[0].score, 0.0);
            }
        }
    }

    #[test]
    fn three_uniform_tokens_summed() {
        let (rec, run) = utterance(vec![vec![0.25; 4]; 3], vec![(0, 3)]);
        let words = score_utterance(&rec, &run, 4, FeatureKind::NegEntropy, AggKind::Sum).unwrap();
        assert!((words[0].score + 3.0 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(words[0].n_tokens, 3);
    }

    #[test]
    fn mixed_utterance_matches_hand_composition() {
        let steps = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.5, 0.25, 0.25],
            vec![0.9, 0.05, 0.05],
            vec![1.0, 0.0, 0.0],
        ];
        // token 3 is an uncovered end marker
        let (rec, run) = utterance(steps.clone(), vec![(0, 2), (2, 3)]);
        for f in FeatureKind::ALL {
            let tok: Vec<f64> = steps.iter().map(|p| token_feature(p, f)).collect();
            for a in AggKind::ALL {
                let words = score_utterance(&rec, &run, 3, f, a).unwrap();
                assert_eq!(words.len(), 2);
                assert_eq!(words[0].score, aggregate_word(&tok[0..2], a).unwrap());
                assert_eq!(words[1].score, aggregate_word(&tok[2..3], a).unwrap());
                assert_eq!(words[1].word_index, 1);
            }
        }
        let lp = score_utterance(&rec, &run, 3, FeatureKind::LogProba, AggKind::Sum).unwrap();
        assert!((lp[0].score - (0.7f64.ln() + 0.5f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn step_count_is_checked() {
        let (rec, mut run) = utterance(vec![vec![0.5, 0.5]; 2], vec![(0, 2)]);
        run.steps.pop();
        assert!(matches!(
            score_utterance(&rec, &run, 2, FeatureKind::LogProba, AggKind::Sum),
            Err(FeatureError::StepCountMismatch { .. })
        ));
    }

    #[test]
    fn sparse_steps_are_densified() {
        let run = PosteriorRun {
            run_id: "0".into(),
            steps: vec![TokenPosterior::Sparse {
                entries: vec![(0, 0.7)],
                rest: 0.3,
            }],
        };
        let rec = UtteranceRecord {
            utt_id: "u".into(),
            hyp_tokens: vec![0],
            word_boundaries: vec![WordSpan::new(0, 1)],
            hyp_words: vec!["w".into()],
            ref_words: vec![],
            runs: vec![run.clone()],
        };
        let w = score_utterance(&rec, &run, 4, FeatureKind::NegEntropy, AggKind::Sum).unwrap();
        let want = 0.7 * 0.7f64.ln() + 3.0 * 0.1 * 0.1f64.ln();
        assert!((w[0].score - want).abs() < 1e-12);
    }

    fn prob_vector() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..200).prop_filter_map("non-zero mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn feature_bounds_and_order(p in prob_vector()) {
            let lp = token_feature(&p, FeatureKind::LogProba);
            let ne = token_feature(&p, FeatureKind::NegEntropy);
            let floor = -(p.len() as f64).ln() - 1e-9;
            prop_assert!(lp <= 0.0 && ne <= 0.0);
            prop_assert!(ne >= floor);
            prop_assert!(ne <= lp);
        }

        #[test]
        fn aggregation_order(scores in prop::collection::vec(-50.0f64..=0.0, 1..20)) {
            let sum = aggregate_word(&scores, AggKind::Sum).unwrap();
            let min = aggregate_word(&scores, AggKind::Min).unwrap();
            let avg = aggregate_word(&scores, AggKind::Avg).unwrap();
            prop_assert!(sum <= min && min <= avg);
        }
    }
}
