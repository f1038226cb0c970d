//! Per-utterance scoring and labeling: transform, score, align.

use rayon::prelude::*;
use thiserror::Error;

use crate::alignment::{align_words, AlignmentSummary, NormalizeFlags, WordLabel};
use crate::data::UtteranceRecord;
use crate::features::{score_utterance, AggKind, FeatureError, FeatureKind, ScoredWord};
use crate::transform::{transform_pipeline, Temperature, TransformError};

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("utterance '{utt_id}': {source}")]
    Transform {
        utt_id: String,
        #[source]
        source: TransformError,
    },
    #[error("utterance '{utt_id}': {source}")]
    Feature {
        utt_id: String,
        #[source]
        source: FeatureError,
    },
}

/// Which runs feed the word scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOptions {
    /// Average the selected runs; otherwise exactly one run is used.
    pub combine: bool,
    /// Run indices; `None` means all runs when combining, run 0 otherwise.
    pub subset: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreConfig {
    pub feature: FeatureKind,
    pub agg: AggKind,
    pub tau: Option<Temperature>,
    pub pipeline: PipelineOptions,
    pub normalize: NormalizeFlags,
}

impl ScoreConfig {
    pub fn new(feature: FeatureKind, agg: AggKind) -> Self {
        Self {
            feature,
            agg,
            tau: None,
            pipeline: PipelineOptions::default(),
            normalize: NormalizeFlags::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceResult {
    pub utt_id: String,
    pub words: Vec<ScoredWord>,
    pub labels: Vec<WordLabel>,
    pub summary: AlignmentSummary,
}

/// Word scores for one utterance under `config` (alignment is not run).
pub fn score_record(
    record: &UtteranceRecord,
    vocab_size: usize,
    config: &ScoreConfig,
) -> Result<Vec<ScoredWord>, PipelineError> {
    let run = transform_pipeline(
        record,
        vocab_size,
        config.tau,
        config.pipeline.combine,
        config.pipeline.subset.as_deref(),
    )
    .map_err(|source| PipelineError::Transform {
        utt_id: record.utt_id.clone(),
        source,
    })?;
    score_utterance(record, &run, vocab_size, config.feature, config.agg).map_err(|source| {
        PipelineError::Feature {
            utt_id: record.utt_id.clone(),
            source,
        }
    })
}

/// Word scores plus alignment labels for one utterance.
pub fn evaluate_record(
    record: &UtteranceRecord,
    vocab_size: usize,
    config: &ScoreConfig,
) -> Result<UtteranceResult, PipelineError> {
    let words = score_record(record, vocab_size, config)?;
    let (labels, summary) = align_words(&record.hyp_words, &record.ref_words, config.normalize);
    Ok(UtteranceResult {
        utt_id: record.utt_id.clone(),
        words,
        labels,
        summary,
    })
}

/// Applies `f` to every record in parallel; results keep input order.
pub fn map_ordered<T, E, F>(records: &[UtteranceRecord], f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(&UtteranceRecord) -> Result<T, E> + Sync + Send,
{
    records.par_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PosteriorRun, TokenPosterior, WordSpan};

    fn record() -> UtteranceRecord {
        let run = |a: f64| PosteriorRun {
            run_id: "r".into(),
            steps: vec![
                TokenPosterior::Dense(vec![a, 1.0 - a]),
                TokenPosterior::Dense(vec![0.5, 0.5]),
            ],
        };
        UtteranceRecord {
            utt_id: "u".into(),
            hyp_tokens: vec![0, 1],
            word_boundaries: vec![WordSpan::new(0, 1), WordSpan::new(1, 2)],
            hyp_words: vec!["a".into(), "b".into()],
            ref_words: vec!["a".into(), "c".into()],
            runs: vec![run(0.9), run(0.7)],
        }
    }

    #[test]
    fn evaluates_single_run_by_default() {
        let cfg = ScoreConfig::new(FeatureKind::LogProba, AggKind::Sum);
        let res = evaluate_record(&record(), 2, &cfg).unwrap();
        assert_eq!(res.words[0].score, 0.9f64.ln());
        assert_eq!(
            res.labels.iter().map(|l| l.correct).collect::<Vec<_>>(),
            vec![true, false]
        );
        assert_eq!(res.summary.wer, 0.5);
    }

    #[test]
    fn combining_averages_runs() {
        let mut cfg = ScoreConfig::new(FeatureKind::LogProba, AggKind::Sum);
        cfg.pipeline.combine = true;
        let words = score_record(&record(), 2, &cfg).unwrap();
        assert!((words[0].score - 0.8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn errors_name_the_utterance() {
        let mut cfg = ScoreConfig::new(FeatureKind::LogProba, AggKind::Sum);
        cfg.pipeline.subset = Some(vec![0, 1]);
        let err = score_record(&record(), 2, &cfg).unwrap_err();
        assert!(err.to_string().contains("'u'"));
    }
}
