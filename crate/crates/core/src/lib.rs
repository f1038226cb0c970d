//! Word-level confidence scoring for end-to-end speech recognizers.
//!
//! The crate starts from per-token posterior distributions produced by a
//! recognizer under a fixed hypothesis, and turns them into word-level
//! confidence scores:
//!
//! 1. optional temperature scaling of each token posterior ([`transform`]),
//! 2. optional averaging over dropout runs or ensemble members ([`transform`]),
//! 3. token feature extraction and word aggregation ([`features`]),
//! 4. logistic calibration of the word score ([`calibration`]).
//!
//! Correctness labels come from a minimum-edit-distance alignment of the
//! hypothesis against the reference ([`alignment`]); [`metrics`] evaluates
//! the scores with AUPR (errors and successes as positives) and AUROC.
//! [`synth`] generates seeded synthetic corpora for end-to-end testing.

pub mod alignment;
pub mod calibration;
pub mod data;
pub mod features;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod synth;
pub mod transform;

pub use alignment::{align_words, AlignKind, AlignmentSummary, NormalizeFlags, WordLabel};
pub use calibration::{apply_calibration, fit_calibration, CalibrationError, CalibrationModel};
pub use data::{
    densify, parse_dataset, DataError, Dataset, PosteriorRun, TokenPosterior, UtteranceRecord,
    Vocabulary, WordSpan,
};
pub use features::{
    aggregate_word, score_utterance, token_feature, AggKind, FeatureKind, ScoredWord,
};
pub use metrics::{auroc, average_precision, EvalReport, LabeledScore, MetricError, Positives};
pub use pipeline::{PipelineOptions, ScoreConfig};
pub use transform::{
    average_runs, temperature_scale, transform_pipeline, Temperature, TransformError,
};
