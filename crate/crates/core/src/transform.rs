//! Probability-improvement operators: temperature scaling and averaging over
//! stochastic runs (dropout samples or ensemble members).

use std::fmt;

use thiserror::Error;

use crate::data::{densify, PosteriorRun, TokenPosterior, UtteranceRecord};

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("run subset is empty")]
    EmptySubset,
    #[error("run index {index} out of range ({available} runs available)")]
    RunOutOfRange { index: usize, available: usize },
    #[error("run {index} has {found} steps, expected {expected}")]
    StepCountMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("without run combination exactly one run must be selected, got {0}")]
    SingleRunRequired(usize),
}

/// Softmax temperature; always positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(tau: f64) -> Result<Self, TransformError> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(TransformError::InvalidTemperature(tau))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = TransformError;

    fn try_from(tau: f64) -> Result<Self, Self::Error> {
        Temperature::new(tau)
    }
}

/// Rescales `p` as `softmax(log(p) / tau)`, i.e. `p_i^(1/tau)` renormalized.
///
/// Computed in the log domain with a max shift. Zero entries stay exactly
/// zero (their log is `-inf` at every temperature). `tau = 1` returns `p`
/// unchanged.
pub fn temperature_scale(p: &[f64], tau: Temperature) -> Vec<f64> {
    if tau.0 == 1.0 {
        return p.to_vec();
    }
    let inv = 1.0 / tau.0;
    let scaled: Vec<f64> = p
        .iter()
        .map(|&pi| {
            if pi > 0.0 {
                pi.ln() * inv
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return p.to_vec();
    }
    let mut out: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let norm: f64 = out.iter().sum();
    for v in &mut out {
        *v /= norm;
    }
    out
}

/// Element-wise mean of the densified steps of the selected runs.
///
/// The output run id records the subset, e.g. `mean(0,2,5)`; a single
/// selected run keeps its own id.
pub fn average_runs(
    runs: &[PosteriorRun],
    subset: &[usize],
    vocab_size: usize,
) -> Result<PosteriorRun, TransformError> {
    let dense = select_dense(runs, subset, vocab_size, None)?;
    let run_id = run_label(runs, subset);
    Ok(PosteriorRun {
        run_id,
        steps: mean_steps(dense)
            .into_iter()
            .map(TokenPosterior::Dense)
            .collect(),
    })
}

fn run_label(runs: &[PosteriorRun], subset: &[usize]) -> String {
    if let [only] = subset {
        return runs[*only].run_id.clone();
    }
    let ids: Vec<String> = subset.iter().map(usize::to_string).collect();
    format!("mean({})", ids.join(","))
}

/// Densifies (and optionally temperature-scales) every step of the selected
/// runs. Returns one `Vec<step>` per selected run.
fn select_dense(
    runs: &[PosteriorRun],
    subset: &[usize],
    vocab_size: usize,
    tau: Option<Temperature>,
) -> Result<Vec<Vec<Vec<f64>>>, TransformError> {
    if subset.is_empty() {
        return Err(TransformError::EmptySubset);
    }
    let expected = runs.get(subset[0]).map(|r| r.steps.len());
    let mut out = Vec::with_capacity(subset.len());
    for &index in subset {
        let run = runs.get(index).ok_or(TransformError::RunOutOfRange {
            index,
            available: runs.len(),
        })?;
        if let Some(expected) = expected {
            if run.steps.len() != expected {
                return Err(TransformError::StepCountMismatch {
                    index,
                    expected,
                    found: run.steps.len(),
                });
            }
        }
        let steps = run
            .steps
            .iter()
            .map(|step| {
                let dense = densify(step, vocab_size);
                match tau {
                    Some(tau) => temperature_scale(&dense, tau),
                    None => dense,
                }
            })
            .collect();
        out.push(steps);
    }
    Ok(out)
}

fn mean_steps(mut runs: Vec<Vec<Vec<f64>>>) -> Vec<Vec<f64>> {
    let n = runs.len();
    if n == 1 {
        return runs.pop().unwrap_or_default();
    }
    let mut acc = runs[0].clone();
    for run in &runs[1..] {
        for (acc_step, step) in acc.iter_mut().zip(run) {
            for (a, &p) in acc_step.iter_mut().zip(step) {
                *a += p;
            }
        }
    }
    let scale = n as f64;
    for step in &mut acc {
        for a in step.iter_mut() {
            *a /= scale;
        }
    }
    acc
}

/// Temperature-scales every step of the selected runs, then (when `combine`)
/// averages them. The order is fixed: scale first, average second.
///
/// `subset` defaults to all runs when combining and to run 0 otherwise.
/// Without `combine` the subset must name exactly one run.
pub fn transform_pipeline(
    record: &UtteranceRecord,
    vocab_size: usize,
    tau: Option<Temperature>,
    combine: bool,
    subset: Option<&[usize]>,
) -> Result<PosteriorRun, TransformError> {
    let all: Vec<usize>;
    let subset = match subset {
        Some(s) => s,
        None if combine => {
            all = (0..record.runs.len()).collect();
            &all
        }
        None => &[0],
    };
    if !combine && subset.len() != 1 {
        return Err(TransformError::SingleRunRequired(subset.len()));
    }
    let dense = select_dense(&record.runs, subset, vocab_size, tau)?;
    let mut run_id = run_label(&record.runs, subset);
    if let Some(tau) = tau {
        run_id = format!("{run_id}@tau={tau}");
    }
    Ok(PosteriorRun {
        run_id,
        steps: mean_steps(dense)
            .into_iter()
            .map(TokenPosterior::Dense)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WordSpan;
    use crate::numeric::{argmax, softmax};
    use proptest::prelude::*;

    fn tau(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    fn dense_run(id: &str, steps: Vec<Vec<f64>>) -> PosteriorRun {
        PosteriorRun {
            run_id: id.into(),
            steps: steps.into_iter().map(TokenPosterior::Dense).collect(),
        }
    }

    fn dense_steps(run: &PosteriorRun) -> Vec<Vec<f64>> {
        run.steps
            .iter()
            .map(|s| match s {
                TokenPosterior::Dense(v) => v.clone(),
                other => panic!("expected dense, got {other:?}"),
            })
            .collect()
    }

    fn record(runs: Vec<PosteriorRun>) -> UtteranceRecord {
        let t = runs[0].steps.len();
        UtteranceRecord {
            utt_id: "u".into(),
            hyp_tokens: vec![0; t],
            word_boundaries: vec![WordSpan::new(0, t)],
            hyp_words: vec!["w".into()],
            ref_words: vec!["w".into()],
            runs,
        }
    }

    #[test]
    fn rejects_bad_temperatures() {
        for t in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(Temperature::new(t).is_err(), "{t}");
        }
    }

    #[test]
    fn unit_temperature_is_identity() {
        let p = [0.5, 0.25, 0.25];
        assert_eq!(temperature_scale(&p, Temperature::ONE), p.to_vec());
    }

    #[test]
    fn half_temperature_squares() {
        // p_i^2 / sum p_j^2 = 0.64/0.68, 0.04/0.68
        let out = temperature_scale(&[0.8, 0.2], tau(0.5));
        assert!((out[0] - 0.64 / 0.68).abs() < 1e-12);
        assert!((out[1] - 0.04 / 0.68).abs() < 1e-12);
        assert!((out[0] - 0.941176470588).abs() < 1e-9);
    }

    #[test]
    fn huge_temperature_flattens() {
        let out = temperature_scale(&[0.8, 0.2], tau(1e6));
        for v in out {
            assert!((v - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn zeros_stay_zero() {
        let out = temperature_scale(&[0.0, 0.3, 0.7], tau(7.0));
        assert_eq!(out[0], 0.0);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let out = temperature_scale(&[0.0, 0.0, 1.0], tau(0.01));
        assert_eq!(out, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn average_examples() {
        let a = dense_run("a", vec![vec![1.0, 0.0]]);
        let b = dense_run("b", vec![vec![0.0, 1.0]]);
        let runs = vec![a.clone(), b];
        assert_eq!(average_runs(&runs, &[0], 2).unwrap(), a);
        let mean = average_runs(&runs, &[0, 1], 2).unwrap();
        assert_eq!(dense_steps(&mean), vec![vec![0.5, 0.5]]);
        assert_eq!(mean.run_id, "mean(0,1)");

        let x = dense_run("x", vec![vec![0.1, 0.2, 0.7], vec![0.3, 0.3, 0.4]]);
        let same = vec![x.clone(), x.clone(), x.clone()];
        let mean = average_runs(&same, &[0, 1, 2], 3).unwrap();
        for (got, want) in dense_steps(&mean).iter().zip(dense_steps(&x)) {
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn average_errors() {
        let a = dense_run("a", vec![vec![1.0, 0.0]]);
        let b = dense_run("b", vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let runs = vec![a, b];
        assert_eq!(
            average_runs(&runs, &[], 2),
            Err(TransformError::EmptySubset)
        );
        assert_eq!(
            average_runs(&runs, &[0, 1], 2),
            Err(TransformError::StepCountMismatch {
                index: 1,
                expected: 1,
                found: 2
            })
        );
        assert!(matches!(
            average_runs(&runs, &[5], 2),
            Err(TransformError::RunOutOfRange { index: 5, .. })
        ));
    }

    #[test]
    fn pipeline_identity_without_options() {
        let sparse = PosteriorRun {
            run_id: "0".into(),
            steps: vec![TokenPosterior::Sparse {
                entries: vec![(0, 0.7)],
                rest: 0.3,
            }],
        };
        let rec = record(vec![sparse]);
        let out = transform_pipeline(&rec, 4, None, false, None).unwrap();
        let steps = dense_steps(&out);
        assert_eq!(steps[0][0], 0.7);
        assert!((steps[0][3] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn pipeline_unit_temperature_over_identical_runs() {
        let x = dense_run("x", vec![vec![0.1, 0.2, 0.7]]);
        let rec = record(vec![x.clone(), x.clone(), x.clone(), x.clone()]);
        let out = transform_pipeline(&rec, 3, Some(Temperature::ONE), true, None).unwrap();
        for (g, w) in dense_steps(&out)[0].iter().zip([0.1, 0.2, 0.7]) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn pipeline_scales_before_averaging() {
        let a = dense_run("a", vec![vec![0.8, 0.2]]);
        let b = dense_run("b", vec![vec![0.4, 0.6]]);
        let rec = record(vec![a, b]);
        let out = transform_pipeline(&rec, 2, Some(tau(0.5)), true, None).unwrap();
        // Oracle: square-and-normalize each run, then take the mean.
        let sa = [0.64 / 0.68, 0.04 / 0.68];
        let sb = [0.16 / 0.52, 0.36 / 0.52];
        let want = [(sa[0] + sb[0]) / 2.0, (sa[1] + sb[1]) / 2.0];
        let got = &dense_steps(&out)[0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        // averaging first would give a different answer
        let avg_first = temperature_scale(&[0.6, 0.4], tau(0.5));
        assert!((avg_first[0] - got[0]).abs() > 1e-3);
    }

    #[test]
    fn pipeline_requires_single_run_without_combine() {
        let x = dense_run("x", vec![vec![0.5, 0.5]]);
        let rec = record(vec![x.clone(), x]);
        assert_eq!(
            transform_pipeline(&rec, 2, None, false, Some(&[0, 1])),
            Err(TransformError::SingleRunRequired(2))
        );
        assert!(transform_pipeline(&rec, 2, None, false, Some(&[1])).is_ok());
    }

    fn prob_vector() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..40).prop_filter_map("non-zero mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn logit_equivalence(z in prop::collection::vec(-30.0f64..30.0, 2..50), t in 0.05f64..20.0) {
            let t = tau(t);
            let via_probs = temperature_scale(&softmax(&z), t);
            let scaled: Vec<f64> = z.iter().map(|v| v / t.value()).collect();
            let direct = softmax(&scaled);
            for (a, b) in via_probs.iter().zip(&direct) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn argmax_and_mass_preserved(p in prob_vector(), t in 0.05f64..20.0) {
            let out = temperature_scale(&p, tau(t));
            prop_assert_eq!(argmax(&out), argmax(&p));
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(out.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn lower_temperature_sharpens(p in prob_vector(), a in 0.05f64..20.0, b in 0.05f64..20.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let max_lo = temperature_scale(&p, tau(lo)).into_iter().fold(0.0, f64::max);
            let max_hi = temperature_scale(&p, tau(hi)).into_iter().fold(0.0, f64::max);
            prop_assert!(max_lo >= max_hi - 1e-12);
        }

        #[test]
        fn average_is_permutation_invariant(
            rows in prop::collection::vec(prob_vector(), 2..6),
            seed in 0usize..1000,
        ) {
            let v = rows[0].len();
            let runs: Vec<PosteriorRun> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let mut row = r.clone();
                    row.resize(v, 0.0);
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|x| *x /= s);
                    dense_run(&i.to_string(), vec![row])
                })
                .collect();
            let forward: Vec<usize> = (0..runs.len()).collect();
            let mut shuffled = forward.clone();
            shuffled.rotate_left(seed % runs.len());
            shuffled.reverse();
            let a = dense_steps(&average_runs(&runs, &forward, v).unwrap());
            let b = dense_steps(&average_runs(&runs, &shuffled, v).unwrap());
            for (x, y) in a[0].iter().zip(&b[0]) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a[0].iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
