//! Helpers shared by the integration and acceptance tests: a handle on the
//! built binary and brute-force oracles.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wordconf"))
}

/// Runs the binary with `args` and returns its output.
pub fn run<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    bin().args(args).output().expect("binary runs")
}

pub fn run_with_workers<I, S>(workers: usize, args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    bin()
        .env("WORDCONF_WORKERS", workers.to_string())
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Runs `gen` into `dir` and panics on failure.
pub fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_eq!(code(&out), 0, "gen failed: {}", stderr(&out));
}

/// `--vocab DIR/vocab.txt --records DIR/records.jsonl`.
pub fn input_args(dir: &Path) -> Vec<String> {
    vec![
        "--vocab".into(),
        dir.join("vocab.txt").to_string_lossy().into_owned(),
        "--records".into(),
        dir.join("records.jsonl").to_string_lossy().into_owned(),
    ]
}

/// Pairwise AUROC: the fraction of (correct, erroneous) pairs where the
/// correct word scores higher, ties counted half.
pub fn auroc_oracle(scores: &[f64], correct: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if !correct[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if correct[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Average precision by enumerating every distinct threshold `t` and
/// predicting positive when `detection >= t`.
pub fn ap_oracle(detection: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut thresholds = detection.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = detection
            .iter()
            .zip(positive)
            .filter(|(&d, &p)| p && d >= t)
            .count();
        let predicted = detection.iter().filter(|&&d| d >= t).count();
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / predicted as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// AP with erroneous words as positives, detected by low scores.
pub fn ap_errors_oracle(scores: &[f64], correct: &[bool]) -> Option<f64> {
    let detection: Vec<f64> = scores.iter().map(|s| -s).collect();
    let positive: Vec<bool> = correct.iter().map(|c| !c).collect();
    ap_oracle(&detection, &positive)
}

pub fn ap_correct_oracle(scores: &[f64], correct: &[bool]) -> Option<f64> {
    ap_oracle(scores, correct)
}

/// Edit distance by the textbook recursion, memoized on suffix positions.
pub fn edit_distance_oracle<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(
        a: &[T],
        b: &[T],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&d) = memo.get(&(i, j)) {
            return d;
        }
        let diag = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
        let d = diag
            .min(go(a, b, i + 1, j, memo) + 1)
            .min(go(a, b, i, j + 1, memo) + 1);
        memo.insert((i, j), d);
        d
    }
    go(a, b, 0, 0, &mut HashMap::new())
}
