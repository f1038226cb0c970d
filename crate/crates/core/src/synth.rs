//! Seeded synthetic corpora with known error structure.
//!
//! # Generation algorithm
//!
//! Randomness comes from ChaCha8 seeded with `seed` via
//! `SeedableRng::seed_from_u64`; utterance `i` draws from stream `i` of that
//! key (`set_stream(i)`), so utterances can be produced in any order or in
//! parallel with identical output. Uniforms take the top 53 bits of a
//! 64-bit draw, exponentials are `-ln(1 - U)`, and normals use Box-Muller
//! (one pair per call, second value discarded).
//!
//! For each utterance:
//!
//! 1. the word count is uniform in `[min_words, max_words]`;
//! 2. each word has `L = min(8, 1 + Geometric(1 / mean_word_len))` tokens
//!    drawn uniformly from the word tokens `1..V` (token 0 is `</s>`);
//! 3. with `e_L = clamp(token_error_rate + length_error_slope * (L - 1), 0, 1)`,
//!    `rc = peak_rate_correct` and `re = peak_rate_error`, the word is correct
//!    with probability `sigmoid(logit(1 - e_L) - (L - 1) ln(rc / re))`
//!    (always if `e_L = 0`, never if `e_L = 1`);
//! 4. each token's peak probability is `c = max(exp(-X), 1 / V)` with
//!    `X ~ Exp(rc)` in a correct word and `X ~ Exp(re)` in an erroneous one.
//!    Without a length slope, and ignoring the rare `1 / V` floor, steps 3
//!    and 4 make `P(correct | c_1..c_L) = sigmoid((rc - re) sum ln c_i + b)`
//!    with `b = logit(1 - token_error_rate) + ln(rc / re)`;
//! 5. in an erroneous word the token with the lowest `c` is replaced by a
//!    different word token, and every other token is replaced with
//!    probability `e_L`;
//! 6. the emitted token gets `c`. A uniform fraction of the remaining `1 - c`
//!    is spread evenly over all non-listed tokens, the rest goes to up to 4
//!    competitors (weights `Exp(1)`; the reference token is the first
//!    competitor of a replaced token and gets `+1` weight). Anything above
//!    `c` is handed to the entries below it, so the emitted token stays the
//!    argmax;
//! 7. every run multiplies each competitor, the emitted token, and the
//!    uniform part by `exp(run_noise * N(0, 1))` and renormalizes;
//! 8. miscalibration: `p -> normalize(p ^ sharpen)`, the inverse of
//!    temperature scaling at `tau = sharpen`;
//! 9. a final `</s>` token with a correct-word peak closes the utterance.
//!
//! A word's string is the concatenation of the emitted tokens' fixed-width
//! surfaces. An erroneous word is suffixed with `~` if it would otherwise
//! coincide with a reference word of the utterance. Erroneous hypothesis
//! words therefore never match any reference word, which makes the diagonal
//! alignment the unique optimum and the alignment labels equal the
//! generator's labels.

use std::collections::HashSet;
use std::io::{self, Write};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    DataError, Dataset, PosteriorRun, TokenPosterior, UtteranceRecord, Vocabulary, WordSpan,
};
use crate::numeric::{logit, sigmoid};

pub const EOS: &str = "</s>";
const MAX_WORD_LEN: usize = 8;
const MAX_COMPETITORS: usize = 4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {field}: {message}")]
    InvalidConfig {
        field: &'static str,
        message: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_utts: usize,
    pub vocab_size: usize,
    /// Mean tokens per word before the cap at 8.
    pub mean_word_len: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub token_error_rate: f64,
    /// Extra per-token error probability per additional token in the word.
    pub length_error_slope: f64,
    /// Rate of `-ln c` for tokens of correct words, `c` being the emitted
    /// token's probability.
    pub peak_rate_correct: f64,
    /// Rate of `-ln c` for tokens of erroneous words.
    pub peak_rate_error: f64,
    /// Ground-truth temperature: posteriors are emitted as `p ^ sharpen`.
    pub sharpen: f64,
    pub n_runs: usize,
    /// Log-space standard deviation of the per-run perturbation.
    pub run_noise: f64,
    /// Emit top-k sparse steps instead of dense ones.
    pub topk: Option<usize>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_utts: 200,
            vocab_size: 200,
            mean_word_len: 1.6,
            min_words: 3,
            max_words: 12,
            token_error_rate: 0.08,
            length_error_slope: 0.0,
            peak_rate_correct: 10.0,
            peak_rate_error: 4.0,
            sharpen: 1.0,
            n_runs: 1,
            run_noise: 0.0,
            topk: None,
            seed: 42,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field, message: String| Err(SynthError::InvalidConfig { field, message });
        if self.n_utts == 0 {
            return bad("n_utts", "must be positive".into());
        }
        if self.vocab_size < 2 {
            return bad(
                "vocab_size",
                format!("must be at least 2, got {}", self.vocab_size),
            );
        }
        if !(self.mean_word_len >= 1.0 && self.mean_word_len.is_finite()) {
            return bad(
                "mean_word_len",
                format!("must be a finite value >= 1, got {}", self.mean_word_len),
            );
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad(
                "words_per_utt",
                format!(
                    "need 1 <= min_words <= max_words, got {}..{}",
                    self.min_words, self.max_words
                ),
            );
        }
        if !(0.0..=1.0).contains(&self.token_error_rate) {
            return bad(
                "token_error_rate",
                format!("must be in [0, 1], got {}", self.token_error_rate),
            );
        }
        if !(self.length_error_slope >= 0.0 && self.length_error_slope.is_finite()) {
            return bad(
                "length_error_slope",
                format!("must be finite and >= 0, got {}", self.length_error_slope),
            );
        }
        if !(self.peak_rate_correct > 0.0 && self.peak_rate_correct.is_finite()) {
            return bad(
                "peak_rate_correct",
                format!("must be positive, got {}", self.peak_rate_correct),
            );
        }
        if !(self.peak_rate_error > 0.0 && self.peak_rate_error.is_finite()) {
            return bad(
                "peak_rate_error",
                format!("must be positive, got {}", self.peak_rate_error),
            );
        }
        if !(self.sharpen > 0.0 && self.sharpen.is_finite()) {
            return bad("sharpen", format!("must be positive, got {}", self.sharpen));
        }
        if self.n_runs == 0 {
            return bad("n_runs", "must be positive".into());
        }
        if !(self.run_noise >= 0.0 && self.run_noise.is_finite()) {
            return bad(
                "run_noise",
                format!("must be finite and >= 0, got {}", self.run_noise),
            );
        }
        if self.topk == Some(0) {
            return bad("topk", "must be positive".into());
        }
        Ok(())
    }
}

/// Per-utterance random stream.
struct Stream(ChaCha8Rng);

impl Stream {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Uniform in `[0, 1)`.
    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`.
    fn uniform_open(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn exponential(&mut self) -> f64 {
        -self.uniform_open().ln()
    }

    fn geometric_len(&mut self, mean: f64) -> usize {
        let p = 1.0 / mean;
        let mut len = 1;
        while len < MAX_WORD_LEN && self.uniform() >= p {
            len += 1;
        }
        len
    }
}

/// Explicitly listed tokens plus an equal-mass floor over all other tokens.
#[derive(Debug, Clone)]
struct TokenDist {
    explicit: Vec<(usize, f64)>,
    floor_each: f64,
    floor_count: usize,
}

impl TokenDist {
    fn normalize(&mut self) {
        let total: f64 = self.explicit.iter().map(|e| e.1).sum::<f64>()
            + self.floor_each * self.floor_count as f64;
        for e in &mut self.explicit {
            e.1 /= total;
        }
        self.floor_each /= total;
    }

    fn perturbed(&self, noise: f64, rng: &mut Stream) -> TokenDist {
        let mut out = self.clone();
        for e in &mut out.explicit {
            e.1 *= (noise * rng.normal()).exp();
        }
        out.floor_each *= (noise * rng.normal()).exp();
        out.normalize();
        out
    }

    fn powered(&self, exponent: f64) -> TokenDist {
        let mut out = self.clone();
        if exponent == 1.0 {
            return out;
        }
        // work in the log domain relative to the largest entry
        let max = self
            .explicit
            .iter()
            .map(|e| e.1)
            .chain((self.floor_count > 0).then_some(self.floor_each))
            .fold(0.0, f64::max);
        let pow = |p: f64| {
            if p > 0.0 {
                (exponent * (p / max).ln()).exp()
            } else {
                0.0
            }
        };
        for e in &mut out.explicit {
            e.1 = pow(e.1);
        }
        out.floor_each = pow(self.floor_each);
        out.normalize();
        out
    }

    fn to_dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut out = vec![
            if self.floor_count > 0 {
                self.floor_each
            } else {
                0.0
            };
            vocab_size
        ];
        for &(i, p) in &self.explicit {
            out[i] = p;
        }
        out
    }

    fn to_topk(&self, k: usize) -> TokenPosterior {
        let explicit_idx: HashSet<usize> = self.explicit.iter().map(|e| e.0).collect();
        let mut cands = self.explicit.clone();
        if self.floor_count > 0 {
            cands.extend(
                (0..)
                    .filter(|i| !explicit_idx.contains(i))
                    .take(k.min(self.floor_count))
                    .map(|i| (i, self.floor_each)),
            );
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(k);
        let listed_floor = cands
            .iter()
            .filter(|c| !explicit_idx.contains(&c.0))
            .count();
        let listed: HashSet<usize> = cands.iter().map(|c| c.0).collect();
        let rest = self
            .explicit
            .iter()
            .filter(|e| !listed.contains(&e.0))
            .map(|e| e.1)
            .sum::<f64>()
            + self.floor_each * (self.floor_count - listed_floor) as f64;
        TokenPosterior::Sparse {
            entries: cands,
            rest,
        }
    }
}

struct WordPlan {
    ref_tokens: Vec<usize>,
    hyp_tokens: Vec<usize>,
    peaks: Vec<f64>,
    correct: bool,
}

fn surface(token: usize, width: usize) -> String {
    if token == 0 {
        return EOS.to_string();
    }
    let mut code = token - 1;
    let mut chars = vec![b'a'; width];
    for slot in chars.iter_mut().rev() {
        *slot = b'a' + (code % 26) as u8;
        code /= 26;
    }
    String::from_utf8(chars).expect("ascii")
}

fn surface_width(vocab_size: usize) -> usize {
    let mut width = 1;
    let mut cap = 26usize;
    while cap < vocab_size - 1 {
        width += 1;
        cap = cap.saturating_mul(26);
    }
    width
}

/// Vocabulary used by the generator: `</s>` followed by fixed-width
/// lowercase codes.
pub fn vocabulary(vocab_size: usize) -> Result<Vocabulary, DataError> {
    let width = surface_width(vocab_size.max(2));
    Vocabulary::new((0..vocab_size).map(|i| surface(i, width)).collect())
}

fn error_rate(config: &GenConfig, len: usize) -> f64 {
    (config.token_error_rate + config.length_error_slope * (len - 1) as f64).clamp(0.0, 1.0)
}

/// Prior probability that a word of `len` tokens is correct.
///
/// Without a length slope this makes the posterior log-odds of correctness
/// given the peaks exactly `(rc - re) * sum_k ln c_k + logit(1 - e) + ln(rc / re)`,
/// whatever the length.
fn word_prior(config: &GenConfig, len: usize) -> f64 {
    let e_l = error_rate(config, len);
    if e_l <= 0.0 {
        return 1.0;
    }
    if e_l >= 1.0 {
        return 0.0;
    }
    let ratio = config.peak_rate_correct / config.peak_rate_error;
    sigmoid(logit(1.0 - e_l) - (len - 1) as f64 * ratio.ln())
}

/// Draws the emitted token's probability, never below `1 / v` so that it can
/// stay the argmax.
fn draw_peak(rate: f64, v: usize, rng: &mut Stream) -> f64 {
    (-rng.exponential() / rate).exp().max(1.0 / v as f64)
}

/// Builds a token distribution with peak `c` on `emitted`.
fn base_dist(
    v: usize,
    emitted: usize,
    c: f64,
    true_token: Option<usize>,
    rng: &mut Stream,
) -> TokenDist {
    let n_comp = MAX_COMPETITORS.min(v - 1);
    let mut competitors: Vec<usize> = Vec::with_capacity(n_comp);
    if let Some(t) = true_token.filter(|&t| t != emitted) {
        competitors.push(t);
    }
    while competitors.len() < n_comp {
        let cand = rng.below(v);
        if cand != emitted && !competitors.contains(&cand) {
            competitors.push(cand);
        }
    }
    let mut weights: Vec<f64> = competitors.iter().map(|_| rng.exponential()).collect();
    if true_token.is_some_and(|t| t != emitted) {
        weights[0] += 1.0;
    }
    let floor_count = v - 1 - n_comp;
    let rest = 1.0 - c;
    let floor_total = if floor_count > 0 {
        rng.uniform() * rest
    } else {
        0.0
    };
    let comp_total = rest - floor_total;
    let w_sum: f64 = weights.iter().sum();

    let mut probs: Vec<f64> = weights
        .iter()
        .map(|&w| {
            if w_sum > 0.0 {
                comp_total * w / w_sum
            } else {
                0.0
            }
        })
        .collect();
    let mut floor_each = if floor_count > 0 {
        floor_total / floor_count as f64
    } else {
        0.0
    };
    cap_below(c, &mut probs, &mut floor_each, floor_count);

    let mut explicit = Vec::with_capacity(n_comp + 1);
    explicit.push((emitted, c));
    explicit.extend(competitors.into_iter().zip(probs));
    let mut dist = TokenDist {
        explicit,
        floor_each,
        floor_count,
    };
    dist.normalize();
    dist
}

/// Caps every competitor and the floor at `c`, handing the excess to the
/// entries still below it. Feasible whenever `c >= 1 / V`.
fn cap_below(c: f64, probs: &mut [f64], floor_each: &mut f64, floor_count: usize) {
    for _ in 0..32 {
        let mut excess = 0.0;
        for p in probs.iter_mut().filter(|p| **p > c) {
            excess += *p - c;
            *p = c;
        }
        if floor_count > 0 && *floor_each > c {
            excess += (*floor_each - c) * floor_count as f64;
            *floor_each = c;
        }
        if excess <= 0.0 {
            return;
        }
        let floor_open = floor_count > 0 && *floor_each < c;
        let open =
            probs.iter().filter(|p| **p < c).count() + if floor_open { floor_count } else { 0 };
        if open == 0 {
            return;
        }
        let share = excess / open as f64;
        for p in probs.iter_mut().filter(|p| **p < c) {
            *p += share;
        }
        if floor_open {
            *floor_each += share;
        }
    }
}

fn generate_utterance(
    config: &GenConfig,
    index: usize,
    width: usize,
) -> (UtteranceRecord, Vec<bool>) {
    let mut rng = Stream::new(config.seed, index as u64);
    let v = config.vocab_size;
    let n_words = config.min_words + rng.below(config.max_words - config.min_words + 1);

    let mut plans = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        let len = rng.geometric_len(config.mean_word_len);
        let e_l = error_rate(config, len);
        let correct = rng.uniform() < word_prior(config, len);
        let rate = if correct {
            config.peak_rate_correct
        } else {
            config.peak_rate_error
        };
        let peaks: Vec<f64> = (0..len).map(|_| draw_peak(rate, v, &mut rng)).collect();
        let weakest = (0..len).fold(0, |w, i| if peaks[i] < peaks[w] { i } else { w });

        let mut plan = WordPlan {
            ref_tokens: Vec::with_capacity(len),
            hyp_tokens: Vec::with_capacity(len),
            peaks,
            correct,
        };
        for i in 0..len {
            let ref_tok = 1 + rng.below(v - 1);
            let substitute = !correct && (i == weakest || rng.uniform() < e_l);
            let hyp_tok = if substitute && v >= 3 {
                // uniform over the other v - 2 word tokens
                let mut t = 1 + rng.below(v - 2);
                if t >= ref_tok {
                    t += 1;
                }
                t
            } else {
                ref_tok
            };
            plan.ref_tokens.push(ref_tok);
            plan.hyp_tokens.push(hyp_tok);
        }
        plans.push(plan);
    }

    let word_string = |tokens: &[usize]| {
        tokens
            .iter()
            .map(|&t| surface(t, width))
            .collect::<String>()
    };
    let ref_words: Vec<String> = plans.iter().map(|p| word_string(&p.ref_tokens)).collect();
    let ref_set: HashSet<&str> = ref_words.iter().map(String::as_str).collect();

    let mut hyp_tokens = Vec::new();
    let mut word_boundaries = Vec::with_capacity(n_words);
    let mut hyp_words = Vec::with_capacity(n_words);
    let mut labels = Vec::with_capacity(n_words);
    let mut base = Vec::new();
    for plan in &plans {
        let mut word = word_string(&plan.hyp_tokens);
        if !plan.correct && ref_set.contains(word.as_str()) {
            word.push('~');
        }
        let start = hyp_tokens.len();
        for ((&hyp, &rf), &c) in plan
            .hyp_tokens
            .iter()
            .zip(&plan.ref_tokens)
            .zip(&plan.peaks)
        {
            base.push(base_dist(v, hyp, c, Some(rf), &mut rng));
            hyp_tokens.push(hyp);
        }
        word_boundaries.push(WordSpan::new(start, hyp_tokens.len()));
        hyp_words.push(word);
        labels.push(plan.correct);
    }
    let eos_peak = draw_peak(config.peak_rate_correct, v, &mut rng);
    base.push(base_dist(v, 0, eos_peak, None, &mut rng));
    hyp_tokens.push(0);

    let runs = (0..config.n_runs)
        .map(|r| {
            let steps = base
                .iter()
                .map(|dist| {
                    let noisy = if config.run_noise > 0.0 {
                        dist.perturbed(config.run_noise, &mut rng)
                    } else {
                        dist.clone()
                    };
                    let emitted = noisy.powered(config.sharpen);
                    match config.topk {
                        Some(k) => emitted.to_topk(k.min(v)),
                        None => TokenPosterior::Dense(emitted.to_dense(v)),
                    }
                })
                .collect();
            PosteriorRun {
                run_id: r.to_string(),
                steps,
            }
        })
        .collect();

    let record = UtteranceRecord {
        utt_id: format!("utt{index:06}"),
        hyp_tokens,
        word_boundaries,
        hyp_words,
        ref_words,
        runs,
    };
    (record, labels)
}

/// A generated corpus with the labels it was constructed with.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    /// Per utterance, per hypothesis word: `true` when correct.
    pub labels: Vec<Vec<bool>>,
}

/// Generates a corpus; the output depends only on `config`.
pub fn generate(config: &GenConfig) -> Result<Generated, SynthError> {
    config.validate()?;
    let width = surface_width(config.vocab_size);
    let (utterances, labels): (Vec<_>, Vec<_>) = (0..config.n_utts)
        .into_par_iter()
        .map(|i| generate_utterance(config, i, width))
        .unzip();
    let dataset = Dataset::new(vocabulary(config.vocab_size)?, utterances)?;
    Ok(Generated { dataset, labels })
}

#[derive(Serialize)]
struct TruthLine<'a> {
    utt_id: &'a str,
    labels: &'a [bool],
}

/// Writes ground-truth labels as JSONL: `{"utt_id": str, "labels": [bool]}`.
pub fn write_truth<W: Write>(mut out: W, generated: &Generated) -> io::Result<()> {
    for (utt, labels) in generated.dataset.utterances.iter().zip(&generated.labels) {
        serde_json::to_writer(
            &mut out,
            &TruthLine {
                utt_id: &utt.utt_id,
                labels,
            },
        )?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
