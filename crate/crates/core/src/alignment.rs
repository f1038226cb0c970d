//! Word-level correctness labels from a minimum-edit-distance alignment of
//! the hypothesis against the reference transcript.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignKind {
    Match,
    Substitution,
    Insertion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordLabel {
    pub word_index: usize,
    pub correct: bool,
    pub align_kind: AlignKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlignmentSummary {
    pub n_match: usize,
    pub n_sub: usize,
    pub n_ins: usize,
    pub n_del: usize,
    /// Reference length.
    pub n_ref: usize,
    pub wer: f64,
}

impl AlignmentSummary {
    pub fn n_edits(&self) -> usize {
        self.n_sub + self.n_ins + self.n_del
    }

    /// Sums counts over utterances; the pooled WER is total edits over total
    /// reference words.
    pub fn pool<'a>(parts: impl IntoIterator<Item = &'a AlignmentSummary>) -> AlignmentSummary {
        let mut total = AlignmentSummary::default();
        for p in parts {
            total.n_match += p.n_match;
            total.n_sub += p.n_sub;
            total.n_ins += p.n_ins;
            total.n_del += p.n_del;
            total.n_ref += p.n_ref;
        }
        total.wer = total.n_edits() as f64 / total.n_ref.max(1) as f64;
        total
    }
}

/// Optional text normalization applied to both sides before comparison.
/// Everything is off by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NormalizeFlags {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl NormalizeFlags {
    fn apply<'a>(&self, word: &'a str) -> std::borrow::Cow<'a, str> {
        let mut w = word;
        if self.strip_punctuation {
            w = w.trim_matches(|c: char| c.is_ascii_punctuation());
        }
        if self.lowercase {
            std::borrow::Cow::Owned(w.to_lowercase())
        } else {
            std::borrow::Cow::Borrowed(w)
        }
    }
}

/// Aligns hypothesis words to reference words with unit edit costs.
///
/// Every hypothesis word gets exactly one label; deleted reference words
/// count towards the WER but produce no label. Among optimal alignments the
/// backtrace prefers match, then substitution, then deletion, then insertion.
pub fn align_words<S: AsRef<str>, T: AsRef<str>>(
    hyp_words: &[S],
    ref_words: &[T],
    normalize: NormalizeFlags,
) -> (Vec<WordLabel>, AlignmentSummary) {
    let hyp: Vec<_> = hyp_words
        .iter()
        .map(|w| normalize.apply(w.as_ref()))
        .collect();
    let rf: Vec<_> = ref_words
        .iter()
        .map(|w| normalize.apply(w.as_ref()))
        .collect();
    let (n, m) = (hyp.len(), rf.len());

    // cost[i][j]: edit distance between hyp[..i] and ref[..j]
    let width = m + 1;
    let mut cost = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        cost[i * width] = i;
    }
    for (j, c) in cost.iter_mut().take(width).enumerate() {
        *c = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * width + j - 1] + usize::from(hyp[i - 1] != rf[j - 1]);
            let ins = cost[(i - 1) * width + j] + 1;
            let del = cost[i * width + j - 1] + 1;
            cost[i * width + j] = diag.min(ins).min(del);
        }
    }

    let mut kinds = vec![AlignKind::Insertion; n];
    let mut summary = AlignmentSummary {
        n_ref: m,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * width + j];
        if i > 0 && j > 0 {
            let same = hyp[i - 1] == rf[j - 1];
            let diag = cost[(i - 1) * width + j - 1];
            if same && diag == here {
                kinds[i - 1] = AlignKind::Match;
                summary.n_match += 1;
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && diag + 1 == here {
                kinds[i - 1] = AlignKind::Substitution;
                summary.n_sub += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * width + j - 1] + 1 == here {
            summary.n_del += 1;
            j -= 1;
            continue;
        }
        kinds[i - 1] = AlignKind::Insertion;
        summary.n_ins += 1;
        i -= 1;
    }
    summary.wer = summary.n_edits() as f64 / m.max(1) as f64;

    let labels = kinds
        .into_iter()
        .enumerate()
        .map(|(word_index, align_kind)| WordLabel {
            word_index,
            correct: align_kind == AlignKind::Match,
            align_kind,
        })
        .collect();
    (labels, summary)
}
