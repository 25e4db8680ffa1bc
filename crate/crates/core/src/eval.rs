//! WER/CER scoring and model evaluation reports.
//!
//! Error rates are pooled at the corpus level (total edit distance over
//! total reference length), the ASR convention; this is stated in every
//! report header.

use serde::{Deserialize, Serialize};

use crate::data::{normalize_text, tokens_to_text, Lang, SampleRecord};
use crate::error::{Error, Result};
use crate::model::Model;

/// Counts of the minimal-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditOps {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Scoring unit: space-split words (English) or characters (Chinese).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Word,
    Char,
}

impl Unit {
    /// Normalization language convention paired with each unit.
    pub fn lang(&self) -> Lang {
        match self {
            Unit::Word => Lang::En,
            Unit::Char => Lang::Zh,
        }
    }

    pub fn tokenize(&self, s: &str) -> Vec<String> {
        match self {
            Unit::Word => s.split_whitespace().map(str::to_owned).collect(),
            Unit::Char => s.chars().map(String::from).collect(),
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            Unit::Word => "wer",
            Unit::Char => "cer",
        }
    }
}

/// Minimal Levenshtein alignment with unit costs.
///
/// Among minimal alignments the backtrace prefers substitution, then
/// deletion, then insertion, so a one-token difference is reported as one
/// substitution rather than an insert+delete pair.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditOps {
    let n = reference.len();
    let m = hypothesis.len();
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[idx(i, j)] = (dp[idx(i - 1, j - 1)] + sub_cost)
                .min(dp[idx(i - 1, j)] + 1)
                .min(dp[idx(i, j - 1)] + 1);
        }
    }
    // Backtrace in sub, del, ins preference order.
    let mut ops = EditOps::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[idx(i, j)];
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if here == dp[idx(i - 1, j - 1)] + sub_cost {
                ops.substitutions += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == dp[idx(i - 1, j)] + 1 {
            ops.deletions += 1;
            i -= 1;
            continue;
        }
        ops.insertions += 1;
        j -= 1;
    }
    ops
}

/// Corpus-level pooled rate: total distance over total reference length.
pub fn error_rate(refs: &[Vec<String>], hyps: &[Vec<String>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Contract(format!(
            "{} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let total_len: usize = refs.iter().map(Vec::len).sum();
    if total_len == 0 {
        return Err(Error::Contract(
            "total reference length is zero; the rate is undefined".into(),
        ));
    }
    let total_distance: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r, h).distance())
        .sum();
    Ok(total_distance as f64 / total_len as f64)
}

/// Convenience: score two raw strings after normalization.
pub fn string_error_rate(reference: &str, hypothesis: &str, unit: Unit) -> Result<f64> {
    let r = unit.tokenize(&normalize_text(reference, unit.lang()));
    let h = unit.tokenize(&normalize_text(hypothesis, unit.lang()));
    error_rate(&[r], &[h])
}

/// Per-sample evaluation line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub ref_len: usize,
    pub distance: usize,
    pub ops: EditOps,
}

/// Whole-dataset evaluation: per-sample lines plus one pooled summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    /// Pooling convention used for `rate`.
    pub pooling: String,
    pub rate: f64,
    pub total_distance: usize,
    pub total_ref_len: usize,
    pub samples: Vec<SampleEval>,
}

impl EvalReport {
    /// Recompute the pooled rate from the per-sample lines.
    pub fn recomputed_rate(&self) -> f64 {
        let d: usize = self.samples.iter().map(|s| s.distance).sum();
        let l: usize = self.samples.iter().map(|s| s.ref_len).sum();
        d as f64 / l as f64
    }
}

/// Decode every sample and score against the normalized references.
///
/// Both reference and hypothesis pass the same normalizer before scoring.
pub fn evaluate_model(
    model: &Model,
    dataset: &[SampleRecord],
    unit: Unit,
    max_len: usize,
) -> Result<EvalReport> {
    let mut samples = Vec::with_capacity(dataset.len());
    let mut total_distance = 0usize;
    let mut total_ref_len = 0usize;
    for record in dataset {
        let decoded = model.greedy_decode(record, max_len)?;
        let reference = normalize_text(&tokens_to_text(&record.targets), unit.lang());
        let hypothesis = normalize_text(&tokens_to_text(&decoded), unit.lang());
        let r = unit.tokenize(&reference);
        let h = unit.tokenize(&hypothesis);
        let ops = edit_distance(&r, &h);
        total_distance += ops.distance();
        total_ref_len += r.len();
        samples.push(SampleEval {
            id: record.id.clone(),
            reference,
            hypothesis,
            ref_len: r.len(),
            distance: ops.distance(),
            ops,
        });
    }
    if total_ref_len == 0 {
        return Err(Error::Contract(
            "total reference length is zero; the rate is undefined".into(),
        ));
    }
    Ok(EvalReport {
        metric: unit.metric_name().into(),
        pooling: "corpus (total distance / total reference length)".into(),
        rate: total_distance as f64 / total_ref_len as f64,
        total_distance,
        total_ref_len,
        samples,
    })
}
