//! ROUGE-N, ROUGE-L and novel n-gram proportions over token lists.
//!
//! Tokens are compared as given; callers lowercase. There is no stemming and
//! ROUGE-L is computed over the whole token list.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }

    /// From match and length counts; F1 is `2·hits/(cand+ref)`, which rounds
    /// once instead of three times.
    pub fn from_counts(hits: usize, candidate: usize, reference: usize) -> Self {
        Self {
            precision: ratio(hits, candidate),
            recall: ratio(hits, reference),
            f1: ratio(2 * hits, candidate + reference),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    let total = |m: &HashMap<&[T], usize>| m.values().sum::<usize>();
    RougeScore::from_counts(overlap, total(&c), total(&r))
}

/// Longest common subsequence length.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    let l = lcs_len(candidate, reference);
    RougeScore::from_counts(l, candidate.len(), reference.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeVariant {
    N(usize),
    L,
}

/// Scores with the candidate cut to the reference length. Only the recall
/// field is meaningful for this protocol; the others are what the
/// truncated candidate gets.
pub fn rouge_limited_recall<T: Eq + Hash>(candidate: &[T], reference: &[T], variant: RougeVariant) -> RougeScore {
    let cut = &candidate[..candidate.len().min(reference.len())];
    match variant {
        RougeVariant::N(n) => rouge_n(cut, reference, n),
        RougeVariant::L => rouge_l(cut, reference),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Novelty {
    pub proportion: f64,
    /// The summary had fewer than `n` tokens.
    pub too_short: bool,
}

/// Fraction of the summary's n-gram occurrences absent from the document.
pub fn novel_ngram_proportion<T: Eq + Hash>(summary: &[T], document: &[T], n: usize) -> Novelty {
    if n == 0 || summary.len() < n {
        return Novelty {
            proportion: 0.0,
            too_short: true,
        };
    }
    let seen: HashSet<&[T]> = if document.len() >= n {
        document.windows(n).collect()
    } else {
        HashSet::new()
    };
    let grams: Vec<&[T]> = summary.windows(n).collect();
    let novel = grams.iter().filter(|g| !seen.contains(*g)).count();
    Novelty {
        proportion: ratio(novel, grams.len()),
        too_short: false,
    }
}

/// Whitespace tokens, lowercased.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}
