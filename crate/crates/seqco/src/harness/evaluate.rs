use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::ExamplePair;
use crate::decoding::{decode, DecodeConfig};
use crate::error::Result;
use crate::metrics::{novel_ngram_proportion, rouge_l, rouge_limited_recall, rouge_n, RougeScore, RougeVariant};
use crate::model::{TokenSequence, Transformer};
use crate::params::ParamStore;

use super::runlog::{EvalRecord, NovelNgrams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// ROUGE F1 on the whole candidate.
    #[default]
    FullLengthF1,
    /// ROUGE with the candidate cut to the reference length.
    LimitedLengthRecall,
}

/// Produces a summary for a document.
pub trait Summarizer {
    fn summarize(&self, document: &TokenSequence) -> Result<TokenSequence>;
}

/// Decodes with a trained transformer.
pub struct ModelSummarizer<'a> {
    pub model: &'a Transformer,
    pub store: &'a ParamStore,
    pub decode: DecodeConfig,
}

impl Summarizer for ModelSummarizer<'_> {
    fn summarize(&self, document: &TokenSequence) -> Result<TokenSequence> {
        Ok(decode(self.model, self.store, document.ids(), &self.decode)?.sequence())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub examples: usize,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
    /// Candidate n-grams absent from the document; zero when no documents
    /// were given.
    pub novel_ngrams: NovelNgrams,
}

impl EvalReport {
    pub fn record(&self, step: u64) -> EvalRecord {
        EvalRecord {
            step,
            rouge1: self.rouge1,
            rouge2: self.rouge2,
            rouge_l: self.rouge_l,
            novel_ngrams: self.novel_ngrams.clone(),
        }
    }
}

fn mean_score(scores: &[RougeScore]) -> RougeScore {
    if scores.is_empty() {
        return RougeScore::default();
    }
    let n = scores.len() as f64;
    RougeScore {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

/// Corpus-level scores as per-example means. Novelty averages only over
/// candidates long enough to have an n-gram.
pub fn score_pairs<T: Eq + Hash>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    documents: Option<&[Vec<T>]>,
    protocol: Protocol,
) -> EvalReport {
    let variant = |v: RougeVariant, c: &[T], r: &[T]| match (protocol, v) {
        (Protocol::LimitedLengthRecall, v) => rouge_limited_recall(c, r, v),
        (Protocol::FullLengthF1, RougeVariant::N(n)) => rouge_n(c, r, n),
        (Protocol::FullLengthF1, RougeVariant::L) => rouge_l(c, r),
    };
    let collect = |v: RougeVariant| -> Vec<RougeScore> {
        candidates
            .iter()
            .zip(references)
            .map(|(c, r)| variant(v, c, r))
            .collect()
    };
    let novelty = |n: usize| -> f64 {
        let Some(docs) = documents else { return 0.0 };
        let vals: Vec<f64> = candidates
            .iter()
            .zip(docs)
            .map(|(c, d)| novel_ngram_proportion(c, d, n))
            .filter(|nv| !nv.too_short)
            .map(|nv| nv.proportion)
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    EvalReport {
        protocol,
        examples: candidates.len().min(references.len()),
        rouge1: mean_score(&collect(RougeVariant::N(1))),
        rouge2: mean_score(&collect(RougeVariant::N(2))),
        rouge_l: mean_score(&collect(RougeVariant::L)),
        novel_ngrams: NovelNgrams {
            n1: novelty(1),
            n2: novelty(2),
            n3: novelty(3),
        },
    }
}

/// Summaries of every document, in order.
pub fn summarize_all(summarizer: &dyn Summarizer, pairs: &[ExamplePair]) -> Result<Vec<TokenSequence>> {
    pairs.iter().map(|p| summarizer.summarize(&p.document)).collect()
}

/// Scores already decoded candidates against `pairs`. Kept apart from
/// decoding so switching protocol never re-decodes.
pub fn score_candidates(candidates: &[TokenSequence], pairs: &[ExamplePair], protocol: Protocol) -> EvalReport {
    let content = |s: &TokenSequence| s.content().to_vec();
    let cands: Vec<Vec<usize>> = candidates.iter().map(content).collect();
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| content(&p.summary)).collect();
    let docs: Vec<Vec<usize>> = pairs.iter().map(|p| content(&p.document)).collect();
    score_pairs(&cands, &refs, Some(&docs), protocol)
}

pub fn evaluate(summarizer: &dyn Summarizer, pairs: &[ExamplePair], protocol: Protocol) -> Result<EvalReport> {
    Ok(score_candidates(&summarize_all(summarizer, pairs)?, pairs, protocol))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Copies the reference, which it is handed up front.
    struct Oracle(Vec<ExamplePair>);

    impl Summarizer for Oracle {
        fn summarize(&self, document: &TokenSequence) -> Result<TokenSequence> {
            Ok(self.0.iter().find(|p| &p.document == document).unwrap().summary.clone())
        }
    }

    fn pairs() -> Vec<ExamplePair> {
        (0..4)
            .map(|i| ExamplePair {
                document: TokenSequence::from_content(&[5 + i, 6, 7, 8]),
                summary: TokenSequence::from_content(&[5 + i, 6]),
            })
            .collect()
    }

    #[test]
    fn oracle_scores_one() {
        let ps = pairs();
        let r = evaluate(&Oracle(ps.clone()), &ps, Protocol::FullLengthF1).unwrap();
        assert_eq!(r.rouge1.f1, 1.0);
        assert_eq!(r.rouge_l.f1, 1.0);
        assert_eq!(r.novel_ngrams.n1, 0.0);
        assert_eq!(r.examples, 4);
    }

    #[test]
    fn protocol_changes_only_scoring() {
        let ps = pairs();
        let long: Vec<TokenSequence> = ps.iter().map(|p| p.document.clone()).collect();
        let full = score_candidates(&long, &ps, Protocol::FullLengthF1);
        let limited = score_candidates(&long, &ps, Protocol::LimitedLengthRecall);
        assert_eq!(full.rouge1.recall, 1.0);
        assert_eq!(full.rouge1.precision, 0.5);
        assert_eq!(limited.rouge1.recall, 1.0);
        assert_eq!(limited.rouge1.precision, 1.0);
        assert_eq!(full.novel_ngrams, limited.novel_ngrams);
    }
}
