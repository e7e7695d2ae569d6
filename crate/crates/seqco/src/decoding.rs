//! Greedy and beam-search generation with minimum length, trigram blocking
//! and a `logP / len^α` length penalty.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{padding_mask, DecoderState, EncoderMemory, TokenSequence, Transformer, BOS, EOS, PAD};
use crate::params::ParamStore;

pub const MAX_BEAM: usize = 16;

/// `max_len` and `min_len` count tokens between BOS and EOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub min_len: usize,
    pub length_penalty: f64,
    pub block_trigrams: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_len: 12,
            min_len: 1,
            length_penalty: 1.0,
            block_trigrams: true,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize, min_len: usize) -> Self {
        Self {
            beam_size: 1,
            max_len,
            min_len,
            length_penalty: 0.0,
            block_trigrams: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.beam_size > MAX_BEAM {
            return Err(Error::Config(format!("beam_size {} outside 1..={MAX_BEAM}", self.beam_size)));
        }
        if self.min_len >= self.max_len {
            return Err(Error::Config(format!(
                "min_len {} must be below max_len {}",
                self.min_len, self.max_len
            )));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(Error::Config("length_penalty must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Anything that can score the next token given a prefix.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Self::State;

    /// Feeds `token` and returns log-probabilities of the next token.
    fn feed(&self, state: &mut Self::State, token: usize) -> Vec<f64>;
}

/// Incremental transformer decoding over a fixed source.
pub struct TransformerStepper<'a> {
    model: &'a Transformer,
    store: &'a ParamStore,
    memory: EncoderMemory,
}

impl<'a> TransformerStepper<'a> {
    pub fn new(model: &'a Transformer, store: &'a ParamStore, source: &[usize]) -> Result<Self> {
        let enc = model.encode_values(store, source)?;
        let memory = model.encoder_memory(store, &enc, &padding_mask(source));
        Ok(Self { model, store, memory })
    }
}

impl StepModel for TransformerStepper<'_> {
    type State = DecoderState;

    fn start(&self) -> DecoderState {
        DecoderState::default()
    }

    fn feed(&self, state: &mut DecoderState, token: usize) -> Vec<f64> {
        self.model.step(self.store, &self.memory, state, token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Content tokens, without sentinels.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
    /// Set when every continuation was blocked before a natural end.
    pub degenerate: bool,
}

impl Hypothesis {
    pub fn sequence(&self) -> TokenSequence {
        TokenSequence::from_content(&self.tokens)
    }

    /// `logP / len^α` with EOS counted in the length.
    pub fn score(&self, alpha: f64) -> f64 {
        let len = (self.tokens.len() + 1) as f64;
        if alpha == 0.0 {
            self.log_prob
        } else {
            self.log_prob / len.powf(alpha)
        }
    }
}

/// Whether appending `next` repeats a trigram already in `tokens`.
pub fn repeats_trigram(tokens: &[usize], next: usize) -> bool {
    let n = tokens.len();
    if n < 2 {
        return false;
    }
    let (a, b) = (tokens[n - 2], tokens[n - 1]);
    tokens.windows(3).any(|w| w[0] == a && w[1] == b && w[2] == next)
}

/// Whether any trigram occurs twice.
pub fn has_repeated_trigram(tokens: &[usize]) -> bool {
    let mut seen = std::collections::HashSet::new();
    tokens.windows(3).any(|w| !seen.insert((w[0], w[1], w[2])))
}

fn mask(lp: &mut [f64], tokens: &[usize], cfg: &DecodeConfig) {
    lp[PAD] = f64::NEG_INFINITY;
    lp[BOS] = f64::NEG_INFINITY;
    if tokens.len() < cfg.min_len {
        lp[EOS] = f64::NEG_INFINITY;
    }
    if cfg.block_trigrams && tokens.len() >= 2 {
        for (v, l) in lp.iter_mut().enumerate() {
            if *l != f64::NEG_INFINITY && repeats_trigram(tokens, v) {
                *l = f64::NEG_INFINITY;
            }
        }
    }
}

/// Highest finite entry, lowest id on ties.
fn argmax(lp: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (v, &l) in lp.iter().enumerate() {
        if l == f64::NEG_INFINITY || l.is_nan() {
            continue;
        }
        if best.is_none_or(|b| l > lp[b]) {
            best = Some(v);
        }
    }
    best
}

/// Argmax decoding. Reaching `max_len` terminates with an EOS that adds
/// nothing to the log-probability.
pub fn greedy_with<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut state = model.start();
    let mut lp = model.feed(&mut state, BOS);
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        degenerate: false,
    };
    while hyp.tokens.len() < cfg.max_len {
        mask(&mut lp, &hyp.tokens, cfg);
        let Some(v) = argmax(&lp) else {
            hyp.degenerate = true;
            break;
        };
        hyp.log_prob += lp[v];
        if v == EOS {
            break;
        }
        hyp.tokens.push(v);
        lp = model.feed(&mut state, v);
    }
    hyp.finished = true;
    Ok(hyp)
}

struct Beam<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
    next: Vec<f64>,
}

/// Beam search. Candidates are ranked by cumulative log-probability, then by
/// the token's own log-probability, then by beam index and token id, so a
/// beam of one expands exactly like [`greedy_with`]. An EOS candidate
/// finishes a hypothesis only when it ranks inside the beam.
pub fn beam_with<M: StepModel>(model: &M, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let k = cfg.beam_size;
    let mut state = model.start();
    let next = model.feed(&mut state, BOS);
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        state,
        next,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let done = |tokens: Vec<usize>, log_prob: f64, degenerate: bool| Hypothesis {
        tokens,
        log_prob,
        finished: true,
        degenerate,
    };

    while !beams.is_empty() && finished.len() < k {
        let mut cands: Vec<(f64, f64, usize, usize)> = Vec::new();
        for (bi, beam) in beams.iter_mut().enumerate() {
            if beam.tokens.len() >= cfg.max_len {
                finished.push(done(beam.tokens.clone(), beam.log_prob, false));
                continue;
            }
            mask(&mut beam.next, &beam.tokens, cfg);
            let before = cands.len();
            for (v, &l) in beam.next.iter().enumerate() {
                if l != f64::NEG_INFINITY && !l.is_nan() {
                    cands.push((beam.log_prob + l, l, bi, v));
                }
            }
            if cands.len() == before {
                finished.push(done(beam.tokens.clone(), beam.log_prob, true));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        let mut next_beams = Vec::with_capacity(k);
        for (rank, &(total, _, bi, v)) in cands.iter().enumerate() {
            if next_beams.len() == k {
                break;
            }
            if v == EOS {
                if rank < k {
                    finished.push(done(beams[bi].tokens.clone(), total, false));
                }
                continue;
            }
            let parent = &beams[bi];
            let mut state = parent.state.clone();
            let next = model.feed(&mut state, v);
            let mut tokens = parent.tokens.clone();
            tokens.push(v);
            next_beams.push(Beam {
                tokens,
                log_prob: total,
                state,
                next,
            });
        }
        beams = next_beams;
    }

    let alpha = cfg.length_penalty;
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        let better = match &best {
            None => true,
            Some(b) => (!h.degenerate && b.degenerate) || (h.degenerate == b.degenerate && h.score(alpha) > b.score(alpha)),
        };
        if better {
            best = Some(h);
        }
    }
    Ok(best.expect("the first expansion always yields a finished or live hypothesis"))
}

/// Greedy decoding of `x` with a transformer.
pub fn greedy_decode(model: &Transformer, store: &ParamStore, x: &[usize], cfg: &DecodeConfig) -> Result<Hypothesis> {
    greedy_with(&TransformerStepper::new(model, store, x)?, cfg)
}

/// Beam search over `x` with a transformer.
pub fn beam_search(model: &Transformer, store: &ParamStore, x: &[usize], cfg: &DecodeConfig) -> Result<Hypothesis> {
    beam_with(&TransformerStepper::new(model, store, x)?, cfg)
}

/// Dispatches on `beam_size`.
pub fn decode(model: &Transformer, store: &ParamStore, x: &[usize], cfg: &DecodeConfig) -> Result<Hypothesis> {
    if cfg.beam_size == 1 && cfg.length_penalty == 0.0 {
        greedy_decode(model, store, x, cfg)
    } else {
        beam_search(model, store, x, cfg)
    }
}

/// Ŷ for the contrastive terms: greedy, at least two tokens, at most
/// `max_len`, no gradient.
pub fn generate_training_summary(
    model: &Transformer,
    store: &ParamStore,
    x: &[usize],
    max_len: usize,
    block_trigrams: bool,
) -> Result<TokenSequence> {
    let cfg = DecodeConfig {
        block_trigrams,
        ..DecodeConfig::greedy(max_len, 2.min(max_len - 1))
    };
    Ok(greedy_decode(model, store, x, &cfg)?.sequence())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Always puts all mass on the next token of a script.
    struct Forced {
        script: Vec<usize>,
        vocab: usize,
    }

    impl StepModel for Forced {
        type State = usize;

        fn start(&self) -> usize {
            0
        }

        fn feed(&self, pos: &mut usize, _token: usize) -> Vec<f64> {
            let mut lp = vec![f64::NEG_INFINITY; self.vocab];
            lp[*self.script.get(*pos).unwrap_or(&EOS)] = 0.0;
            *pos += 1;
            lp
        }
    }

    /// Uniform over everything.
    struct Flat(usize);

    impl StepModel for Flat {
        type State = ();

        fn start(&self) {}

        fn feed(&self, _: &mut (), _: usize) -> Vec<f64> {
            vec![-(self.0 as f64).ln(); self.0]
        }
    }

    #[test]
    fn forced_model_reproduces_script() {
        let m = Forced {
            script: vec![5, 6, 7, EOS],
            vocab: 10,
        };
        let h = greedy_with(&m, &DecodeConfig::greedy(10, 0)).unwrap();
        assert_eq!(h.tokens, vec![5, 6, 7]);
        assert_eq!(h.sequence().ids(), &[BOS, 5, 6, 7, EOS]);
        let b = beam_with(&m, &DecodeConfig { block_trigrams: false, ..DecodeConfig::default() }).unwrap();
        assert_eq!(b.tokens, vec![5, 6, 7]);
    }

    #[test]
    fn trigram_block_example() {
        let prefix = [10, 11, 12, 13, 10, 11];
        assert!(repeats_trigram(&prefix, 12));
        assert!(!repeats_trigram(&prefix, 13));
        assert!(has_repeated_trigram(&[10, 11, 12, 13, 10, 11, 12]));
    }

    #[test]
    fn forced_eos_under_min_len_is_degenerate() {
        // only EOS is ever available, and it is suppressed below min_len
        let m = Forced { script: vec![], vocab: 6 };
        let h = greedy_with(&m, &DecodeConfig::greedy(8, 3)).unwrap();
        assert!(h.degenerate && h.tokens.is_empty());
        let b = beam_with(&m, &DecodeConfig { min_len: 3, max_len: 8, ..DecodeConfig::default() }).unwrap();
        assert!(b.degenerate);
    }

    #[test]
    fn flat_model_runs_to_max_len() {
        let h = greedy_with(&Flat(8), &DecodeConfig::greedy(6, 0)).unwrap();
        // ties break to the lowest id, EOS=2 wins over content tokens
        assert!(h.tokens.is_empty());
        let h = greedy_with(&Flat(8), &DecodeConfig::greedy(6, 4)).unwrap();
        assert_eq!(h.tokens.len(), 4);
        let b = beam_with(&Flat(8), &DecodeConfig { min_len: 5, max_len: 6, ..DecodeConfig::default() }).unwrap();
        assert!(b.tokens.len() >= 5 && b.tokens.len() <= 6);
        assert!(!has_repeated_trigram(&b.tokens));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(DecodeConfig::greedy(3, 3).validate().is_err());
        assert!(DecodeConfig { beam_size: 17, ..DecodeConfig::default() }.validate().is_err());
        assert!(DecodeConfig { beam_size: 0, ..DecodeConfig::default() }.validate().is_err());
    }
}
