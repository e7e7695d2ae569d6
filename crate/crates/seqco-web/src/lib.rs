//! Browser bindings: the learning-rate schedule, the summary scorer and a
//! small in-page trainer.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use seqco::corpus::make_synthetic_corpus;
use seqco::decoding::decode;
use seqco::harness::{score_pairs, ExperimentConfig, Protocol, Silent, Trainer};
use seqco::metrics::words;
use seqco::optim::{lr_at, ScheduleConfig};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Learning rate at steps `0..=total`, sampled at `points` evenly spaced steps.
#[wasm_bindgen]
pub fn lr_curve(peak_lr: f64, warmup_steps: u32, total_steps: u32, points: u32) -> Result<Vec<f64>, JsError> {
    let cfg = ScheduleConfig {
        peak_lr,
        warmup_steps: warmup_steps.into(),
        total_steps: total_steps.into(),
    };
    cfg.validate().map_err(js_err)?;
    let points = points.max(2) as u64;
    let total = u64::from(total_steps);
    Ok((0..points).map(|i| lr_at(i * total / (points - 1), &cfg)).collect())
}

/// ROUGE-1/2/L and novel n-gram proportions of one candidate, as JSON.
/// An empty `document` skips novelty.
#[wasm_bindgen]
pub fn score(candidate: &str, reference: &str, document: &str, limited_recall: bool) -> Result<String, JsError> {
    let protocol = if limited_recall {
        Protocol::LimitedLengthRecall
    } else {
        Protocol::FullLengthF1
    };
    let docs = (!document.trim().is_empty()).then(|| vec![words(document)]);
    let report = score_pairs(&[words(candidate)], &[words(reference)], docs.as_deref(), protocol);
    serde_json::to_string(&report).map_err(js_err)
}

#[derive(Serialize)]
struct Progress {
    step: u64,
    nll: f64,
    similarity: Option<f64>,
    lr: f64,
}

/// A small model trained in the page on a lead-2 corpus.
#[wasm_bindgen]
pub struct Demo {
    trainer: Trainer,
    samples: u64,
}

#[wasm_bindgen]
impl Demo {
    /// `lambda` weights the generated-vs-reference summary similarity; 0
    /// trains with likelihood alone.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, lambda: f64) -> Result<Demo, JsError> {
        let mut cfg = ExperimentConfig::with_seed(seed.into());
        cfg.model.d_model = 16;
        cfg.model.heads = 2;
        cfg.model.ffn_dim = 32;
        cfg.model.encoder_layers = 1;
        cfg.model.decoder_layers = 1;
        cfg.seqco.proj_hidden = 32;
        cfg.seqco.align_heads = 2;
        cfg.seqco.lambda_y_yhat = lambda;
        cfg.batch_size = 8;
        cfg.corpus.train_size = 1000;
        cfg.corpus.test_size = 20;
        cfg.schedule = ScheduleConfig {
            peak_lr: 1e-3,
            warmup_steps: 50,
            total_steps: 1500,
        };
        cfg.validate().map_err(js_err)?;
        let trainer = Trainer::new(cfg).map_err(js_err)?;
        Ok(Demo { trainer, samples: 0 })
    }

    pub fn total_steps(&self) -> u32 {
        self.trainer.config.schedule.total_steps as u32
    }

    /// Runs up to `n` steps and returns their records as a JSON array.
    pub fn train(&mut self, n: u32) -> Result<String, JsError> {
        let mut out = Vec::new();
        for _ in 0..n {
            if self.trainer.step_count() >= self.trainer.config.schedule.total_steps {
                break;
            }
            let r = self.trainer.step(&mut Silent).map_err(js_err)?;
            out.push(Progress {
                step: r.step,
                nll: r.nll,
                similarity: r.similarity(),
                lr: r.lr,
            });
        }
        serde_json::to_string(&out).map_err(js_err)
    }

    /// A fresh document from the training distribution.
    pub fn sample_document(&mut self) -> Result<String, JsError> {
        self.samples += 1;
        let cfg = &self.trainer.config.corpus;
        let seed = self.trainer.config.seed ^ (0x5eed_0000 + self.samples);
        Ok(make_synthetic_corpus(cfg, 1, seed).map_err(js_err)?.remove(0).document)
    }

    /// Beam-search summary of `document` with the online network.
    pub fn summarize(&self, document: &str) -> Result<String, JsError> {
        let t = &self.trainer;
        let doc = t.vocab.tokenize(document).truncated(t.config.corpus.doc_cap);
        let hyp = decode(&t.net.model, &t.net.online.store, doc.ids(), &t.config.decode).map_err(js_err)?;
        Ok(t.vocab.detokenize(hyp.sequence().ids()))
    }
}
