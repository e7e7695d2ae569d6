use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::corpus::{make_splits, ExamplePair, Vocabulary};
use crate::decoding::generate_training_summary;
use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::objective::SeqCo;
use crate::optim::{lr_at, AdamState};
use crate::tensor::TensorError;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::evaluate::{evaluate, EvalReport, ModelSummarizer, Protocol};
use super::runlog::{EvalRecord, LogRecord, RunLog, StepRecord};

/// Milestones of a training step, in the order they happen.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Generated { step: u64, count: usize },
    Forward { step: u64 },
    Backward { step: u64 },
    OptimizerStep { step: u64 },
    EmaUpdate { step: u64 },
    Logged(&'a StepRecord),
    Evaluated(&'a EvalRecord),
    Checkpointed { step: u64, path: &'a Path },
}

pub trait Observer {
    fn on_event(&mut self, event: &TrainEvent<'_>);
}

impl<F: FnMut(&TrainEvent<'_>)> Observer for F {
    fn on_event(&mut self, event: &TrainEvent<'_>) {
        self(event)
    }
}

/// Ignores everything.
pub struct Silent;

impl Observer for Silent {
    fn on_event(&mut self, _: &TrainEvent<'_>) {}
}

pub const CONFIG_FILE: &str = "config.toml";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const VOCAB_FILE: &str = "vocab.txt";

pub struct Trainer {
    pub config: ExperimentConfig,
    pub vocab: Vocabulary,
    pub net: SeqCo,
    pub adam: AdamState,
    pub train: Vec<ExamplePair>,
    pub test: Vec<ExamplePair>,
    pub log: RunLog,
    step: u64,
    generated: u64,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

/// What a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub report: EvalReport,
    pub checkpoint: Option<PathBuf>,
}

fn numerical(step: u64, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Numerical {
            step: step as usize,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

impl Trainer {
    /// Builds the synthetic corpus named by the config.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::synthetic(config.corpus.vocab_size)?;
        let (train, test) = make_splits(&config.corpus, config.corpus_seed())?;
        let enc = |rs: Vec<_>| -> Vec<ExamplePair> {
            rs.iter()
                .map(|r: &crate::corpus::CorpusRecord| r.encode(&vocab, config.corpus.doc_cap, config.corpus.sum_cap))
                .collect()
        };
        let (train, test) = (enc(train), enc(test));
        Self::with_data(config, vocab, train, test)
    }

    pub fn with_data(config: ExperimentConfig, vocab: Vocabulary, train: Vec<ExamplePair>, test: Vec<ExamplePair>) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.model.vocab_size {
            return Err(Error::VocabMismatch(format!(
                "vocabulary has {} ids, model expects {}",
                vocab.len(),
                config.model.vocab_size
            )));
        }
        if train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let net = SeqCo::init(&config.model, &config.seqco, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let adam = AdamState::new(&net.online.store, config.adam.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            order: (0..train.len()).collect(),
            cursor: train.len(),
            config,
            vocab,
            net,
            adam,
            train,
            test,
            log: RunLog::new(),
            step: 0,
            generated: 0,
            rng,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Number of Ŷ generated so far.
    pub fn generated_count(&self) -> u64 {
        self.generated
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One optimisation step: generate Ŷ, forward, backward, Adam, EMA, log.
    pub fn step(&mut self, obs: &mut dyn Observer) -> Result<StepRecord> {
        let step = self.step + 1;
        let idx = self.next_batch();
        let seqco = &self.config.seqco;

        let mut generated: Vec<Option<TokenSequence>> = vec![None; idx.len()];
        if seqco.needs_generated() {
            for (slot, &i) in generated.iter_mut().zip(&idx) {
                *slot = Some(generate_training_summary(
                    &self.net.model,
                    &self.net.online.store,
                    self.train[i].document.ids(),
                    self.config.corpus.summary_max_content(),
                    self.config.train_block_trigrams,
                )?);
            }
            self.generated += idx.len() as u64;
            obs.on_event(&TrainEvent::Generated { step, count: idx.len() });
        }

        let tape = Tape::checked();
        let scale = 1.0 / idx.len() as f64;
        let mut sums = [0.0f64; 5];
        let mut active = [false; 4];
        let mut total = None;
        for (&i, yh) in idx.iter().zip(&generated) {
            let pair = &self.train[i];
            let loss = self
                .net
                .combined_loss(
                    &tape,
                    pair.document.ids(),
                    pair.summary.ids(),
                    yh.as_ref().map(|s| s.ids()),
                    self.config.label_smoothing,
                )
                .map_err(|e| numerical(step, e))?;
            sums[0] += loss.nll.item();
            for (k, t) in [loss.x_y, loss.x_yhat, loss.y_yhat, loss.dec_y_yhat].iter().enumerate() {
                if let Some(t) = t {
                    sums[k + 1] += t.item();
                    active[k] = true;
                }
            }
            total = Some(match total {
                None => loss.total,
                Some(acc) => loss.total.add(acc).map_err(|e| numerical(step, e.into()))?,
            });
        }
        let total = total
            .expect("batch is never empty")
            .scale(scale)
            .map_err(|e| numerical(step, e.into()))?;
        let total_value = total.item();
        if !total_value.is_finite() {
            return Err(Error::Numerical {
                step: step as usize,
                reason: "non-finite loss".into(),
            });
        }
        obs.on_event(&TrainEvent::Forward { step });

        let grads = tape.backward(total).map_err(|e| numerical(step, e.into()))?;
        obs.on_event(&TrainEvent::Backward { step });
        self.net.online.store.zero_grads();
        grads.accumulate_into(&mut self.net.online.store);
        drop(tape);

        let lr = lr_at(step, &self.config.schedule);
        let stats = self.adam.update(&mut self.net.online.store, lr).map_err(|e| match e {
            Error::Numerical { reason, .. } => Error::Numerical {
                step: step as usize,
                reason,
            },
            other => other,
        })?;
        obs.on_event(&TrainEvent::OptimizerStep { step });
        self.net.ema_update(self.config.seqco.tau)?;
        obs.on_event(&TrainEvent::EmaUpdate { step });

        let term = |k: usize| active[k].then(|| sums[k + 1] * scale);
        let record = StepRecord {
            step,
            nll: sums[0] * scale,
            sim_x_y: term(0),
            sim_x_yhat: term(1),
            sim_y_yhat: term(2),
            sim_dec_y_yhat: term(3),
            total: total_value,
            lr,
            grad_norm: stats.grad_norm,
        };
        self.log.push(LogRecord::Step(record.clone()))?;
        obs.on_event(&TrainEvent::Logged(&record));
        self.step = step;
        Ok(record)
    }

    /// Decodes the held-out split with the configured decoder.
    pub fn evaluate(&self, protocol: Protocol) -> Result<EvalReport> {
        let summarizer = ModelSummarizer {
            model: &self.net.model,
            store: &self.net.online.store,
            decode: self.config.decode.clone(),
        };
        evaluate(&summarizer, &self.test, protocol)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.step, &self.config, &self.vocab, &self.net, Some(&self.adam))
    }

    fn save_checkpoint(&self, dir: &Path, obs: &mut dyn Observer) -> Result<PathBuf> {
        let path = dir.join(CHECKPOINT_FILE);
        self.checkpoint().save(&path)?;
        obs.on_event(&TrainEvent::Checkpointed {
            step: self.step,
            path: &path,
        });
        Ok(path)
    }

    /// Runs to `schedule.total_steps`, evaluating and checkpointing every
    /// `eval_interval` steps. When `out_dir` is set the resolved config,
    /// vocabulary, RunLog, checkpoint and final report are written there; a
    /// numerical abort leaves the last good checkpoint in place.
    pub fn run(&mut self, obs: &mut dyn Observer) -> Result<TrainOutcome> {
        let dir = self.config.out_dir.clone();
        if let Some(dir) = &dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(CONFIG_FILE), self.config.to_toml()?)?;
            self.vocab.save(&dir.join(VOCAB_FILE))?;
            let mut log = RunLog::to_file(&dir.join(RUNLOG_FILE))?;
            for r in self.log.records() {
                log.push(r.clone())?;
            }
            self.log = log;
            self.save_checkpoint(dir, obs)?;
        }
        let total = self.config.schedule.total_steps;
        let mut checkpoint = None;
        let mut report = None;
        while self.step < total {
            if let Err(e) = self.step(obs) {
                self.log.flush()?;
                return Err(e);
            }
            if self.step.is_multiple_of(self.config.eval_interval) || self.step == total {
                let r = self.evaluate(Protocol::FullLengthF1)?;
                let rec = r.record(self.step);
                self.log.push(LogRecord::Eval(rec.clone()))?;
                obs.on_event(&TrainEvent::Evaluated(&rec));
                if let Some(dir) = &dir {
                    self.log.flush()?;
                    checkpoint = Some(self.save_checkpoint(dir, obs)?);
                }
                report = Some(r);
            }
        }
        self.log.flush()?;
        let report = match report {
            Some(r) => r,
            None => self.evaluate(Protocol::FullLengthF1)?,
        };
        if let Some(dir) = &dir {
            std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
        }
        Ok(TrainOutcome {
            steps: self.step,
            report,
            checkpoint,
        })
    }
}
