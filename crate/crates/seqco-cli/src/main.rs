use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use seqco::corpus::{make_splits, read_jsonl, write_jsonl, ExamplePair, Vocabulary};
use seqco::decoding::decode;
use seqco::harness::gradcheck::{check_combined_loss, TOLERANCE};
use seqco::harness::{
    ablate, default_grid, evaluate, score_pairs, Checkpoint, ExperimentConfig, ModelSummarizer, Protocol, TrainEvent,
    Trainer,
};
use seqco::metrics::words;
use seqco::model::UNK;
use seqco::objective::SimilarityMode;
use seqco::Error;

#[derive(Parser)]
#[command(name = "seqco", version, about = "Contrastive seq2seq summarization on toy corpora")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    FullLengthF1,
    LimitedLengthRecall,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::FullLengthF1 => Protocol::FullLengthF1,
            ProtocolArg::LimitedLengthRecall => Protocol::LimitedLengthRecall,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train,
    /// Train every row of the ablation grid and print a table.
    Ablate {
        /// Weight for the built-in grid, used when the config lists no rows.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Overrides schedule.total_steps for every row.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Decode a JSONL corpus with a checkpoint and score it.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "full-length-f1")]
        protocol: ProtocolArg,
    },
    /// Summarize one document per line.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score candidate summaries against references, one per line.
    Score {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Source documents, for novel n-gram proportions.
        #[arg(long)]
        documents: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full-length-f1")]
        protocol: ProtocolArg,
    },
    /// Write a synthetic corpus and its vocabulary.
    GenCorpus,
    /// Finite-difference check of the full training loss.
    GradCheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) | Error::VocabMismatch(_) => 2,
                Error::Numerical { .. } => 3,
                _ => 1,
            };
        }
    }
    1
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, cli.seed) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(seed)) => ExperimentConfig::with_seed(seed),
        (None, None) => return Err(Error::Config("pass --config or --seed".into()).into()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(io::BufReader::new(file).lines().collect::<io::Result<_>>()?)
}

fn emit(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), text)?;
        }
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

/// Tokenizes with the checkpoint vocabulary; unknown words mean the corpus
/// was not built for this model.
fn encode_strict(vocab: &Vocabulary, text: &str, cap: usize) -> Result<seqco::TokenSequence> {
    let seq = vocab.tokenize(text);
    if seq.content().contains(&UNK) {
        let unknown: Vec<&str> = text.split_whitespace().filter(|w| vocab.id(w) == UNK).take(3).collect();
        return Err(Error::VocabMismatch(format!("tokens not in the checkpoint vocabulary: {unknown:?}")).into());
    }
    Ok(seq.truncated(cap))
}

fn progress(event: &TrainEvent<'_>) {
    if let TrainEvent::Evaluated(r) = event {
        eprintln!(
            "step {:>6}  R-1 {:.4}  R-2 {:.4}  R-L {:.4}",
            r.step, r.rouge1.f1, r.rouge2.f1, r.rouge_l.f1
        );
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(&cli)?;
            let mut trainer = Trainer::new(cfg)?;
            let outcome = trainer.run(&mut progress)?;
            println!("{}", serde_json::to_string_pretty(&outcome.report)?);
        }
        Command::Ablate { lambda, steps } => {
            let mut cfg = load_config(&cli)?;
            if let Some(s) = steps {
                cfg.schedule.total_steps = *s;
                cfg.validate()?;
            }
            let rows = if cfg.ablation.is_empty() {
                default_grid(*lambda)
            } else {
                cfg.ablation.clone()
            };
            let report = ablate(&cfg, &rows, &mut progress)?;
            if let Some(dir) = &cfg.out_dir {
                fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
            }
            print!("{}", report.to_table());
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            protocol,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let vocab = ck.vocabulary()?;
            let decode_cfg = match &cli.config {
                Some(path) => ExperimentConfig::load(path)?.decode,
                None => ck.config.decode.clone(),
            };
            let (dc, sc) = (ck.config.corpus.doc_cap, ck.config.corpus.sum_cap);
            let pairs = read_jsonl(corpus)?
                .iter()
                .map(|r| {
                    Ok(ExamplePair {
                        document: encode_strict(&vocab, &r.document, dc)?,
                        summary: encode_strict(&vocab, &r.summary, sc)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let net = ck.restore()?;
            let summarizer = ModelSummarizer {
                model: &net.model,
                store: &net.online.store,
                decode: decode_cfg,
            };
            let report = evaluate(&summarizer, &pairs, (*protocol).into())?;
            emit(cli.out.as_deref(), "report.json", &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Decode { checkpoint, input, beam } => {
            let ck = Checkpoint::load(checkpoint)?;
            let vocab = ck.vocabulary()?;
            let net = ck.restore()?;
            let mut cfg = ck.config.decode.clone();
            if let Some(b) = beam {
                cfg.beam_size = *b;
                cfg.validate()?;
            }
            let mut out = String::new();
            for line in read_lines(input)? {
                let doc = vocab.tokenize(&line).truncated(ck.config.corpus.doc_cap);
                let hyp = decode(&net.model, &net.online.store, doc.ids(), &cfg)?;
                out.push_str(&vocab.detokenize(hyp.sequence().ids()));
                out.push('\n');
            }
            emit(cli.out.as_deref(), "summaries.txt", &out)?;
        }
        Command::Score {
            candidates,
            references,
            documents,
            protocol,
        } => {
            let tok = |p: &Path| -> Result<Vec<Vec<String>>> { Ok(read_lines(p)?.iter().map(|l| words(l)).collect()) };
            let cands = tok(candidates)?;
            let refs = tok(references)?;
            if cands.len() != refs.len() {
                bail!(Error::Config(format!(
                    "{} candidates but {} references",
                    cands.len(),
                    refs.len()
                )));
            }
            let docs = documents.as_deref().map(tok).transpose()?;
            if docs.as_ref().is_some_and(|d| d.len() != cands.len()) {
                bail!(Error::Config("documents and candidates differ in count".into()));
            }
            let report = score_pairs(&cands, &refs, docs.as_deref(), (*protocol).into());
            emit(cli.out.as_deref(), "score.json", &serde_json::to_string_pretty(&report)?)?;
        }
        Command::GenCorpus => {
            let cfg = load_config(&cli)?;
            let Some(dir) = &cli.out else {
                bail!(Error::Config("gen-corpus needs --out".into()));
            };
            fs::create_dir_all(dir)?;
            let (train, test) = make_splits(&cfg.corpus, cfg.corpus_seed())?;
            write_jsonl(&dir.join("train.jsonl"), &train)?;
            write_jsonl(&dir.join("test.jsonl"), &test)?;
            Vocabulary::synthetic(cfg.corpus.vocab_size)?.save(&dir.join("vocab.txt"))?;
            eprintln!("wrote {} train and {} test pairs to {}", train.len(), test.len(), dir.display());
        }
        Command::GradCheck => {
            let seed = cli.seed.unwrap_or(0);
            let mut ok = true;
            for mode in [SimilarityMode::Mha, SimilarityMode::Cls] {
                let r = check_combined_loss(seed, mode)?;
                println!(
                    "{mode:?}: {} entries, max rel err {:.2e} (tol {TOLERANCE:.0e}) {}",
                    r.analytic.len(),
                    r.max_rel_err,
                    if r.passed { "pass" } else { "FAIL" }
                );
                ok &= r.passed;
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
