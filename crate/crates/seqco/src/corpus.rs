//! Word-level vocabulary, synthetic summarization corpora and batching.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenSequence, BOS, EOS, PAD, RESERVED, UNK};

pub const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const PERIOD: &str = ".";

const WORDS: &[&str] = &[
    "the", "cat", "dog", "sat", "ran", "on", "mat", "red", "big", "old", "new", "sun", "sea", "sky", "car", "bus",
    "road", "tree", "bird", "fish", "king", "queen", "city", "town", "day", "night", "rain", "snow", "wind", "fire",
    "stone", "river", "hill", "field", "house", "door", "book", "song", "game", "ship", "star", "moon", "gold",
    "iron", "wood", "milk", "bread", "apple", "green", "blue", "fast", "slow", "tall", "small", "warm", "cold",
    "loud", "calm", "bright", "dark", "soft", "hard", "sweet", "wild",
];

/// Bijection between tokens and ids; ids below [`RESERVED`] are fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` in order.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::VocabMismatch(format!("invalid token {w:?}")));
            }
            if index.insert(w.clone(), tokens.len()).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate token {w:?}")));
            }
            tokens.push(w);
        }
        Ok(Self { tokens, index })
    }

    /// The synthetic vocabulary of `size` ids: reserved, ".", then words.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < RESERVED + 3 {
            return Err(Error::Config(format!("vocabulary size {size} too small")));
        }
        let n = size - RESERVED - 1;
        let words = std::iter::once(PERIOD.to_string()).chain((0..n).map(|i| match WORDS.get(i) {
            Some(w) => w.to_string(),
            None => format!("w{i}"),
        }));
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `token`, UNK when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED_TOKENS[UNK])
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let ids: Vec<usize> = text.split_whitespace().map(|w| self.id(w)).collect();
        TokenSequence::from_content(&ids)
    }

    /// Content tokens joined by spaces; sentinels and padding are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&t| t != PAD && t != BOS && t != EOS)
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One non-reserved token per line.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for t in self.words() {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut words = Vec::new();
        for line in r.lines() {
            let line = line?;
            let t = line.trim();
            if !t.is_empty() {
                words.push(t.to_string());
            }
        }
        Self::new(words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub document: TokenSequence,
    pub summary: TokenSequence,
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub document: String,
    pub summary: String,
}

impl CorpusRecord {
    pub fn encode(&self, vocab: &Vocabulary, doc_cap: usize, sum_cap: usize) -> ExamplePair {
        ExamplePair {
            document: vocab.tokenize(&self.document).truncated(doc_cap),
            summary: vocab.tokenize(&self.summary).truncated(sum_cap),
        }
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Summary = the first `lead_k` sentences.
    #[default]
    LeadK,
    /// Summary = the keyword tokens of the document, in order.
    Keyword,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub lead_k: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Number of words reserved as keywords for the keyword task.
    pub keywords: usize,
    pub min_keywords: usize,
    pub max_keywords: usize,
    pub doc_cap: usize,
    pub sum_cap: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Falls back to the experiment seed when absent.
    pub seed: Option<u64>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::LeadK,
            vocab_size: 64,
            lead_k: 2,
            min_sentences: 3,
            max_sentences: 5,
            min_words: 2,
            max_words: 4,
            keywords: 12,
            min_keywords: 2,
            max_keywords: 4,
            doc_cap: 64,
            sum_cap: 16,
            train_size: 4000,
            test_size: 100,
            seed: None,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return bad("need 0 < min_sentences <= max_sentences");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("need 0 < min_words <= max_words");
        }
        if self.task == TaskKind::LeadK && (self.lead_k == 0 || self.lead_k > self.min_sentences) {
            return bad("lead_k must be in 1..=min_sentences");
        }
        if self.task == TaskKind::Keyword
            && (self.min_keywords == 0 || self.min_keywords > self.max_keywords || self.keywords == 0)
        {
            return bad("need 0 < min_keywords <= max_keywords and keywords > 0");
        }
        if self.keywords + 2 > self.vocab_size.saturating_sub(RESERVED + 1) {
            return bad("keyword set leaves too few distractor words");
        }
        if self.doc_cap < 3 || self.sum_cap < 3 {
            return bad("doc_cap and sum_cap must be at least 3");
        }
        if self.train_size == 0 || self.test_size == 0 {
            return bad("train_size and test_size must be positive");
        }
        Vocabulary::synthetic(self.vocab_size).map(|_| ())
    }

    /// Longest content a summary may have.
    pub fn summary_max_content(&self) -> usize {
        self.sum_cap - 2
    }
}

/// `n` pairs of the configured task; a pure function of `(cfg, n, seed)`.
pub fn make_synthetic_corpus(cfg: &CorpusConfig, n: usize, seed: u64) -> Result<Vec<CorpusRecord>> {
    cfg.validate()?;
    let vocab = Vocabulary::synthetic(cfg.vocab_size)?;
    let words: Vec<&str> = vocab.words()[1..].iter().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(match cfg.task {
            TaskKind::LeadK => lead_k_example(cfg, &words, &mut rng),
            TaskKind::Keyword => keyword_example(cfg, &words, &mut rng),
        });
    }
    Ok(out)
}

fn sentence<R: Rng>(cfg: &CorpusConfig, pool: &[&str], rng: &mut R) -> Vec<String> {
    let len = rng.random_range(cfg.min_words..=cfg.max_words);
    let mut s: Vec<String> = (0..len).map(|_| pool[rng.random_range(0..pool.len())].to_string()).collect();
    s.push(PERIOD.to_string());
    s
}

fn lead_k_example<R: Rng>(cfg: &CorpusConfig, words: &[&str], rng: &mut R) -> CorpusRecord {
    let count = rng.random_range(cfg.min_sentences..=cfg.max_sentences);
    let sentences: Vec<Vec<String>> = (0..count).map(|_| sentence(cfg, words, rng)).collect();
    CorpusRecord {
        document: sentences.concat().join(" "),
        summary: sentences[..cfg.lead_k].concat().join(" "),
    }
}

fn keyword_example<R: Rng>(cfg: &CorpusConfig, words: &[&str], rng: &mut R) -> CorpusRecord {
    let (keywords, distractors) = words.split_at(cfg.keywords);
    let count = rng.random_range(cfg.min_sentences..=cfg.max_sentences);
    let mut doc: Vec<Vec<String>> = (0..count).map(|_| sentence(cfg, distractors, rng)).collect();
    let k = rng.random_range(cfg.min_keywords..=cfg.max_keywords);
    for _ in 0..k {
        let s = rng.random_range(0..doc.len());
        let at = rng.random_range(0..doc[s].len());
        doc[s].insert(at, keywords[rng.random_range(0..keywords.len())].to_string());
    }
    let flat = doc.concat();
    let summary: Vec<&str> = flat
        .iter()
        .map(String::as_str)
        .filter(|w| keywords.contains(w))
        .collect();
    CorpusRecord {
        document: flat.join(" "),
        summary: summary.join(" "),
    }
}

/// Train and held-out splits drawn from one stream.
pub fn make_splits(cfg: &CorpusConfig, seed: u64) -> Result<(Vec<CorpusRecord>, Vec<CorpusRecord>)> {
    let mut all = make_synthetic_corpus(cfg, cfg.train_size + cfg.test_size, seed)?;
    let test = all.split_off(cfg.train_size);
    Ok((all, test))
}

/// A padded minibatch. Masks are `true` at PAD positions. Decoder inputs
/// are the summary shifted right behind BOS; targets are the summary
/// without BOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub documents: Vec<Vec<usize>>,
    pub document_pad: Vec<Vec<bool>>,
    pub summaries: Vec<Vec<usize>>,
    pub summary_pad: Vec<Vec<bool>>,
    pub decoder_inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

fn pad_rows(rows: &[&[usize]]) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let padded: Vec<Vec<usize>> = rows
        .iter()
        .map(|r| {
            let mut v = r.to_vec();
            v.resize(width, PAD);
            v
        })
        .collect();
    let mask = padded.iter().map(|r| r.iter().map(|&t| t == PAD).collect()).collect();
    (padded, mask)
}

impl Batch {
    pub fn new(pairs: &[&ExamplePair]) -> Self {
        let docs: Vec<&[usize]> = pairs.iter().map(|p| p.document.ids()).collect();
        let sums: Vec<&[usize]> = pairs.iter().map(|p| p.summary.ids()).collect();
        let (documents, document_pad) = pad_rows(&docs);
        let (summaries, summary_pad) = pad_rows(&sums);
        let decoder_inputs = summaries.iter().map(|r| r[..r.len() - 1].to_vec()).collect();
        let targets = summaries.iter().map(|r| r[1..].to_vec()).collect();
        Self {
            documents,
            document_pad,
            summaries,
            summary_pad,
            decoder_inputs,
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn pad_count(&self) -> usize {
        let count = |m: &Vec<Vec<bool>>| m.iter().flatten().filter(|&&p| p).count();
        count(&self.document_pad) + count(&self.summary_pad)
    }
}

/// Splits `pairs` into batches of at most `batch_size`, optionally after a
/// seeded shuffle.
pub fn batch(pairs: &[ExamplePair], batch_size: usize, shuffle: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| Batch::new(&idx.iter().map(|&i| &pairs[i]).collect::<Vec<_>>()))
        .collect())
}

/// Strips trailing padding from a padded row.
pub fn unpadded(row: &[usize]) -> &[usize] {
    let end = row.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    &row[..end]
}
