use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::RougeScore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub nll: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_x_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_x_yhat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_y_yhat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_dec_y_yhat: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    /// Sum of the active similarity terms, if any.
    pub fn similarity(&self) -> Option<f64> {
        let terms = [self.sim_x_y, self.sim_x_yhat, self.sim_y_yhat, self.sim_dec_y_yhat];
        terms.iter().flatten().copied().reduce(|a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NovelNgrams {
    #[serde(rename = "1")]
    pub n1: f64,
    #[serde(rename = "2")]
    pub n2: f64,
    #[serde(rename = "3")]
    pub n3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
    pub novel_ngrams: NovelNgrams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

/// Append-only list of records, optionally mirrored to a JSON-lines file.
#[derive(Debug, Default)]
pub struct RunLog {
    records: Vec<LogRecord>,
    sink: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.sink {
            w.flush()?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            LogRecord::Eval(_) => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Eval(e) => Some(e),
            LogRecord::Step(_) => None,
        })
    }

    /// The records as JSON lines.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Vec<LogRecord>> {
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if !line.is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

/// Trailing mean over `window` values ending at each index.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}
