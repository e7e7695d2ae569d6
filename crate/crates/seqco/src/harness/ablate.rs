use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::objective::{SeqCoConfig, SimilarityMode};

use super::config::ExperimentConfig;
use super::train::{Observer, Trainer};

/// One grid entry: the similarity weights and mode, everything else shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    #[serde(default)]
    pub lambda_x_y: f64,
    #[serde(default)]
    pub lambda_x_yhat: f64,
    #[serde(default)]
    pub lambda_y_yhat: f64,
    #[serde(default)]
    pub lambda_dec_y_yhat: f64,
    #[serde(default)]
    pub similarity: SimilarityMode,
}

impl AblationRow {
    pub fn new(name: &str, weights: [f64; 4], similarity: SimilarityMode) -> Self {
        Self {
            name: name.to_string(),
            lambda_x_y: weights[0],
            lambda_x_yhat: weights[1],
            lambda_y_yhat: weights[2],
            lambda_dec_y_yhat: weights[3],
            similarity,
        }
    }

    pub fn apply(&self, base: &SeqCoConfig) -> SeqCoConfig {
        SeqCoConfig {
            lambda_x_y: self.lambda_x_y,
            lambda_x_yhat: self.lambda_x_yhat,
            lambda_y_yhat: self.lambda_y_yhat,
            lambda_dec_y_yhat: self.lambda_dec_y_yhat,
            similarity: self.similarity,
            ..base.clone()
        }
    }
}

/// The ten-row grid: NLL only, the three single encoder-side losses, the
/// single-vector variant, the three pairs, the triple and the decoder-side
/// loss.
pub fn default_grid(lambda: f64) -> Vec<AblationRow> {
    let l = lambda;
    let mha = SimilarityMode::Mha;
    vec![
        AblationRow::new("nll-only", [0.0, 0.0, 0.0, 0.0], mha),
        AblationRow::new("x-y", [l, 0.0, 0.0, 0.0], mha),
        AblationRow::new("x-yhat", [0.0, l, 0.0, 0.0], mha),
        AblationRow::new("y-yhat", [0.0, 0.0, l, 0.0], mha),
        AblationRow::new("y-yhat-cls", [0.0, 0.0, l, 0.0], SimilarityMode::Cls),
        AblationRow::new("x-y+x-yhat", [l, l, 0.0, 0.0], mha),
        AblationRow::new("x-y+y-yhat", [l, 0.0, l, 0.0], mha),
        AblationRow::new("x-yhat+y-yhat", [0.0, l, l, 0.0], mha),
        AblationRow::new("x-y+x-yhat+y-yhat", [l, l, l, 0.0], mha),
        AblationRow::new("dec-y-yhat", [0.0, 0.0, 0.0, l], mha),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub final_nll: f64,
    /// Summed similarity loss at the last step; absent for NLL only.
    pub final_similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub steps: u64,
    pub rows: Vec<AblationResult>,
}

impl AblationReport {
    /// Fixed-width text table, one row per configuration.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(6);
        let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>6}\n", "config", "R-1", "R-2", "R-L");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6.2}  {:>6.2}  {:>6.2}",
                r.name,
                100.0 * r.rouge1,
                100.0 * r.rouge2,
                100.0 * r.rouge_l
            );
        }
        out
    }
}

fn dir_name(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Trains every row from the same seed and corpus and scores each on the
/// held-out split.
pub fn ablate(base: &ExperimentConfig, rows: &[AblationRow], obs: &mut dyn Observer) -> Result<AblationReport> {
    base.validate()?;
    let mut results = Vec::with_capacity(rows.len());
    for row in rows {
        let mut cfg = base.clone();
        cfg.seqco = row.apply(&base.seqco);
        cfg.ablation.clear();
        cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(dir_name(&row.name)));
        let mut trainer = Trainer::new(cfg)?;
        let outcome = trainer.run(obs)?;
        let last = trainer.log.steps().last().cloned();
        results.push(AblationResult {
            name: row.name.clone(),
            rouge1: outcome.report.rouge1.f1,
            rouge2: outcome.report.rouge2.f1,
            rouge_l: outcome.report.rouge_l.f1,
            final_nll: last.as_ref().map_or(f64::NAN, |s| s.nll),
            final_similarity: last.and_then(|s| s.similarity()),
        });
    }
    Ok(AblationReport {
        seed: base.seed,
        steps: base.schedule.total_steps,
        rows: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_ten_distinct_rows() {
        let g = default_grid(0.5);
        assert_eq!(g.len(), 10);
        let names: std::collections::HashSet<_> = g.iter().map(|r| &r.name).collect();
        assert_eq!(names.len(), 10);
        assert_eq!(g.iter().filter(|r| r.similarity == SimilarityMode::Cls).count(), 1);
    }

    #[test]
    fn table_shape() {
        let report = AblationReport {
            seed: 1,
            steps: 2,
            rows: vec![AblationResult {
                name: "x-y".into(),
                rouge1: 0.5,
                rouge2: 0.25,
                rouge_l: 0.5,
                final_nll: 1.0,
                final_similarity: Some(0.1),
            }],
        };
        let t = report.to_table();
        assert_eq!(t.lines().count(), 2);
        assert!(t.lines().nth(1).unwrap().contains("50.00"));
    }
}
