use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::objective::SeqCo;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::config::ExperimentConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn save_store(store: &ParamStore) -> Vec<SavedParam> {
    store
        .iter()
        .map(|(_, p)| SavedParam {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect()
}

fn restore_store(store: &mut ParamStore, saved: &[SavedParam]) -> Result<()> {
    if store.len() != saved.len() {
        return Err(Error::Corruption(format!(
            "checkpoint has {} parameters, model expects {}",
            saved.len(),
            store.len()
        )));
    }
    for (p, s) in store.iter_mut().zip(saved) {
        if p.name != s.name || p.value.shape() != s.shape.as_slice() {
            return Err(Error::Corruption(format!(
                "checkpoint parameter {} {:?} does not match {} {:?}",
                s.name,
                s.shape,
                p.name,
                p.value.shape()
            )));
        }
        p.value = Tensor::new(s.shape.clone(), s.data.clone())?;
    }
    Ok(())
}

/// JSON manifest with the resolved config, vocabulary and both parameter
/// sets. Floats round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub step: u64,
    pub config: ExperimentConfig,
    /// Non-reserved tokens in id order.
    pub vocab: Vec<String>,
    pub online: Vec<SavedParam>,
    pub target: Vec<SavedParam>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn capture(
        step: u64,
        config: &ExperimentConfig,
        vocab: &Vocabulary,
        net: &SeqCo,
        adam: Option<&AdamState>,
    ) -> Self {
        Self {
            format: FORMAT_VERSION,
            step,
            config: config.clone(),
            vocab: vocab.words().to_vec(),
            online: save_store(&net.online.store),
            target: save_store(&net.target.store),
            adam: adam.cloned(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.format != FORMAT_VERSION {
            return Err(Error::Corruption(format!("unsupported checkpoint format {}", ck.format)));
        }
        Ok(ck)
    }

    /// Writes to a temporary file first so a crash never leaves a torn
    /// checkpoint behind. Non-finite parameters are refused, leaving any
    /// existing file untouched.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bad = self
            .online
            .iter()
            .chain(&self.target)
            .find(|p| p.data.iter().any(|v| !v.is_finite()));
        if let Some(p) = bad {
            return Err(Error::Numerical {
                step: self.step as usize,
                reason: format!("refusing to checkpoint non-finite {}", p.name),
            });
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let v = Vocabulary::new(&self.vocab)?;
        if v.len() != self.config.model.vocab_size {
            return Err(Error::VocabMismatch(format!(
                "checkpoint vocabulary has {} ids, model {}",
                v.len(),
                self.config.model.vocab_size
            )));
        }
        Ok(v)
    }

    /// Rebuilds the network with the saved values.
    pub fn restore(&self) -> Result<SeqCo> {
        let mut net = SeqCo::init(&self.config.model, &self.config.seqco, &mut ChaCha8Rng::seed_from_u64(0))?;
        restore_store(&mut net.online.store, &self.online)?;
        restore_store(&mut net.target.store, &self.target)?;
        Ok(net)
    }
}
