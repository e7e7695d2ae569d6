//! Sequence-level contrastive objective.
//!
//! Two sequences are mapped to hidden-state matrices, one by the online
//! network and one by its slowly moving target copy. The online states are
//! aligned onto the target positions with a cross-attention module and the
//! per-position cosines are averaged. The loss `1 - sim` only trains the
//! online side; the target follows by exponential moving average.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{MultiHeadAttention, INIT_STD};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{padding_mask, Hidden, ModelConfig, Transformer, EOS, PAD};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    /// Cross-attention alignment and averaged cosine.
    #[default]
    Mha,
    /// Cosine of the projected first-position states.
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqCoConfig {
    pub lambda_x_y: f64,
    pub lambda_x_yhat: f64,
    pub lambda_y_yhat: f64,
    pub lambda_dec_y_yhat: f64,
    pub tau: f64,
    pub similarity: SimilarityMode,
    pub proj_hidden: usize,
    pub align_heads: usize,
    /// Replace the projection `g` with the identity.
    pub projection_bypass: bool,
}

impl Default for SeqCoConfig {
    fn default() -> Self {
        Self {
            lambda_x_y: 0.0,
            lambda_x_yhat: 0.0,
            lambda_y_yhat: 0.0,
            lambda_dec_y_yhat: 0.0,
            tau: 0.99,
            similarity: SimilarityMode::Mha,
            proj_hidden: 64,
            align_heads: 4,
            projection_bypass: false,
        }
    }
}

impl SeqCoConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_x_y,
            self.lambda_x_yhat,
            self.lambda_y_yhat,
            self.lambda_dec_y_yhat,
        ];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("lambda weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.proj_hidden == 0 || self.align_heads == 0 {
            return Err(Error::Config("proj_hidden and align_heads must be positive".into()));
        }
        Ok(())
    }

    /// Whether any term needs a generated summary.
    pub fn needs_generated(&self) -> bool {
        self.lambda_x_yhat + self.lambda_y_yhat + self.lambda_dec_y_yhat > 0.0
    }

    pub fn any_active(&self) -> bool {
        self.lambda_x_y > 0.0 || self.needs_generated()
    }
}

/// One-hidden-layer ReLU network applied row-wise.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    bypass: bool,
}

impl ProjectionHead {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, bypass: bool, rng: &mut R) -> Self {
        Self {
            w1: store.add_normal(format!("{name}.w1"), &[d, hidden], INIT_STD, rng),
            b1: store.add_zeros(format!("{name}.b1"), &[hidden]),
            w2: store.add_normal(format!("{name}.w2"), &[hidden, d], INIT_STD, rng),
            b2: store.add_zeros(format!("{name}.b2"), &[d]),
            bypass,
        }
    }

    pub fn apply<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        if self.bypass {
            return Ok(x);
        }
        let h = x
            .matmul(tape.param(store, self.w1))?
            .add_row(tape.param(store, self.b1))?
            .relu()?;
        Ok(h.matmul(tape.param(store, self.w2))?.add_row(tape.param(store, self.b2))?)
    }
}

/// Trainable parameters θ: the seq2seq model, `g`, the CLS predictor `q`
/// and the alignment attention.
#[derive(Debug)]
pub struct OnlineNetwork {
    pub store: ParamStore,
}

/// EMA parameters ξ for the seq2seq model and `g`; never trained directly.
#[derive(Debug)]
pub struct TargetNetwork {
    pub store: ParamStore,
}

/// Which parameter set maps a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Online,
    Target,
}

/// Mapping function used to turn a sequence into hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mapping<'a> {
    /// `g(encoder(s))`
    Encoder,
    /// `g(decoder(s, encoder(source)))`
    Decoder(&'a [usize]),
}

/// Per-example loss breakdown.
#[derive(Debug, Clone, Copy)]
pub struct CombinedLoss<'t> {
    pub total: Var<'t>,
    pub nll: Var<'t>,
    pub x_y: Option<Var<'t>>,
    pub x_yhat: Option<Var<'t>>,
    pub y_yhat: Option<Var<'t>>,
    pub dec_y_yhat: Option<Var<'t>>,
}

/// The full contrastive model: layouts plus online and target parameters.
#[derive(Debug)]
pub struct SeqCo {
    pub model: Transformer,
    pub g: ProjectionHead,
    pub q: ProjectionHead,
    pub align: MultiHeadAttention,
    pub online: OnlineNetwork,
    pub target: TargetNetwork,
    pub config: SeqCoConfig,
}

/// Side, decoder source (absent for the encoder) and sequence.
type CacheKey = (Side, Option<Vec<usize>>, Vec<usize>);

fn key(side: Side, mapping: Mapping<'_>, s: &[usize]) -> CacheKey {
    let src = match mapping {
        Mapping::Encoder => None,
        Mapping::Decoder(x) => Some(x.to_vec()),
    };
    (side, src, s.to_vec())
}

/// Memoises raw and projected hidden states within one tape, so a
/// sequence is encoded at most once per side and shared terms are computed
/// once.
struct Session<'t, 'n> {
    tape: &'t Tape,
    net: &'n SeqCo,
    raw: RefCell<HashMap<CacheKey, Var<'t>>>,
    mapped: RefCell<HashMap<CacheKey, Var<'t>>>,
}

impl<'t, 'n> Session<'t, 'n> {
    fn new(tape: &'t Tape, net: &'n SeqCo) -> Self {
        Self {
            tape,
            net,
            raw: RefCell::new(HashMap::new()),
            mapped: RefCell::new(HashMap::new()),
        }
    }

    /// Transformer states before the projection `g`.
    fn raw(&self, side: Side, mapping: Mapping<'_>, s: &[usize]) -> Result<Var<'t>> {
        let k = key(side, mapping, s);
        if let Some(v) = self.raw.borrow().get(&k) {
            return Ok(*v);
        }
        let store = self.net.store(side);
        let v = match mapping {
            Mapping::Encoder => self.net.model.encode(self.tape, store, s)?,
            Mapping::Decoder(x) => {
                let enc = self.raw(side, Mapping::Encoder, x)?;
                let valid = padding_mask(x);
                self.net
                    .model
                    .decode_states(self.tape, store, &s[..s.len() - 1], Hidden { states: enc, valid: &valid })?
            }
        };
        self.raw.borrow_mut().insert(k, v);
        Ok(v)
    }

    fn map(&self, side: Side, mapping: Mapping<'_>, s: &[usize]) -> Result<Var<'t>> {
        let k = key(side, mapping, s);
        if let Some(v) = self.mapped.borrow().get(&k) {
            return Ok(*v);
        }
        let raw = self.raw(side, mapping, s)?;
        let v = self.net.g.apply(self.tape, self.net.store(side), raw)?;
        self.mapped.borrow_mut().insert(k, v);
        Ok(v)
    }

    /// Registers online states produced by an earlier forward pass.
    fn seed(&self, mapping: Mapping<'_>, s: &[usize], raw: Var<'t>) {
        self.raw.borrow_mut().insert(key(Side::Online, mapping, s), raw);
    }

    fn directional(&self, s_i: &[usize], s_j: &[usize], mapping: Mapping<'_>) -> Result<Var<'t>> {
        let h_i = self.map(Side::Online, mapping, s_i)?;
        let h_j = self.map(Side::Target, mapping, s_j)?;
        let vi = mapped_mask(mapping, s_i);
        let vj = mapped_mask(mapping, s_j);
        let sim = self.net.similarity(
            self.tape,
            Hidden { states: h_i, valid: &vi },
            Hidden { states: h_j, valid: &vj },
            self.net.config.similarity,
        )?;
        Ok(sim.scale(-1.0)?.add_scalar(1.0)?)
    }

    fn symmetric(&self, s_i: &[usize], s_j: &[usize], mapping: Mapping<'_>) -> Result<Var<'t>> {
        let a = self.directional(s_i, s_j, mapping)?;
        let b = self.directional(s_j, s_i, mapping)?;
        Ok(a.add(b)?)
    }
}

/// Valid rows of what a mapping produces for `s`. Decoder rows are fed
/// `s` minus its last token, so in a padded row the EOS input row is
/// invalid too.
fn mapped_mask(mapping: Mapping<'_>, s: &[usize]) -> Vec<bool> {
    match mapping {
        Mapping::Encoder => padding_mask(s),
        Mapping::Decoder(_) => s[..s.len() - 1].iter().map(|&t| t != PAD && t != EOS).collect(),
    }
}

impl SeqCo {
    /// Builds online parameters from `rng` and a target copy with ξ = θ.
    pub fn init<R: Rng>(model_cfg: &ModelConfig, cfg: &SeqCoConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = model_cfg.d_model;
        if !d.is_multiple_of(cfg.align_heads) {
            return Err(Error::Config("align_heads must divide d_model".into()));
        }
        let mut store = ParamStore::new();
        let model = Transformer::init(model_cfg, &mut store, rng)?;
        let g = ProjectionHead::init(&mut store, "g", d, cfg.proj_hidden, cfg.projection_bypass, rng);
        let shared = store.len();
        let q = ProjectionHead::init(&mut store, "q", d, cfg.proj_hidden, false, rng);
        let align = MultiHeadAttention::init(&mut store, "align", d, cfg.align_heads, rng);
        let mut target = store.prefix(shared);
        target.set_requires_grad(false);
        Ok(Self {
            model,
            g,
            q,
            align,
            online: OnlineNetwork { store },
            target: TargetNetwork { store: target },
            config: cfg.clone(),
        })
    }

    pub fn store(&self, side: Side) -> &ParamStore {
        match side {
            Side::Online => &self.online.store,
            Side::Target => &self.target.store,
        }
    }

    /// `g(encoder(s))`, one row per token of `s`.
    pub fn map_encoder<'t>(&self, tape: &'t Tape, side: Side, s: &[usize]) -> Result<Var<'t>> {
        Session::new(tape, self).map(side, Mapping::Encoder, s)
    }

    /// `g(decoder(s, encoder(x)))`, one row per predicted position of `s`.
    pub fn map_decoder<'t>(&self, tape: &'t Tape, side: Side, s: &[usize], x: &[usize]) -> Result<Var<'t>> {
        Session::new(tape, self).map(side, Mapping::Decoder(x), s)
    }

    /// Attends from `h_j` (queries) into `h_i` (keys and values); the result
    /// has the row count of `h_j`.
    pub fn align<'t>(&self, tape: &'t Tape, h_i: Hidden<'t, '_>, h_j: Hidden<'t, '_>) -> Result<Var<'t>> {
        let rows = h_j.states.shape()[0];
        let allow: Vec<bool> = (0..rows).flat_map(|_| h_i.valid.iter().copied()).collect();
        Ok(self
            .align
            .forward(tape, &self.online.store, h_j.states, h_i.states, &allow)?)
    }

    /// Similarity of mapped states `h_i` (online) and `h_j` (target), in [-1, 1].
    pub fn similarity<'t>(
        &self,
        tape: &'t Tape,
        h_i: Hidden<'t, '_>,
        h_j: Hidden<'t, '_>,
        mode: SimilarityMode,
    ) -> Result<Var<'t>> {
        match mode {
            SimilarityMode::Mha => {
                let aligned = self.align(tape, h_i, h_j)?;
                averaged_cosine(aligned, h_j)
            }
            SimilarityMode::Cls => {
                let first_i = h_i.states.slice_rows(0, 1)?;
                let first_j = h_j.states.slice_rows(0, 1)?;
                let predicted = self.q.apply(tape, &self.online.store, first_i)?;
                Ok(predicted.cosine_rows(first_j)?.sum()?)
            }
        }
    }

    /// `sim(s_i, s_j)` with `s_i` mapped online and `s_j` by the target.
    pub fn seq_similarity<'t>(&self, tape: &'t Tape, s_i: &[usize], s_j: &[usize], mapping: Mapping<'_>) -> Result<Var<'t>> {
        let session = Session::new(tape, self);
        let loss = session.directional(s_i, s_j, mapping)?;
        Ok(loss.scale(-1.0)?.add_scalar(1.0)?)
    }

    /// `1 - sim(s_i, s_j)`.
    pub fn directional_loss<'t>(&self, tape: &'t Tape, s_i: &[usize], s_j: &[usize], mapping: Mapping<'_>) -> Result<Var<'t>> {
        Session::new(tape, self).directional(s_i, s_j, mapping)
    }

    /// `L(s_i, s_j) + L(s_j, s_i)`.
    pub fn symmetric_loss<'t>(&self, tape: &'t Tape, s_i: &[usize], s_j: &[usize], mapping: Mapping<'_>) -> Result<Var<'t>> {
        Session::new(tape, self).symmetric(s_i, s_j, mapping)
    }

    /// NLL plus every similarity term whose weight is positive. Terms with a
    /// zero weight are not computed; with all weights zero the result is the
    /// NLL node itself.
    pub fn combined_loss<'t>(
        &self,
        tape: &'t Tape,
        x: &[usize],
        y: &[usize],
        y_hat: Option<&[usize]>,
        smoothing: f64,
    ) -> Result<CombinedLoss<'t>> {
        let cfg = &self.config;
        if cfg.needs_generated() && y_hat.is_none() {
            return Err(Error::Config(
                "a generated summary is required when a generated-summary weight is positive".into(),
            ));
        }
        let store = &self.online.store;
        let fwd = self.model.forward_nll(tape, store, x, y, smoothing)?;
        let mut total = fwd.loss;
        let mut out = CombinedLoss {
            total,
            nll: fwd.loss,
            x_y: None,
            x_yhat: None,
            y_yhat: None,
            dec_y_yhat: None,
        };
        if !cfg.any_active() {
            return Ok(out);
        }
        let session = Session::new(tape, self);
        session.seed(Mapping::Encoder, x, fwd.encoder);
        session.seed(Mapping::Decoder(x), y, fwd.decoder);

        let mut add = |weight: f64, term: Var<'t>| -> Result<()> {
            total = total.add(term.scale(weight)?)?;
            Ok(())
        };
        if cfg.lambda_x_y > 0.0 {
            let t = session.symmetric(x, y, Mapping::Encoder)?;
            add(cfg.lambda_x_y, t)?;
            out.x_y = Some(t);
        }
        if let Some(yh) = y_hat {
            if cfg.lambda_x_yhat > 0.0 {
                let t = session.symmetric(x, yh, Mapping::Encoder)?;
                add(cfg.lambda_x_yhat, t)?;
                out.x_yhat = Some(t);
            }
            if cfg.lambda_y_yhat > 0.0 {
                let t = session.symmetric(y, yh, Mapping::Encoder)?;
                add(cfg.lambda_y_yhat, t)?;
                out.y_yhat = Some(t);
            }
            if cfg.lambda_dec_y_yhat > 0.0 {
                let t = session.symmetric(y, yh, Mapping::Decoder(x))?;
                add(cfg.lambda_dec_y_yhat, t)?;
                out.dec_y_yhat = Some(t);
            }
        }
        out.total = total;
        Ok(out)
    }

    /// ξ ← τξ + (1-τ)θ for every target parameter.
    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        ema_update(&mut self.target, &self.online, tau)
    }
}

/// Mean over valid rows of `cos(aligned_k, target_k)`.
pub fn averaged_cosine<'t>(aligned: Var<'t>, target: Hidden<'t, '_>) -> Result<Var<'t>> {
    let cos = aligned.cosine_rows(target.states)?;
    let count = target.valid.iter().filter(|v| **v).count().max(1) as f64;
    let weights: Vec<f64> = target
        .valid
        .iter()
        .map(|&v| if v { 1.0 / count } else { 0.0 })
        .collect();
    Ok(cos.weighted_sum(&weights)?)
}

/// ξ ← τξ + (1-τ)θ, pairing target parameters with the online ones of the
/// same index.
pub fn ema_update(target: &mut TargetNetwork, online: &OnlineNetwork, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
    }
    if target.store.len() > online.store.len() {
        return Err(Error::Corruption("target has more parameters than online".into()));
    }
    let keep = 1.0 - tau;
    for (i, xi) in target.store.iter_mut().enumerate() {
        let theta = online.store.get(ParamId(i));
        if theta.name != xi.name || theta.value.shape() != xi.value.shape() {
            return Err(Error::Corruption(format!(
                "target {} {:?} paired with online {} {:?}",
                xi.name,
                xi.value.shape(),
                theta.name,
                theta.value.shape()
            )));
        }
        for (x, t) in xi.value.data_mut().iter_mut().zip(theta.value.data()) {
            *x = tau * *x + keep * t;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BOS, EOS};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(cfg: SeqCoConfig) -> SeqCo {
        let mc = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            max_positions: 16,
            tie_embeddings: false,
        };
        SeqCo::init(&mc, &SeqCoConfig { proj_hidden: 8, align_heads: 2, ..cfg }, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn target_starts_equal_and_frozen() {
        let net = small(SeqCoConfig::default());
        for (id, p) in net.target.store.iter() {
            assert!(!p.requires_grad);
            assert_eq!(p.value, net.online.store.value(id).clone());
        }
        assert!(net.online.store.len() > net.target.store.len());
    }

    #[test]
    fn mapping_shapes() {
        let net = small(SeqCoConfig::default());
        let tape = Tape::new();
        let s = [BOS, 5, 6, 7, EOS];
        let x = [BOS, 8, 9, EOS];
        assert_eq!(net.map_encoder(&tape, Side::Online, &s).unwrap().shape(), vec![5, 8]);
        assert_eq!(net.map_decoder(&tape, Side::Online, &s, &x).unwrap().shape(), vec![4, 8]);
    }

    #[test]
    fn bypass_returns_raw_encoder_states() {
        let net = small(SeqCoConfig {
            projection_bypass: true,
            ..SeqCoConfig::default()
        });
        let tape = Tape::new();
        let s = [BOS, 5, 6, EOS];
        let mapped = net.map_encoder(&tape, Side::Online, &s).unwrap().value();
        let raw = net.model.encode_values(&net.online.store, &s).unwrap();
        assert_eq!(mapped, raw);
    }

    #[test]
    fn decoder_mapping_depends_on_source() {
        let net = small(SeqCoConfig::default());
        let tape = Tape::new();
        let s = [BOS, 5, 6, EOS];
        let a = net.map_decoder(&tape, Side::Online, &s, &[BOS, 8, EOS]).unwrap().value();
        let b = net.map_decoder(&tape, Side::Online, &s, &[BOS, 9, EOS]).unwrap().value();
        assert_ne!(a, b);
    }

    #[test]
    fn combined_requires_generated_summary() {
        let net = small(SeqCoConfig {
            lambda_y_yhat: 1.0,
            ..SeqCoConfig::default()
        });
        let tape = Tape::new();
        let err = net.combined_loss(&tape, &[BOS, 5, EOS], &[BOS, 6, EOS], None, 0.1);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn ema_rejects_mismatched_shapes() {
        let mut net = small(SeqCoConfig::default());
        net.target.store.get_mut(ParamId(0)).value = Tensor::zeros(&[1]);
        assert!(matches!(net.ema_update(0.5), Err(Error::Corruption(_))));
    }

    #[test]
    fn ema_scalar_recurrence() {
        let mut online = ParamStore::new();
        online.add("w", Tensor::scalar(0.0));
        let mut target = TargetNetwork { store: online.clone() };
        target.store.get_mut(ParamId(0)).value = Tensor::scalar(1.0);
        let online = OnlineNetwork { store: online };
        ema_update(&mut target, &online, 0.99).unwrap();
        assert_eq!(target.store.value(ParamId(0)).item(), 0.99);
        for _ in 1..50 {
            ema_update(&mut target, &online, 0.99).unwrap();
        }
        assert!((target.store.value(ParamId(0)).item() - 0.99f64.powi(50)).abs() < 1e-12);
    }
}
