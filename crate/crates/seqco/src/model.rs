//! The encoder-decoder transformer: shared token embeddings, learned
//! positions, pre-norm layers and a linear output head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{affine, attend_cached, linear, MultiHeadAttention, INIT_STD};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{kernels, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

/// Token ids bracketed by `BOS … EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != BOS || ids[ids.len() - 1] != EOS {
            return Err(Error::Sequence(format!("expected BOS … EOS, got {ids:?}")));
        }
        if ids[1..ids.len() - 1].iter().any(|&t| t == PAD || t == BOS || t == EOS) {
            return Err(Error::Sequence(format!("sentinel inside sequence {ids:?}")));
        }
        Ok(Self(ids))
    }

    /// Wraps content tokens with sentinels.
    pub fn from_content(content: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(content);
        ids.push(EOS);
        Self(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Tokens between the sentinels.
    pub fn content(&self) -> &[usize] {
        &self.0[1..self.0.len() - 1]
    }

    /// Keeps at most `max_len` tokens, re-terminating with EOS.
    pub fn truncated(&self, max_len: usize) -> Self {
        if self.0.len() <= max_len {
            return self.clone();
        }
        let keep = max_len.max(2) - 2;
        Self::from_content(&self.content()[..keep])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            heads: 4,
            ffn_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            max_positions: 64,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("heads must divide d_model");
        }
        if self.vocab_size <= RESERVED {
            return bad("vocab_size must exceed the reserved ids");
        }
        if self.max_positions < 2 || self.ffn_dim == 0 {
            return bad("max_positions must be at least 2 and ffn_dim positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerNormIds {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormIds {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), &[d]),
            bias: store.add_zeros(format!("{name}.bias"), &[d]),
        }
    }

    fn apply<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(tape.param(store, self.gain), tape.param(store, self.bias))?)
    }

    fn apply_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        kernels::layer_norm_row(x, store.value(self.gain).data(), store.value(self.bias).data(), &mut out);
        out
    }
}

#[derive(Debug, Clone)]
struct FeedForwardIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForwardIds {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, d: usize, f: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add_normal(format!("{name}.w1"), &[d, f], INIT_STD, rng),
            b1: store.add_zeros(format!("{name}.b1"), &[f]),
            w2: store.add_normal(format!("{name}.w2"), &[f, d], INIT_STD, rng),
            b2: store.add_zeros(format!("{name}.b2"), &[d]),
        }
    }

    fn apply<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = x
            .matmul(tape.param(store, self.w1))?
            .add_row(tape.param(store, self.b1))?
            .relu()?;
        Ok(h.matmul(tape.param(store, self.w2))?.add_row(tape.param(store, self.b2))?)
    }

    fn apply_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut h = affine(x, store.value(self.w1), store.value(self.b1));
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        affine(&h, store.value(self.w2), store.value(self.b2))
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: LayerNormIds,
    attn: MultiHeadAttention,
    ln_ff: LayerNormIds,
    ff: FeedForwardIds,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: LayerNormIds,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNormIds,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNormIds,
    ff: FeedForwardIds,
}

/// Hidden states of one sequence plus its padding mask (`true` = real token).
#[derive(Debug, Clone, Copy)]
pub struct Hidden<'t, 'm> {
    pub states: Var<'t>,
    pub valid: &'m [bool],
}

/// Parameter layout of the seq2seq model. Values live in a [`ParamStore`];
/// the same layout serves any store built by [`Transformer::init`] with the
/// same config, which is how online and target copies share code.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: ModelConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_ln: LayerNormIds,
    decoder: Vec<DecoderLayer>,
    dec_ln: LayerNormIds,
    out_w: Option<ParamId>,
    out_b: ParamId,
}

pub fn padding_mask(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&t| t != PAD).collect()
}

impl Transformer {
    pub fn init<R: Rng>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d, f, h) = (config.vocab_size, config.d_model, config.ffn_dim, config.heads);
        let tok_emb = store.add_normal("tok_emb", &[v, d], INIT_STD, rng);
        let pos_emb = store.add_normal("pos_emb", &[config.max_positions, d], INIT_STD, rng);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let p = format!("enc.{i}");
                EncoderLayer {
                    ln_attn: LayerNormIds::init(store, &format!("{p}.ln_attn"), d),
                    attn: MultiHeadAttention::init(store, &format!("{p}.attn"), d, h, rng),
                    ln_ff: LayerNormIds::init(store, &format!("{p}.ln_ff"), d),
                    ff: FeedForwardIds::init(store, &format!("{p}.ff"), d, f, rng),
                }
            })
            .collect();
        let enc_ln = LayerNormIds::init(store, "enc.ln", d);
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let p = format!("dec.{i}");
                DecoderLayer {
                    ln_self: LayerNormIds::init(store, &format!("{p}.ln_self"), d),
                    self_attn: MultiHeadAttention::init(store, &format!("{p}.self_attn"), d, h, rng),
                    ln_cross: LayerNormIds::init(store, &format!("{p}.ln_cross"), d),
                    cross_attn: MultiHeadAttention::init(store, &format!("{p}.cross_attn"), d, h, rng),
                    ln_ff: LayerNormIds::init(store, &format!("{p}.ln_ff"), d),
                    ff: FeedForwardIds::init(store, &format!("{p}.ff"), d, f, rng),
                }
            })
            .collect();
        let dec_ln = LayerNormIds::init(store, "dec.ln", d);
        let out_w = (!config.tie_embeddings).then(|| store.add_normal("out.w", &[d, v], INIT_STD, rng));
        let out_b = store.add_zeros("out.b", &[v]);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            encoder,
            enc_ln,
            decoder,
            dec_ln,
            out_w,
            out_b,
        })
    }

    pub fn out_bias(&self) -> ParamId {
        self.out_b
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.config.max_positions {
            return Err(Error::TooLong {
                len: n,
                max: self.config.max_positions,
            });
        }
        if n == 0 {
            return Err(Error::Sequence("empty input".into()));
        }
        Ok(())
    }

    fn embed<'t>(&self, tape: &'t Tape, store: &ParamStore, ids: &[usize]) -> Result<Var<'t>> {
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.param(store, self.tok_emb).gather_rows(ids)?;
        let pos = tape.param(store, self.pos_emb).gather_rows(&positions)?;
        Ok(tok.add(pos)?)
    }

    /// Encoder states, one row per input token. `ids` may carry trailing PAD,
    /// which is excluded as an attention key.
    pub fn encode<'t>(&self, tape: &'t Tape, store: &ParamStore, ids: &[usize]) -> Result<Var<'t>> {
        self.check_len(ids.len())?;
        let valid = padding_mask(ids);
        let n = ids.len();
        let allow: Vec<bool> = (0..n).flat_map(|_| valid.iter().copied()).collect();
        let mut x = self.embed(tape, store, ids)?;
        for layer in &self.encoder {
            let h = layer.ln_attn.apply(tape, store, x)?;
            x = x.add(layer.attn.forward(tape, store, h, h, &allow)?)?;
            let h = layer.ln_ff.apply(tape, store, x)?;
            x = x.add(layer.ff.apply(tape, store, h)?)?;
        }
        self.enc_ln.apply(tape, store, x)
    }

    /// Decoder states for inputs `dec_in` (typically `y₀ … y_{n-1}`), row `t`
    /// attending causally to `dec_in[..=t]` and to the valid encoder rows.
    pub fn decode_states<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        dec_in: &[usize],
        enc: Hidden<'t, '_>,
    ) -> Result<Var<'t>> {
        self.check_len(dec_in.len())?;
        let enc_rows = enc.states.shape()[0];
        if enc.valid.len() != enc_rows {
            return Err(crate::tensor::TensorError::Shape {
                op: "decode_states",
                lhs: enc.states.shape(),
                rhs: vec![enc.valid.len()],
            }
            .into());
        }
        let n = dec_in.len();
        let dvalid = padding_mask(dec_in);
        let self_allow: Vec<bool> = (0..n)
            .flat_map(|i| (0..n).map(move |j| j <= i).zip(dvalid.clone()).map(|(c, v)| c && v))
            .collect();
        let cross_allow: Vec<bool> = (0..n).flat_map(|_| enc.valid.iter().copied()).collect();
        let mut x = self.embed(tape, store, dec_in)?;
        for layer in &self.decoder {
            let h = layer.ln_self.apply(tape, store, x)?;
            x = x.add(layer.self_attn.forward(tape, store, h, h, &self_allow)?)?;
            let h = layer.ln_cross.apply(tape, store, x)?;
            x = x.add(layer.cross_attn.forward(tape, store, h, enc.states, &cross_allow)?)?;
            let h = layer.ln_ff.apply(tape, store, x)?;
            x = x.add(layer.ff.apply(tape, store, h)?)?;
        }
        self.dec_ln.apply(tape, store, x)
    }

    /// Vocabulary logits for each row of `states`.
    pub fn logits<'t>(&self, tape: &'t Tape, store: &ParamStore, states: Var<'t>) -> Result<Var<'t>> {
        let proj = match self.out_w {
            Some(w) => states.matmul(tape.param(store, w))?,
            None => states.matmul_t(tape.param(store, self.tok_emb))?,
        };
        Ok(proj.add_row(tape.param(store, self.out_b))?)
    }

    /// Probability vector over the vocabulary for one decoder state.
    pub fn token_distribution(&self, store: &ParamStore, state: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let s = tape.constant(Tensor::matrix(1, state.len(), state.to_vec())?);
        Ok(self.logits(&tape, store, s)?.softmax()?.value().into_data())
    }

    /// Label-smoothed token NLL averaged over the non-PAD targets of `y`.
    pub fn nll_from_states<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        states: Var<'t>,
        y: &[usize],
        smoothing: f64,
    ) -> Result<Var<'t>> {
        let targets = &y[1..];
        let logp = self.logits(tape, store, states)?.log_softmax()?;
        let per_token = smoothed_token_nll(logp, targets, smoothing)?;
        let count = targets.iter().filter(|&&t| t != PAD).count().max(1) as f64;
        let weights: Vec<f64> = targets
            .iter()
            .map(|&t| if t == PAD { 0.0 } else { 1.0 / count })
            .collect();
        Ok(per_token.weighted_sum(&weights)?)
    }

    /// Encoder and decoder forward plus [`Self::nll_from_states`].
    pub fn nll_loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: &[usize],
        y: &[usize],
        smoothing: f64,
    ) -> Result<Var<'t>> {
        Ok(self.forward_nll(tape, store, x, y, smoothing)?.loss)
    }

    pub fn forward_nll<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: &[usize],
        y: &[usize],
        smoothing: f64,
    ) -> Result<NllForward<'t>> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        if y.len() < 2 {
            return Err(Error::Sequence("target needs at least BOS and one token".into()));
        }
        let enc = self.encode(tape, store, x)?;
        let valid = padding_mask(x);
        let dec = self.decode_states(tape, store, &y[..y.len() - 1], Hidden { states: enc, valid: &valid })?;
        let loss = self.nll_from_states(tape, store, dec, y, smoothing)?;
        Ok(NllForward {
            encoder: enc,
            decoder: dec,
            loss,
        })
    }

    /// Precomputes cross-attention keys and values for incremental decoding.
    pub fn encoder_memory(&self, store: &ParamStore, enc_states: &Tensor, valid: &[bool]) -> EncoderMemory {
        let layers = self
            .decoder
            .iter()
            .map(|layer| {
                let a = &layer.cross_attn;
                let m = enc_states.rows();
                let d = self.config.d_model;
                let mut k = Vec::with_capacity(m * d);
                let mut v = Vec::with_capacity(m * d);
                for r in 0..m {
                    k.extend(linear(enc_states.row(r), store.value(a.wk)));
                    v.extend(affine(enc_states.row(r), store.value(a.wv), store.value(a.bv)));
                }
                (k, v)
            })
            .collect();
        EncoderMemory {
            layers,
            valid: valid.to_vec(),
        }
    }

    /// Feeds one token at the next position and returns log-probabilities
    /// for the following token. Tape-free; shares no code with
    /// [`Self::decode_states`] beyond the raw kernels.
    pub fn step(&self, store: &ParamStore, memory: &EncoderMemory, state: &mut DecoderState, token: usize) -> Vec<f64> {
        let x = self.step_state(store, memory, state, token);
        let v = self.config.vocab_size;
        let mut logits = store.value(self.out_b).data().to_vec();
        match self.out_w {
            Some(w) => kernels::matmul_acc(&x, store.value(w).data(), &mut logits, 1, x.len(), v),
            None => kernels::matmul_nt_acc(&x, store.value(self.tok_emb).data(), &mut logits, 1, x.len(), v),
        }
        let mut out = vec![0.0; v];
        kernels::log_softmax_row(&logits, &mut out);
        out
    }

    /// The final-layer-normed decoder state for `token` at the next position.
    pub fn step_state(
        &self,
        store: &ParamStore,
        memory: &EncoderMemory,
        state: &mut DecoderState,
        token: usize,
    ) -> Vec<f64> {
        let d = self.config.d_model;
        let pos = state.position;
        let tok = store.value(self.tok_emb).row(token);
        let p = store.value(self.pos_emb).row(pos.min(self.config.max_positions - 1));
        let mut x: Vec<f64> = tok.iter().zip(p).map(|(a, b)| a + b).collect();
        if state.self_kv.len() != self.decoder.len() {
            state.self_kv = vec![(Vec::new(), Vec::new()); self.decoder.len()];
        }
        for (layer, (cache, (mk, mv))) in self
            .decoder
            .iter()
            .zip(state.self_kv.iter_mut().zip(&memory.layers))
        {
            let a = &layer.self_attn;
            let h = layer.ln_self.apply_row(store, &x);
            let q = affine(&h, store.value(a.wq), store.value(a.bq));
            cache.0.extend(linear(&h, store.value(a.wk)));
            cache.1.extend(affine(&h, store.value(a.wv), store.value(a.bv)));
            let ctx = attend_cached(&q, &cache.0, &cache.1, None, a.heads);
            let o = affine(&ctx, store.value(a.wo), store.value(a.bo));
            x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);

            let c = &layer.cross_attn;
            let h = layer.ln_cross.apply_row(store, &x);
            let q = affine(&h, store.value(c.wq), store.value(c.bq));
            let ctx = attend_cached(&q, mk, mv, Some(&memory.valid), c.heads);
            let o = affine(&ctx, store.value(c.wo), store.value(c.bo));
            x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);

            let h = layer.ln_ff.apply_row(store, &x);
            let o = layer.ff.apply_row(store, &h);
            x.iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);
        }
        debug_assert_eq!(x.len(), d);
        state.position += 1;
        self.dec_ln.apply_row(store, &x)
    }

    /// Encoder states as a plain tensor, without recording gradients.
    pub fn encode_values(&self, store: &ParamStore, ids: &[usize]) -> Result<Tensor> {
        let tape = Tape::inference();
        Ok(self.encode(&tape, store, ids)?.value())
    }
}

/// Per-row `(1-ε)·(-log p(gold)) + ε·mean_v(-log p(v))` from row-wise
/// log-probabilities.
pub fn smoothed_token_nll<'t>(logp: Var<'t>, targets: &[usize], smoothing: f64) -> Result<Var<'t>> {
    let gold = logp.pick(targets)?;
    if smoothing > 0.0 {
        Ok(gold
            .scale(-(1.0 - smoothing))?
            .add(logp.row_mean()?.scale(-smoothing)?)?)
    } else {
        Ok(gold.scale(-1.0)?)
    }
}

/// Outputs of the teacher-forced forward pass, kept so contrastive terms can
/// reuse the online encoder and decoder states.
#[derive(Debug, Clone, Copy)]
pub struct NllForward<'t> {
    pub encoder: Var<'t>,
    pub decoder: Var<'t>,
    pub loss: Var<'t>,
}

/// Cross-attention keys/values per decoder layer.
#[derive(Debug, Clone)]
pub struct EncoderMemory {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    valid: Vec<bool>,
}

/// Self-attention cache of an incremental decode.
#[derive(Debug, Clone, Default)]
pub struct DecoderState {
    position: usize,
    self_kv: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DecoderState {
    pub fn position(&self) -> usize {
        self.position
    }
}
