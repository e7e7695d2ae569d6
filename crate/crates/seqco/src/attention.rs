use rand::Rng;

use crate::autodiff::{concat_cols, Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{kernels, Result, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Scaled dot-product attention with `heads` heads over a shared `d`-wide
/// projection. Inputs are row matrices; weights multiply on the right.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    /// Keys carry no bias: softmax is invariant to it.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "heads must divide the model width");
        let mut w = |n: &str| store.add_normal(format!("{prefix}.{n}"), &[dim, dim], INIT_STD, rng);
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |n: &str| store.add_zeros(format!("{prefix}.{n}"), &[dim]);
        let (bq, bv, bo) = (b("bq"), b("bv"), b("bo"));
        Self {
            heads,
            dim,
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn project<'t>(tape: &'t Tape, store: &ParamStore, x: Var<'t>, w: ParamId, b: ParamId) -> Result<Var<'t>> {
        x.matmul(tape.param(store, w))?.add_row(tape.param(store, b))
    }

    /// `query` is `[n×d]`, `memory` is `[m×d]`, `allow` is an `n×m` row-major
    /// mask of permitted query→key pairs.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        query: Var<'t>,
        memory: Var<'t>,
        allow: &[bool],
    ) -> Result<Var<'t>> {
        let q = Self::project(tape, store, query, self.wq, self.bq)?;
        let k = memory.matmul(tape.param(store, self.wk))?;
        let v = Self::project(tape, store, memory, self.wv, self.bv)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let weights = qh.matmul_t(kh)?.scale(scale)?.masked_softmax(Some(allow))?;
            outs.push(weights.matmul(vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { concat_cols(&outs)? };
        Self::project(tape, store, joined, self.wo, self.bo)
    }

    /// Attention weights of head `head`, for inspection.
    pub fn weights(
        &self,
        store: &ParamStore,
        query: &Tensor,
        memory: &Tensor,
        allow: &[bool],
        head: usize,
    ) -> Result<Tensor> {
        let tape = Tape::inference();
        let q = Self::project(&tape, store, tape.constant(query.clone()), self.wq, self.bq)?;
        let k = tape.constant(memory.clone()).matmul(tape.param(store, self.wk))?;
        let dh = self.dim / self.heads;
        let w = q
            .slice_cols(head * dh, dh)?
            .matmul_t(k.slice_cols(head * dh, dh)?)?
            .scale(1.0 / (dh as f64).sqrt())?
            .masked_softmax(Some(allow))?;
        Ok(w.value())
    }
}

/// Row vector times a `[d_in×d_out]` weight plus bias.
pub(crate) fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = b.data().to_vec();
    kernels::matmul_acc(x, w.data(), &mut out, 1, x.len(), w.cols());
    out
}

/// Row vector times a `[d_in×d_out]` weight.
pub(crate) fn linear(x: &[f64], w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    kernels::matmul_acc(x, w.data(), &mut out, 1, x.len(), w.cols());
    out
}

/// One query row attending over cached keys/values (`[m×d]` row-major).
pub(crate) fn attend_cached(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    allow: Option<&[bool]>,
    heads: usize,
) -> Vec<f64> {
    let d = q.len();
    let m = keys.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; m];
    let mut probs = vec![0.0; m];
    for h in 0..heads {
        let qs = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = kernels::dot(qs, &keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
        }
        kernels::softmax_row(&scores, allow, &mut probs);
        for (j, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for c in 0..dh {
                out[h * dh + c] += p * values[j * d + h * dh + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_has_query_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::init(&mut store, "a", 8, 2, &mut rng);
        let tape = Tape::new();
        let q = tape.constant(Tensor::full(&[3, 8], 0.1));
        let m = tape.constant(Tensor::full(&[5, 8], 0.2));
        let out = mha.forward(&tape, &store, q, m, &[true; 15]).unwrap();
        assert_eq!(out.shape(), vec![3, 8]);
    }
}
