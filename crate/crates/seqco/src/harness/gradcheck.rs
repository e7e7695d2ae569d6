use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{grad_check_state, GradCheckReport};
use crate::error::Result;
use crate::model::{ModelConfig, BOS, EOS};
use crate::objective::{SeqCo, SeqCoConfig, SimilarityMode};
use crate::params::ParamStore;

pub const TOLERANCE: f64 = 1e-3;

/// Width-8 model used by the full-loss check.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        heads: 2,
        ffn_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        max_positions: 16,
        tie_embeddings: false,
    }
}

fn scramble(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let noise = Normal::new(0.0, 0.4).expect("valid std");
    for p in store.iter_mut() {
        let gain = p.name.ends_with(".gain");
        for v in p.value.data_mut() {
            *v = noise.sample(rng) + if gain { 1.0 } else { 0.0 };
        }
    }
}

/// Finite-difference check of the combined loss with every similarity term
/// active, over all online parameters. Parameters are redrawn at a larger
/// scale than training init so gradients sit well above difference noise,
/// and the target is drawn independently of the online network.
pub fn check_combined_loss(seed: u64, mode: SimilarityMode) -> Result<GradCheckReport> {
    let mc = check_model_config();
    let sc = SeqCoConfig {
        lambda_x_y: 1.0,
        lambda_x_yhat: 0.5,
        lambda_y_yhat: 1.0,
        lambda_dec_y_yhat: 0.5,
        similarity: mode,
        proj_hidden: 8,
        align_heads: 2,
        ..SeqCoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = SeqCo::init(&mc, &sc, &mut rng)?;
    scramble(&mut net.online.store, &mut rng);
    scramble(&mut net.target.store, &mut rng);
    let x = [BOS, 5, 6, 7, EOS];
    let y = [BOS, 8, EOS];
    let y_hat = [BOS, 9, EOS];
    grad_check_state(
        &mut net,
        |n: &mut SeqCo| &mut n.online.store,
        |tape, n: &SeqCo| Ok(n.combined_loss(tape, &x, &y, Some(&y_hat), 0.1)?.total),
        |_| true,
        TOLERANCE,
    )
}
