//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fail. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test -p seqco --test acceptance -- 1 3`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use seqco::autodiff::{concat_cols, grad_check, grad_check_state, GradCheckReport};
use seqco::decoding::{beam_search, greedy_decode, has_repeated_trigram, DecodeConfig};
use seqco::harness::gradcheck::{check_combined_loss, check_model_config};
use seqco::harness::runlog::smoothed;
use seqco::harness::{ablate, default_grid, ExperimentConfig, Silent, Trainer};
use seqco::metrics::{lcs_len, rouge_l, rouge_n, RougeScore};
use seqco::model::{smoothed_token_nll, BOS, EOS, RESERVED};
use seqco::objective::{ema_update, Mapping, SeqCo, SeqCoConfig, SimilarityMode};
use seqco::{ModelConfig, ParamStore, Tape, Tensor, Transformer};

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn scramble(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    let noise = Normal::new(0.0, std).unwrap();
    for p in store.iter_mut() {
        let gain = p.name.ends_with(".gain");
        for v in p.value.data_mut() {
            *v = noise.sample(rng) + if gain { 1.0 } else { 0.0 };
        }
    }
}

// ---------------------------------------------------------------- 1

fn criterion_gradients() -> Outcome {
    const PRIMITIVE_TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w34 = random_tensor(&mut rng, &[3, 4]);
    let weights: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let other = random_tensor(&mut rng, &[3, 4]);
    let sq = random_tensor(&mut rng, &[4, 4]);
    let gain = random_tensor(&mut rng, &[4]);
    let bias = random_tensor(&mut rng, &[4]);
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 3 || i == 3).collect();
    let w = &weights;

    let mut results: Vec<(&str, GradCheckReport)> = Vec::new();
    let x = random_tensor(&mut rng, &[3, 4]);
    macro_rules! check {
        ($name:expr, $input:expr, |$t:ident, $v:ident| $body:expr) => {
            results.push((
                $name,
                grad_check(|$t, $v| $body, &$input, PRIMITIVE_TOL).map_err(|e| format!("{}: {e}", $name))?,
            ));
        };
    }
    check!("matmul", x, |t, v| v.matmul(t.constant(sq.clone()))?.weighted_sum(w));
    check!("matmul rhs", sq, |t, v| t.constant(x.clone()).matmul(v)?.weighted_sum(w));
    check!("sum(A·B)", random_tensor(&mut rng, &[3, 3]), |t, v| v
        .matmul(t.constant(Tensor::matrix(3, 3, (0..9).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap()))?
        .sum());
    check!("matmul_t", x, |t, v| v.matmul_t(t.constant(other.clone()))?.sum()?.scale(0.5));
    check!("transpose", x, |_t, v| v.transpose()?.reshape(&[12])?.weighted_sum(w));
    check!("reshape", x, |_t, v| v.reshape(&[2, 6])?.weighted_sum(w));
    check!("add", x, |t, v| v.add(t.constant(other.clone()))?.mul(v)?.weighted_sum(w));
    check!("sub", x, |t, v| t.constant(other.clone()).sub(v)?.mul(v)?.weighted_sum(w));
    check!("mul", x, |t, v| v.mul(t.constant(w34.clone()))?.mul(v)?.weighted_sum(w));
    check!("add_row", bias, |t, v| t.constant(x.clone()).add_row(v)?.mul(t.constant(w34.clone()))?.sum());
    check!("scale", x, |_t, v| v.scale(-1.7)?.mul(v)?.weighted_sum(w));
    check!("add_scalar", x, |_t, v| v.add_scalar(0.3)?.mul(v)?.weighted_sum(w));
    check!("relu", away_from_zero(&mut rng, &[3, 4]), |_t, v| v.relu()?.weighted_sum(w));
    check!("softmax", x, |_t, v| v.softmax()?.weighted_sum(w));
    check!("masked_softmax", x, |_t, v| v.masked_softmax(Some(&mask))?.weighted_sum(w));
    check!("log_softmax", x, |_t, v| v.log_softmax()?.weighted_sum(w));
    check!("layer_norm x", x, |t, v| v
        .layer_norm(t.constant(gain.clone()), t.constant(bias.clone()))?
        .weighted_sum(w));
    check!("layer_norm gain", gain, |t, v| t
        .constant(x.clone())
        .layer_norm(v, t.constant(bias.clone()))?
        .weighted_sum(w));
    check!("layer_norm bias", bias, |t, v| t
        .constant(x.clone())
        .layer_norm(t.constant(gain.clone()), v)?
        .weighted_sum(w));
    check!("slice_cols", x, |_t, v| v.slice_cols(1, 2)?.mul(v.slice_cols(2, 2)?)?.sum());
    check!("slice_rows", x, |_t, v| v.slice_rows(1, 2)?.mul(v.slice_rows(0, 2)?)?.sum());
    check!("gather_rows", x, |_t, v| v.gather_rows(&[2, 0, 2])?.mul(v)?.sum());
    check!("pick", x, |_t, v| v.log_softmax()?.pick(&[1, 3, 0])?.sum());
    check!("row_mean", x, |_t, v| v.mul(v)?.row_mean()?.weighted_sum(&w[..3]));
    check!("cosine_rows", x, |t, v| v.cosine_rows(t.constant(other.clone()))?.weighted_sum(&w[..3]));
    check!("cosine_rows rhs", other, |t, v| t.constant(x.clone()).cosine_rows(v)?.sum());
    check!("weighted_sum", x, |_t, v| v.mul(v)?.weighted_sum(w));
    check!("concat_cols", x, |_t, v| concat_cols(&[v, v.scale(2.0)?])?.mul(concat_cols(&[v, v])?)?.sum());
    check!("map(tanh)", x, |_t, v| v.map(f64::tanh, |u| 1.0 - u.tanh().powi(2))?.weighted_sum(w));
    let mut logits = ParamStore::new();
    let id = logits.add("logits", x.clone());
    results.push((
        "label-smoothed nll",
        grad_check_state(
            &mut logits,
            |s| s,
            |t, s| smoothed_token_nll(t.param(s, id).log_softmax()?, &[1, 2, 0], 0.1)?.sum().map_err(Into::into),
            |_| true,
            PRIMITIVE_TOL,
        )
        .map_err(|e: seqco::Error| e.to_string())?,
    ));

    let mut failed: Vec<String> = results
        .iter()
        .filter(|(_, r)| !r.passed)
        .map(|(n, r)| format!("{n} {:.1e}", r.max_rel_err))
        .collect();

    // composite transformer forward
    let mc = check_model_config();
    let mut store = ParamStore::new();
    let model = Transformer::init(&mc, &mut store, &mut rng).map_err(|e| e.to_string())?;
    scramble(&mut store, &mut rng, 0.4);
    let tf = grad_check_state(
        &mut store,
        |s| s,
        |t, s| model.nll_loss(t, s, &[BOS, 5, 6, 7, EOS], &[BOS, 8, 9, EOS], 0.1),
        |_| true,
        PRIMITIVE_TOL,
    )
    .map_err(|e: seqco::Error| e.to_string())?;
    if !tf.passed {
        failed.push(format!("transformer {:.1e}", tf.max_rel_err));
    }

    let mut worst_full: f64 = 0.0;
    for mode in [SimilarityMode::Mha, SimilarityMode::Cls] {
        let r = check_combined_loss(0, mode).map_err(|e| e.to_string())?;
        worst_full = worst_full.max(r.max_rel_err);
        if !r.passed {
            failed.push(format!("combined {mode:?} {:.1e}", r.max_rel_err));
        }
    }
    let elapsed = start.elapsed();
    ensure(failed.is_empty(), || format!("failing checks: {}", failed.join(", ")))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
    let worst_prim = results.iter().map(|(_, r)| r.max_rel_err).fold(tf.max_rel_err, f64::max);
    Ok(format!(
        "{} primitive checks + transformer (max {worst_prim:.1e}), combined loss MHA/CLS max {worst_full:.1e}, {elapsed:.1?}",
        results.len()
    ))
}

// ---------------------------------------------------------------- 2

fn stop_gradient_net(seed: u64) -> SeqCo {
    let sc = SeqCoConfig {
        proj_hidden: 8,
        align_heads: 2,
        ..SeqCoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = SeqCo::init(&check_model_config(), &sc, &mut rng).unwrap();
    scramble(&mut net.online.store, &mut rng, 0.3);
    scramble(&mut net.target.store, &mut rng, 0.3);
    net
}

fn criterion_stop_gradient() -> Outcome {
    let x = [BOS, 5, 6, 7, EOS];
    let y = [BOS, 8, 9, EOS];
    let encoder_path = |n: &str| n == "tok_emb" || n == "pos_emb" || n.starts_with("enc.") || n.starts_with("g.");
    let cases: [(&str, Mapping<'_>, Box<dyn Fn(&str) -> bool>); 2] = [
        (
            "encoder",
            Mapping::Encoder,
            Box::new(move |n: &str| encoder_path(n) || n.starts_with("align.")),
        ),
        (
            "decoder",
            Mapping::Decoder(&x),
            Box::new(move |n: &str| encoder_path(n) || n.starts_with("dec.") || n.starts_with("align.")),
        ),
    ];
    let mut summary = Vec::new();
    for (label, mapping, on_path) in cases {
        let net = stop_gradient_net(5);
        let tape = Tape::new();
        let loss = net.symmetric_loss(&tape, &x, &y, mapping).map_err(|e| e.to_string())?;
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;
        let target_with = grads.count_for(&net.target.store);
        ensure(target_with == 0, || format!("{label}: {target_with} target parameters got gradients"))?;
        let mut on = 0;
        for (id, p) in net.online.store.iter() {
            let has = grads.param(&net.online.store, id).is_some();
            if on_path(&p.name) {
                on += 1;
                ensure(has, || format!("{label}: on-path {} has no gradient", p.name))?;
            } else {
                ensure(!has, || format!("{label}: off-path {} has a gradient", p.name))?;
            }
        }
        summary.push(format!("{label}: 0/{} target, {on}/{on} on-path online", net.target.store.len()));
    }
    Ok(summary.join("; "))
}

// ---------------------------------------------------------------- 3

fn criterion_identities() -> Outcome {
    let x = [BOS, 5, 6, 7, EOS];
    let y = [BOS, 8, 9, EOS];
    let y_hat = [BOS, 9, 10, EOS];
    for mode in [SimilarityMode::Mha, SimilarityMode::Cls] {
        for mapping in [Mapping::Encoder, Mapping::Decoder(&x)] {
            let mut net = stop_gradient_net(9);
            net.config.similarity = mode;
            let t1 = Tape::new();
            let sym = net.symmetric_loss(&t1, &x, &y, mapping).unwrap().item();
            let t2 = Tape::new();
            let a = net.directional_loss(&t2, &x, &y, mapping).unwrap().item();
            let b = net.directional_loss(&t2, &y, &x, mapping).unwrap().item();
            ensure(sym.to_bits() == (a + b).to_bits(), || {
                format!("{mode:?}/{mapping:?}: symmetric {sym} vs {a} + {b}")
            })?;
        }
    }

    let mut net = stop_gradient_net(3);
    net.config = SeqCoConfig::default();
    let t1 = Tape::new();
    let combined = net.combined_loss(&t1, &x, &y, Some(&y_hat), 0.1).unwrap().total.item();
    let t2 = Tape::new();
    let nll = net.model.nll_loss(&t2, &net.online.store, &x, &y, 0.1).unwrap().item();
    ensure(combined.to_bits() == nll.to_bits(), || format!("all-zero combined {combined} vs nll {nll}"))?;

    let online_values: Vec<Vec<f64>> = net.online.store.iter().map(|(_, p)| p.value.data().to_vec()).collect();
    let before: Vec<Vec<f64>> = net.target.store.iter().map(|(_, p)| p.value.data().to_vec()).collect();
    net.ema_update(1.0).unwrap();
    for ((_, p), b) in net.target.store.iter().zip(&before) {
        ensure(p.value.data() == &b[..], || format!("tau=1 changed {}", p.name))?;
    }
    net.ema_update(0.0).unwrap();
    for ((_, p), o) in net.target.store.iter().zip(&online_values) {
        ensure(p.value.data() == &o[..o.len()], || format!("tau=0 did not copy {}", p.name))?;
    }

    let mut net = stop_gradient_net(4);
    let initial = max_gap(&net);
    let tau: f64 = 0.99;
    let mut worst: f64 = 0.0;
    for n in 1..=300 {
        ema_update(&mut net.target, &net.online, tau).unwrap();
        let err = (max_gap(&net) - tau.powi(n) * initial).abs();
        worst = worst.max(err);
    }
    ensure(worst <= 1e-6, || format!("tau^n decay off by {worst:.2e}"))?;
    Ok(format!(
        "symmetric = sum of directions (bitwise, 4 cases); zero-weight combined = nll (bitwise); tau 0/1 exact; tau^n max err {worst:.1e}"
    ))
}

fn max_gap(net: &SeqCo) -> f64 {
    net.target
        .store
        .iter()
        .zip(net.online.store.iter())
        .flat_map(|((_, t), (_, o))| t.value.data().iter().zip(o.value.data()).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 4

/// Clipped overlap by explicit matching: each reference n-gram occurrence can
/// be claimed once.
fn brute_rouge_n(c: &[u8], r: &[u8], n: usize) -> RougeScore {
    let grams = |s: &[u8]| -> Vec<Vec<u8>> {
        if s.len() < n {
            Vec::new()
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let (cg, rg) = (grams(c), grams(r));
    let mut used = vec![false; rg.len()];
    let mut hits = 0;
    for g in &cg {
        if let Some(k) = (0..rg.len()).find(|&k| !used[k] && rg[k] == *g) {
            used[k] = true;
            hits += 1;
        }
    }
    RougeScore::from_counts(hits, cg.len(), rg.len())
}

/// Full LCS table, filled from the end.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] { 1 + t[i + 1][j + 1] } else { t[i + 1][j].max(t[i][j + 1]) };
        }
    }
    t[0][0]
}

fn criterion_metrics() -> Outcome {
    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }
    let (c, r) = (w("the cat sat"), w("the cat ran"));
    ensure(rouge_n(&c, &r, 1).f1 == 2.0 / 3.0, || "R1 hand case".into())?;
    ensure(rouge_n(&c, &r, 2).f1 == 0.5, || "R2 hand case".into())?;
    let l = rouge_l(&w("the cat sat on mat"), &w("the cat on mat"));
    ensure(
        l.precision == 0.8 && l.recall == 1.0 && l.f1 == 8.0 / 9.0,
        || format!("LCS hand case {l:?}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let mut seq = || -> Vec<u8> {
            let n = rng.random_range(1..=12);
            (0..n).map(|_| rng.random_range(0..5)).collect()
        };
        let (a, b) = (seq(), seq());
        for n in 1..=3 {
            ensure(rouge_n(&a, &b, n) == brute_rouge_n(&a, &b, n), || format!("rouge_{n} {a:?} {b:?}"))?;
        }
        let lcs = brute_lcs(&a, &b);
        ensure(lcs_len(&a, &b) == lcs, || format!("lcs {a:?} {b:?}"))?;
        ensure(rouge_l(&a, &b) == RougeScore::from_counts(lcs, a.len(), b.len()), || {
            format!("rouge_l {a:?} {b:?}")
        })?;
    }
    Ok("hand cases exact; 100 random pairs match brute-force n-gram matching and LCS tables".into())
}

// ---------------------------------------------------------------- 5

fn random_model(seed: u64) -> (Transformer, ParamStore) {
    let mc = ModelConfig {
        vocab_size: 14,
        d_model: 16,
        heads: 2,
        ffn_dim: 32,
        encoder_layers: 1,
        decoder_layers: 1,
        max_positions: 32,
        tie_embeddings: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Transformer::init(&mc, &mut store, &mut rng).unwrap();
    scramble(&mut store, &mut rng, 0.5);
    (model, store)
}

fn random_source(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<usize> {
    let n = rng.random_range(1..=10);
    let mut x = vec![BOS];
    x.extend((0..n).map(|_| rng.random_range(RESERVED..vocab)));
    x.push(EOS);
    x
}

fn criterion_decoding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..50 {
        let (model, store) = random_model(seed);
        let x = random_source(&mut rng, 14);
        for block in [false, true] {
            let cfg = DecodeConfig {
                beam_size: 1,
                max_len: 12,
                min_len: rng.random_range(0..4),
                length_penalty: 0.0,
                block_trigrams: block,
            };
            let b = beam_search(&model, &store, &x, &cfg).map_err(|e| e.to_string())?;
            let g = greedy_decode(&model, &store, &x, &cfg).map_err(|e| e.to_string())?;
            ensure(b.tokens == g.tokens, || format!("model {seed}: beam {:?} vs greedy {:?}", b.tokens, g.tokens))?;
        }
    }

    let mut repeats = 0;
    let mut bound_violations = 0;
    let mut unblocked_repeats = 0;
    let mut models: Vec<_> = (0..20).map(|s| random_model(100 + s)).collect();
    // a model that loves one token stresses blocking
    {
        let (m, s) = &mut models[0];
        let b = s.get_mut(m.out_bias());
        b.value.data_mut()[5] += 8.0;
    }
    for i in 0..1000 {
        let (model, store) = &models[i % models.len()];
        let x = random_source(&mut rng, 14);
        let min_len = rng.random_range(0..5);
        let max_len = rng.random_range(min_len + 1..=14);
        let cfg = DecodeConfig {
            beam_size: rng.random_range(1..=5),
            max_len,
            min_len,
            length_penalty: rng.random_range(0.0..2.0),
            block_trigrams: true,
        };
        let hyp = beam_search(model, store, &x, &cfg).map_err(|e| e.to_string())?;
        let seq = hyp.sequence();
        let content = seq.content();
        if has_repeated_trigram(content) {
            repeats += 1;
        }
        let free = DecodeConfig {
            block_trigrams: false,
            ..cfg.clone()
        };
        if has_repeated_trigram(beam_search(model, store, &x, &free).map_err(|e| e.to_string())?.sequence().content()) {
            unblocked_repeats += 1;
        }
        if content.len() < min_len || content.len() > max_len {
            bound_violations += 1;
        }
    }
    ensure(repeats == 0, || format!("{repeats} decodes repeated a trigram"))?;
    ensure(bound_violations == 0, || format!("{bound_violations} decodes broke length bounds"))?;
    Ok(format!(
        "beam-1 = greedy on 50 models; 1000 blocked decodes: 0 repeated trigrams ({unblocked_repeats} without blocking), 0 length violations"
    ))
}

// ---------------------------------------------------------------- 6

/// Toy task settings shared by the convergence runs.
fn toy_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig::with_seed(seed)
}

struct ConvergenceRun {
    name: String,
    rouge1: f64,
    sim_start: Option<f64>,
    sim_end: Option<f64>,
    nll_start: f64,
    nll_end: f64,
    elapsed: Duration,
}

fn converge(name: &str, weights: [f64; 4]) -> std::result::Result<ConvergenceRun, String> {
    let mut cfg = toy_config(1);
    cfg.seqco.lambda_x_y = weights[0];
    cfg.seqco.lambda_x_yhat = weights[1];
    cfg.seqco.lambda_y_yhat = weights[2];
    cfg.seqco.lambda_dec_y_yhat = weights[3];
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let outcome = trainer.run(&mut Silent).map_err(|e| format!("{name}: {e}"))?;
    let elapsed = start.elapsed();
    let sims: Vec<f64> = trainer.log.steps().filter_map(|s| s.similarity()).collect();
    let (sim_start, sim_end) = if sims.len() >= 2000 {
        let s = smoothed(&sims, 50);
        (Some(s[49]), Some(s[1999]))
    } else {
        (None, None)
    };
    let nll = smoothed(&trainer.log.steps().map(|s| s.nll).collect::<Vec<_>>(), 50);
    Ok(ConvergenceRun {
        name: name.to_string(),
        nll_start: nll[49],
        nll_end: nll[nll.len() - 1],
        rouge1: outcome.report.rouge1.f1,
        sim_start,
        sim_end,
        elapsed,
    })
}

fn criterion_convergence() -> Outcome {
    let mut runs = vec![converge("nll-only", [0.0; 4])?];
    let terms = ["x-y", "x-yhat", "y-yhat", "dec-y-yhat"];
    for lambda in [0.5, 1.0] {
        for (k, term) in terms.iter().enumerate() {
            let mut w = [0.0; 4];
            w[k] = lambda;
            runs.push(converge(&format!("{term}@{lambda}"), w)?);
        }
    }
    let base = runs[0].rouge1;
    let mut problems = Vec::new();
    let mut lines = Vec::new();
    for r in &runs {
        lines.push(format!(
            "{}: R1 {:.4} (Δ {:+.4}) nll {:.3}→{:.3}{} {:.0?}",
            r.name,
            r.rouge1,
            r.rouge1 - base,
            r.nll_start,
            r.nll_end,
            match (r.sim_start, r.sim_end) {
                (Some(a), Some(b)) => format!(" sim {a:.3}→{b:.3}"),
                _ => String::new(),
            },
            r.elapsed
        ));
        if r.rouge1 < 0.95 {
            problems.push(format!("{} R1 {:.4}", r.name, r.rouge1));
        }
        if r.elapsed > Duration::from_secs(300) {
            problems.push(format!("{} took {:.0?}", r.name, r.elapsed));
        }
        if r.nll_end >= r.nll_start {
            problems.push(format!("{} nll rose {:.3}→{:.3}", r.name, r.nll_start, r.nll_end));
        }
        if let (Some(a), Some(b)) = (r.sim_start, r.sim_end) {
            if b >= a {
                problems.push(format!("{} similarity loss rose {a:.3}→{b:.3}", r.name));
            }
        }
    }
    for l in &lines {
        println!("    {l}");
    }
    ensure(problems.is_empty(), || problems.join("; "))?;
    Ok(format!("all {} runs reach R1 ≥ 0.95 with falling nll and similarity loss", runs.len()))
}

// ---------------------------------------------------------------- 7

fn criterion_ablation() -> Outcome {
    let mut cfg = toy_config(2);
    cfg.corpus.train_size = 400;
    cfg.corpus.test_size = 20;
    cfg.schedule.total_steps = 40;
    cfg.schedule.warmup_steps = 10;
    cfg.eval_interval = 40;
    let grid = default_grid(1.0);
    let a = ablate(&cfg, &grid, &mut Silent).map_err(|e| e.to_string())?;
    let b = ablate(&cfg, &grid, &mut Silent).map_err(|e| e.to_string())?;
    ensure(a.rows.len() == 10, || format!("{} rows", a.rows.len()))?;
    let table = a.to_table();
    ensure(table.lines().count() == 11, || format!("table has {} lines", table.lines().count()))?;
    ensure(
        a.rows.iter().zip(&grid).all(|(r, g)| r.name == g.name),
        || "row order differs from the grid".into(),
    )?;
    ensure(
        a.rows.iter().all(|r| r.final_nll.is_finite()),
        || "non-finite final NLL".into(),
    )?;
    ensure(a == b, || "second run differs".into())?;
    for l in table.lines() {
        println!("    {l}");
    }
    Ok("10 configurations ran, 10-row table, identical on rerun".into())
}

// ---------------------------------------------------------------- 8

fn criterion_determinism() -> Outcome {
    let run = || -> std::result::Result<String, String> {
        let mut cfg = toy_config(8);
        cfg.corpus.train_size = 300;
        cfg.corpus.test_size = 10;
        cfg.schedule.total_steps = 60;
        cfg.schedule.warmup_steps = 10;
        cfg.eval_interval = 30;
        cfg.seqco.lambda_x_y = 0.5;
        cfg.seqco.lambda_y_yhat = 1.0;
        cfg.seqco.lambda_dec_y_yhat = 0.5;
        let mut t = Trainer::new(cfg).map_err(|e| e.to_string())?;
        t.run(&mut Silent).map_err(|e| e.to_string())?;
        t.log.to_jsonl().map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    ensure(a == b, || "RunLogs differ".into())?;
    Ok(format!("two runs, {} RunLog lines, byte-identical", a.lines().count()))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "gradient suite", criterion_gradients),
        (2, "stop-gradient", criterion_stop_gradient),
        (3, "exact identities", criterion_identities),
        (4, "metric oracles", criterion_metrics),
        (5, "decoding properties", criterion_decoding),
        (6, "toy convergence", criterion_convergence),
        (7, "ablation grid", criterion_ablation),
        (8, "determinism", criterion_determinism),
    ];
    let only: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failures += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
