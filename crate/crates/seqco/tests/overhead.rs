use std::time::Instant;

use seqco::harness::{ExperimentConfig, Silent, Trainer};

fn seconds_per_step(weights: [f64; 4]) -> f64 {
    let mut cfg = ExperimentConfig::with_seed(1);
    cfg.seqco.lambda_x_y = weights[0];
    cfg.seqco.lambda_x_yhat = weights[1];
    cfg.seqco.lambda_y_yhat = weights[2];
    cfg.seqco.lambda_dec_y_yhat = weights[3];
    let mut trainer = Trainer::new(cfg).unwrap();
    for _ in 0..5 {
        trainer.step(&mut Silent).unwrap();
    }
    let steps = 40;
    let start = Instant::now();
    for _ in 0..steps {
        trainer.step(&mut Silent).unwrap();
    }
    start.elapsed().as_secs_f64() / steps as f64
}

#[test]
#[ignore = "wall-clock measurement; run with --ignored on an idle machine"]
fn one_similarity_loss_costs_at_most_sixty_percent_more() {
    let base = seconds_per_step([0.0; 4]);
    let mut over = Vec::new();
    for (k, name) in ["x-y", "x-yhat", "y-yhat", "dec-y-yhat"].iter().enumerate() {
        let mut w = [0.0; 4];
        w[k] = 1.0;
        let ratio = seconds_per_step(w) / base;
        println!("{name}: {ratio:.2}x of {:.1} ms", base * 1e3);
        if ratio > 1.6 {
            over.push(format!("{name} {ratio:.2}x"));
        }
    }
    assert!(over.is_empty(), "{}", over.join(", "));
}
