//! Timing and convergence scratchpad for the synthetic benchmark.
//!
//! Usage: cargo run --example bench_pipeline [variant] [epochs] [dim] [layers] [lr] [opt]
//! variant: baseline | tada | mask | mask-wce

use std::time::Instant;

use terminmt_core::nmt::{ModelConfig, OptimizerKind, TrainConfig, ValidationMetric};
use terminmt_core::pipeline::{learn_joint_bpe, run_cell, CellConfig, PipelineParams};
use terminmt_core::synth::{generate, SynthSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).map(String::as_str).unwrap_or("mask-wce");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(12);
    let dim: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let layers: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let opt = args.get(6).map(String::as_str).unwrap_or("adam");

    let spec = SynthSpec::default();
    let t0 = Instant::now();
    let data = generate(&spec).unwrap();
    println!("synth: {:?} ({} train pairs)", t0.elapsed(), data.train.len());

    let t0 = Instant::now();
    let bpe = learn_joint_bpe(&data.train, 500).unwrap();
    println!("bpe: {:?} ({} merges)", t0.elapsed(), bpe.merges().len());

    let (rate, mask, annotate_test, wce) = match variant {
        "baseline" => (0.0, false, false, false),
        "tada" => (0.1, false, true, false),
        "mask" => (0.1, true, true, false),
        "mask-wce" => (0.1, true, true, true),
        other => panic!("unknown variant {other}"),
    };
    let optimizer = match opt {
        "sgd" => OptimizerKind::Sgd { lr },
        _ => OptimizerKind::Adam { lr },
    };
    let params = PipelineParams {
        model: ModelConfig {
            num_layers: layers,
            model_dim: dim,
            ffn_dim: dim * 2,
            num_heads: 4,
            dropout_rate: 0.0,
            max_positions: 256,
        },
        train: TrainConfig {
            alpha_schedule: vec![(1.0, 1.0)],
            min_epochs: epochs,
            max_epochs: epochs,
            tokens_per_batch: 3000,
            seed: 7,
            validation: ValidationMetric::Bleu,
            patience: 5,
            optimizer,
            clip_norm: Some(1.0),
            max_valid_sentences: 100,
            max_decode_len: 32,
        },
        beam_size: 5,
    };
    let cell = CellConfig {
        rate,
        mask,
        annotate_test,
        alpha_schedule: if wce {
            vec![(0.9, 1.0), (0.1, 2.0)]
        } else {
            vec![(1.0, 1.0)]
        },
        seed: 7,
    };

    let t0 = Instant::now();
    let outcome = run_cell(&data, &bpe, &params, &cell).unwrap();
    let train_time = t0.elapsed();
    for e in &outcome.log.epochs {
        println!(
            "epoch {:>3} alpha {:.1} loss {:.4} valid {:?}",
            e.epoch, e.alpha, e.train_loss, e.valid_score
        );
    }
    println!(
        "variant {variant}: {train_time:?} total, Term% {:.2} ({}/{}), BLEU {:.2}",
        outcome.report.term_pct,
        outcome.report.constraints_generated,
        outcome.report.constraints_total,
        outcome.report.bleu
    );
}
