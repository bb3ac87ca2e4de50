//! Trains the full method on a small synthetic stream and prints the
//! per-domain AUC matrix plus the forgetting summary.
//!
//! Usage: train_demo [regime] [train_seed] [domains]

use std::time::Instant;

use cade_core::continual_trainer::{run_regime, Regime, TrainConfig};
use cade_core::datagen::{make_synthetic_stream, SyntheticStreamConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let regime = args
        .next()
        .map(|s| s.parse::<Regime>().expect("cade, ft, mtl, or vae_gr"))
        .unwrap_or(Regime::Cade);
    let seed = args
        .next()
        .map(|s| s.parse::<u64>().expect("numeric seed"))
        .unwrap_or(7);
    let domains = args
        .next()
        .map(|s| s.parse::<usize>().expect("numeric domain count"))
        .unwrap_or(4);

    let stream_cfg = SyntheticStreamConfig {
        domains,
        feature_dim: 32,
        bags_per_domain: 40,
        ..SyntheticStreamConfig::default()
    };
    let stream = make_synthetic_stream(&stream_cfg).expect("valid stream config");

    let cfg = TrainConfig {
        regime,
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = run_regime(&stream, cfg).expect("training succeeds");
    let elapsed = start.elapsed();

    println!("regime={regime} seed={seed}");
    println!("{}", out.matrix.to_tsv());
    println!(
        "final_auc={:.4} avg_final_auc={:.4} bwt={:+.4}",
        out.summary.final_auc, out.summary.avg_final_auc, out.summary.bwt
    );
    println!("trained in {elapsed:.2?}");
}
