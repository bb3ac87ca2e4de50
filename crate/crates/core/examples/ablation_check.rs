//! Calibration harness for the component-ablation ladder: plain VAE
//! replay, one discriminator with dual generators, the three-head
//! ensemble without diversity pressure, then the full method. Prints
//! 3-seed mean pooled AUC per rung; the ladder should not descend.

use cade_core::continual_trainer::{run_regime, Regime, TrainConfig};
use cade_core::datagen::{make_synthetic_stream, SyntheticStreamConfig};

const SEEDS: [u64; 3] = [7, 8, 9];

fn main() {
    let coeff: f64 = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("numeric salience coefficient"))
        .unwrap_or(1.5);
    let stream_cfg = SyntheticStreamConfig {
        domains: 4,
        feature_dim: 32,
        bags_per_domain: 40,
        salience_coeff: coeff,
        ..SyntheticStreamConfig::default()
    };
    let stream = make_synthetic_stream(&stream_cfg).expect("valid stream config");

    let rungs: [(&str, TrainConfig); 4] = [
        (
            "vae_gr",
            TrainConfig {
                regime: Regime::VaeGr,
                ..TrainConfig::default()
            },
        ),
        (
            "dg",
            TrainConfig {
                disc_count: 1,
                lambda2: 0.0,
                ..TrainConfig::default()
            },
        ),
        (
            "dg_md",
            TrainConfig {
                lambda2: 0.0,
                ..TrainConfig::default()
            },
        ),
        ("cade", TrainConfig::default()),
    ];

    let mut prev: Option<f64> = None;
    for (name, base) in rungs {
        let mut pooled = Vec::new();
        for seed in SEEDS {
            let cfg = TrainConfig { seed, ..base.clone() };
            let out = run_regime(&stream, cfg).expect("training succeeds");
            pooled.push(out.summary.final_auc);
        }
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let step = prev.map_or(0.0, |p| mean - p);
        println!(
            "{name}\tmean={mean:.4}\tstep={step:+.4}\tseeds={:?}",
            pooled.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
        prev = Some(mean);
    }
}
