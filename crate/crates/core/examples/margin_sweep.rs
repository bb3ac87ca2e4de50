//! Calibration harness: sweeps the stream's salience coefficient and
//! reports, per value, the regime margins the experiment design must
//! clear. Used to pick the default before freezing it.
//!
//! Usage: margin_sweep [coeff ...] (default: 0.8 1.0 1.2)

use cade_core::continual_trainer::{run_regime, Regime, TrainConfig};
use cade_core::datagen::{make_synthetic_stream, SyntheticStreamConfig};

const SEEDS: [u64; 3] = [7, 8, 9];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn main() {
    let coeffs: Vec<f64> = {
        let given: Vec<f64> = std::env::args()
            .skip(1)
            .map(|s| s.parse().expect("numeric salience coefficient"))
            .collect();
        if given.is_empty() {
            vec![0.8, 1.0, 1.2]
        } else {
            given
        }
    };

    println!(
        "coeff\tcade\tft\tmtl\tcade-ft\tmtl-cade\tft_drop\tcade_drop\tmin_diag"
    );
    for &coeff in &coeffs {
        let stream_cfg = SyntheticStreamConfig {
            domains: 4,
            feature_dim: 32,
            bags_per_domain: 40,
            salience_coeff: coeff,
            ..SyntheticStreamConfig::default()
        };
        let stream = make_synthetic_stream(&stream_cfg).expect("valid stream config");
        let t = stream_cfg.domains;

        let mut pooled = [Vec::new(), Vec::new(), Vec::new()];
        let mut drops = [Vec::new(), Vec::new()];
        let mut min_diag = f64::INFINITY;
        for (r_ix, regime) in [Regime::Cade, Regime::Ft, Regime::Mtl].iter().enumerate() {
            for seed in SEEDS {
                let cfg = TrainConfig {
                    regime: *regime,
                    seed,
                    ..TrainConfig::default()
                };
                let out = run_regime(&stream, cfg).expect("training succeeds");
                pooled[r_ix].push(out.summary.final_auc);
                if regime.is_sequential() {
                    let cell = |r: usize, c: usize| out.matrix.get(r, c).unwrap().unwrap();
                    if r_ix < 2 {
                        drops[r_ix].push(cell(0, 0) - cell(t - 1, 0));
                    }
                    if *regime == Regime::Cade {
                        for d in 0..t {
                            min_diag = min_diag.min(cell(d, d));
                        }
                    }
                    let diag: Vec<String> =
                        (0..t).map(|d| format!("{:.3}", cell(d, d))).collect();
                    let last: Vec<String> =
                        (0..t).map(|d| format!("{:.3}", cell(t - 1, d))).collect();
                    eprintln!(
                        "# {regime} seed={seed} pooled={:.4} diag=[{}] last=[{}]",
                        out.summary.final_auc,
                        diag.join(" "),
                        last.join(" "),
                    );
                } else {
                    eprintln!(
                        "# {regime} seed={seed} pooled={:.4}",
                        out.summary.final_auc
                    );
                }
            }
        }
        let (cade, ft, mtl) = (mean(&pooled[0]), mean(&pooled[1]), mean(&pooled[2]));
        println!(
            "{coeff:.2}\t{cade:.4}\t{ft:.4}\t{mtl:.4}\t{:+.4}\t{:+.4}\t{:.4}\t{:.4}\t{min_diag:.4}",
            cade - ft,
            mtl - cade,
            mean(&drops[1]),
            mean(&drops[0]),
        );
    }
}
