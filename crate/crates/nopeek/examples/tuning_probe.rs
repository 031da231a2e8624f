//! Scratch probe for sizing the desk-scale experiments (temporary).

use nopeek::attack::AttackerBudget;
use nopeek::config::FileConfig;
use nopeek::harness::{gen_synthetic, run_experiment, ExperimentOptions};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(640);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(12);
    let seeds: u64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    let attacker_epochs: usize =
        std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(120);

    for seed in 1..=seeds {
        let ds = gen_synthetic("stripes-image", n, 1000 + seed).unwrap();
        let opts = ExperimentOptions {
            attacker: AttackerBudget { epochs: attacker_epochs, ..Default::default() },
            ..Default::default()
        };
        for (alpha, noise) in [(0.0, 0.0), (1.0, 0.0), (0.0, 25.0)] {
            let cfg = FileConfig {
                alpha1: alpha,
                epochs,
                batch_size: 64,
                seed,
                noise_scale: noise,
                ..Default::default()
            };
            let t0 = std::time::Instant::now();
            let out = run_experiment(&cfg, &ds, &opts).unwrap();
            println!(
                "seed {} alpha {} noise {}: acc {:.3} dcor0 {:.3} dcorF {:.3} mse {:.4} dcorY {:.3} ({:.1?})",
                seed,
                alpha,
                noise,
                out.primary_accuracy(),
                out.rows.first().map(|r| r.dcor_xz).unwrap_or(f64::NAN),
                out.final_dcor_xz(),
                out.attacker_mse(),
                out.rows.last().map(|r| r.dcor_yz).unwrap_or(f64::NAN),
                t0.elapsed(),
            );
        }
    }
}
