//! Scratch probe: attacker sanity anchors vs pair-set size (temporary).

use nopeek::attack::*;
use nopeek::numcore::{Matrix, Rng};

fn main() {
    let budget = AttackerBudget::default();
    for n in [300usize, 600, 1200, 2400] {
        // identity anchor
        let mut rng = Rng::new(6);
        let x = rng.normal_matrix(n, 4, 0.0, 1.0);
        let set = split_pairs(&PairDump { z: x.clone(), x: x.clone() }, 0.9, 13).unwrap();
        let attacker = train_attacker(&set, &budget, 21).unwrap();
        let id_mse = evaluate_attack(&attacker.decoder, &set).unwrap().mse;

        // independent-noise anchor
        let mut rng = Rng::new(7);
        let x = rng.normal_matrix(n, 4, 0.0, 1.0);
        let z = rng.normal_matrix(n, 6, 0.0, 1.0);
        let set = split_pairs(&PairDump { z, x }, 0.9, 15).unwrap();
        let attacker = train_attacker(&set, &budget, 22).unwrap();
        let mse = evaluate_attack(&attacker.decoder, &set).unwrap().mse;
        let floor = mean_predictor_mse(&set);
        println!(
            "n {:5}: identity mse {:.2e} | noise mse {:.4} floor {:.4} rel {:+.1}%",
            n,
            id_mse,
            mse,
            floor,
            100.0 * (mse - floor) / floor
        );
    }
}
