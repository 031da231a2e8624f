//! Experiment orchestration: train/validation split, optional burn-in,
//! split training over the loopback transport, pair harvest, attack, and
//! report emission. Everything is driven by one master seed through named
//! substreams, so a (config, seed) pair reproduces byte-identical reports.

use std::path::Path;

use crate::attack::{
    evaluate_attack, split_pairs, train_attacker, AttackReport, AttackerBudget, PairDump,
};
use crate::burnin::TraceRow;
use crate::config::FileConfig;
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::model::{accuracy, AdamState, SplitModel};
use crate::numcore::{substream_seed, Matrix, Rng, Tape};
use crate::splitnet::{
    add_noise_baseline, run_split_session, ClientData, DcorTarget, EpochRow, SessionConfig,
};

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub leak_fraction: f64,
    pub attacker: AttackerBudget,
    /// Trained heads; defaults to the primary attribute, or to every
    /// attribute except the protected one when `protect_attr` is set.
    pub heads: Option<Vec<String>>,
    /// Skip the reconstruction attack (pure training runs).
    pub skip_attack: bool,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            leak_fraction: 0.9,
            attacker: AttackerBudget::default(),
            heads: None,
            skip_attack: false,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ReportRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub head_accuracy: Vec<(String, f64)>,
    pub dcor_xz: f64,
    pub dcor_yz: f64,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub rows: Vec<ReportRow>,
    pub val_accuracy: Vec<(String, f64)>,
    pub attack: Option<AttackReport>,
    pub burnin_trace: Option<Vec<TraceRow>>,
    pub config_echo: serde_json::Value,
    pub seed: u64,
    /// Reassembled full model with both trained halves.
    pub model: SplitModel,
    pub train: Dataset,
    pub val: Dataset,
}

impl ExperimentOutcome {
    pub fn final_dcor_xz(&self) -> f64 {
        self.rows.last().map(|r| r.dcor_xz).unwrap_or(f64::NAN)
    }

    pub fn primary_accuracy(&self) -> f64 {
        self.val_accuracy.first().map(|(_, a)| *a).unwrap_or(f64::NAN)
    }

    pub fn attacker_mse(&self) -> f64 {
        self.attack.as_ref().map(|a| a.mse).unwrap_or(f64::NAN)
    }
}

/// Split activations for evaluation, with the noise baseline applied when
/// configured (the baseline perturbs every activation that leaves the
/// device, at inference as well as during training).
pub fn protected_activations(
    model: &SplitModel,
    x: &Matrix,
    noise_scale: f64,
    noise_rng: &mut Rng,
) -> Result<Matrix> {
    let z = model.forward_client_plain(x)?;
    Ok(if noise_scale > 0.0 {
        add_noise_baseline(&z, noise_scale, noise_rng)
    } else {
        z
    })
}

fn eval_accuracy(
    model: &SplitModel,
    val: &Dataset,
    heads: &[String],
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    let mut rng = Rng::substream(seed, "eval-noise");
    let z = protected_activations(model, &val.x, noise_scale, &mut rng)?;
    let mut tape = Tape::new();
    let zl = tape.leaf(z);
    let (logits, _) = model.forward_server(&mut tape, zl)?;
    let mut out = Vec::with_capacity(heads.len());
    for (i, name) in heads.iter().enumerate() {
        let y = val.attribute(name)?;
        out.push((name.clone(), accuracy(tape.value(logits[i]), y)));
    }
    Ok(out)
}

fn resolve_heads(cfg: &FileConfig, dataset: &Dataset, opts: &ExperimentOptions) -> Result<Vec<String>> {
    if let Some(heads) = &opts.heads {
        return Ok(heads.clone());
    }
    match &cfg.protect_attr {
        Some(protect) => {
            dataset.attribute(protect)?;
            let heads: Vec<String> = dataset
                .attributes
                .iter()
                .map(|(n, _)| n.clone())
                .filter(|n| n != protect)
                .collect();
            if heads.is_empty() {
                return Err(Error::Config(
                    "protecting the only attribute leaves nothing to train on".into(),
                ));
            }
            Ok(heads)
        }
        None => Ok(vec![dataset.attributes[0].0.clone()]),
    }
}

/// Full pipeline: burn-in (optional), split training, harvest, attack.
pub fn run_experiment(
    cfg: &FileConfig,
    dataset: &Dataset,
    opts: &ExperimentOptions,
) -> Result<ExperimentOutcome> {
    let session: SessionConfig = cfg.to_session()?;
    let (train, val) = dataset.split_train_val(cfg.seed);
    let heads = resolve_heads(cfg, dataset, opts)?;
    let head_labels: Vec<(String, Matrix)> = heads
        .iter()
        .map(|name| Ok((name.clone(), train.attribute(name)?.clone())))
        .collect::<Result<_>>()?;
    let dcor_target = match &cfg.protect_attr {
        Some(protect) => DcorTarget::Attribute {
            name: protect.clone(),
            labels: train.attribute(protect)?.clone(),
        },
        None => DcorTarget::Input,
    };
    let data = ClientData {
        x: train.x.clone(),
        heads: head_labels,
        dcor_target,
        image: train.image_shape,
    };

    let (client, server) = run_split_session(&session, &data, None)?;
    let model = SplitModel::reassemble(
        &client.model.split_halves().0,
        &server.model.split_halves().1,
    );

    let val_accuracy = eval_accuracy(&model, &val, &heads, cfg.noise_scale, cfg.seed)?;

    let attack = if opts.skip_attack {
        None
    } else {
        let mut harvest_rng = Rng::substream(cfg.seed, "harvest-noise");
        let z = protected_activations(&model, &val.x, cfg.noise_scale, &mut harvest_rng)?;
        let raw = PairDump { z, x: val.x.clone() };
        let set = split_pairs(&raw, opts.leak_fraction, substream_seed(cfg.seed, "attacker"))?;
        let attacker = train_attacker(&set, &opts.attacker, substream_seed(cfg.seed, "attacker"))?;
        Some(evaluate_attack(&attacker.decoder, &set)?)
    };

    let rows = client
        .log
        .epoch_rows
        .iter()
        .map(|r: &EpochRow| ReportRow {
            epoch: r.epoch,
            train_loss: r.train_loss,
            head_accuracy: r.head_accuracy.clone(),
            dcor_xz: r.dcor_xz,
            dcor_yz: r.dcor_yz,
        })
        .collect();

    Ok(ExperimentOutcome {
        rows,
        val_accuracy,
        attack,
        burnin_trace: client.log.burnin_trace,
        config_echo: cfg.echo(),
        seed: cfg.seed,
        model,
        train,
        val,
    })
}

/// Multinomial logistic probe trained on frozen representations; returns
/// validation accuracy. The post-hoc check for what a representation
/// still reveals about an attribute.
pub fn linear_probe(
    z_train: &Matrix,
    y_train: &Matrix,
    z_val: &Matrix,
    y_val: &Matrix,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let classes = y_train.cols();
    let mut rng = Rng::substream(seed, "probe-init");
    let mut w = rng.normal_matrix(z_train.cols(), classes, 0.0, 0.1);
    let mut b = Matrix::zeros(1, classes);
    let mut adam = AdamState::new(0.05, 1.0, &[w.shape(), b.shape()]);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let zl = tape.leaf(z_train.clone());
        let wl = tape.leaf(w.clone());
        let bl = tape.leaf(b.clone());
        let h = tape.matmul(zl, wl)?;
        let logits = tape.broadcast_add_row(h, bl)?;
        let loss = crate::model::cce(&mut tape, logits, y_train)?;
        let grads = tape.backward(loss)?;
        let gw = grads.wrt(wl, w.shape());
        let gb = grads.wrt(bl, b.shape());
        adam.step(&mut [&mut w, &mut b], &[gw, gb])?;
    }
    let logits = Matrix::from_fn(z_val.rows(), classes, |i, j| {
        let mut s = b.at(0, j);
        for k in 0..z_val.cols() {
            s += z_val.at(i, k) * w.at(k, j);
        }
        s
    });
    Ok(accuracy(&logits, y_val))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub accuracy: f64,
    pub dcor_xz: f64,
    pub attacker_mse: f64,
}

/// One experiment per alpha1 value, all other substreams fixed; the
/// privacy-utility curve. Configurations run in parallel, one worker each.
pub fn sweep_alpha(
    cfg: &FileConfig,
    dataset: &Dataset,
    alphas: &[f64],
    opts: &ExperimentOptions,
) -> Result<Vec<(SweepRow, ExperimentOutcome)>> {
    if alphas.is_empty() {
        return Err(Error::Config("sweep needs at least one alpha".into()));
    }
    let results: Vec<Result<ExperimentOutcome>> = std::thread::scope(|scope| {
        let handles: Vec<_> = alphas
            .iter()
            .map(|&alpha| {
                let mut run_cfg = cfg.clone();
                run_cfg.alpha1 = alpha;
                scope.spawn(move || run_experiment(&run_cfg, dataset, opts))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(alphas.len());
    for (alpha, result) in alphas.iter().zip(results) {
        let outcome = result?;
        out.push((
            SweepRow {
                alpha: *alpha,
                accuracy: outcome.primary_accuracy(),
                dcor_xz: outcome.final_dcor_xz(),
                attacker_mse: outcome.attacker_mse(),
            },
            outcome,
        ));
    }
    Ok(out)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut out = String::from("alpha,accuracy,dcor_xz,attacker_mse\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.alpha, r.accuracy, r.dcor_xz, r.attacker_mse));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::gen_synthetic;

    fn quick_cfg(seed: u64) -> FileConfig {
        FileConfig {
            alpha1: 0.0,
            epochs: 3,
            batch_size: 32,
            seed,
            ..Default::default()
        }
    }

    fn quick_opts() -> ExperimentOptions {
        ExperimentOptions {
            attacker: AttackerBudget { epochs: 15, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn report_has_one_row_per_epoch() {
        let ds = gen_synthetic("blobs", 120, 3).unwrap();
        let out = run_experiment(&quick_cfg(5), &ds, &quick_opts()).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert!(out.rows.iter().all(|r| r.train_loss.is_finite()));
        assert!(out.attack.is_some());
    }

    #[test]
    fn leakage_weight_reduces_final_dcor_at_equal_seed() {
        let ds = gen_synthetic("blobs", 160, 7).unwrap();
        let mut baseline_cfg = quick_cfg(9);
        baseline_cfg.epochs = 5;
        let mut nopeek_cfg = baseline_cfg.clone();
        nopeek_cfg.alpha1 = 0.5;
        let mut opts = quick_opts();
        opts.skip_attack = true;
        let baseline = run_experiment(&baseline_cfg, &ds, &opts).unwrap();
        let nopeek = run_experiment(&nopeek_cfg, &ds, &opts).unwrap();
        assert!(
            nopeek.final_dcor_xz() < baseline.final_dcor_xz(),
            "dcor {} should drop below baseline {}",
            nopeek.final_dcor_xz(),
            baseline.final_dcor_xz()
        );
    }

    #[test]
    fn sweep_with_single_zero_alpha_is_the_baseline_run() {
        let ds = gen_synthetic("blobs", 100, 11).unwrap();
        let cfg = quick_cfg(13);
        let opts = quick_opts();
        let sweep = sweep_alpha(&cfg, &ds, &[0.0], &opts).unwrap();
        let direct = run_experiment(&cfg, &ds, &opts).unwrap();
        assert_eq!(sweep.len(), 1);
        assert_eq!(sweep[0].0.accuracy, direct.primary_accuracy());
        assert_eq!(sweep[0].0.dcor_xz, direct.final_dcor_xz());
        assert_eq!(sweep[0].0.attacker_mse, direct.attacker_mse());
    }

    #[test]
    fn blobs_admit_a_near_perfect_linear_probe() {
        let ds = gen_synthetic("blobs", 256, 17).unwrap();
        let (train, val) = ds.split_train_val(1);
        let acc = linear_probe(
            &train.x,
            train.attribute("class").unwrap(),
            &val.x,
            val.attribute("class").unwrap(),
            300,
            5,
        )
        .unwrap();
        assert!(acc > 0.99, "probe accuracy {}", acc);
    }

    #[test]
    fn protected_attribute_resolves_remaining_heads() {
        let ds = gen_synthetic("blobs", 80, 19).unwrap();
        let mut cfg = quick_cfg(21);
        cfg.protect_attr = Some("quadrant".to_string());
        cfg.alpha1 = 0.4;
        cfg.epochs = 1;
        let mut opts = quick_opts();
        opts.skip_attack = true;
        let out = run_experiment(&cfg, &ds, &opts).unwrap();
        let names: Vec<&str> = out.val_accuracy.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["class", "parity"]);
    }
}
