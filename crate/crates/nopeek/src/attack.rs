//! Reconstruction-attack testbed: a decoder trained on leaked
//! (activation, input) pairs, scored by how well it inverts unleaked
//! activations. The attacker sees pairs only, never the defended model's
//! parameters; fairness across conditions means the identical architecture
//! and budget attack both.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::model::{AdamState, SplitModel};
use crate::numcore::{Matrix, Rng, Tape, Var};
use crate::splitnet::wire::WireTensor;

pub const PAIR_MAGIC: [u8; 4] = *b"NPKP";

/// Leaked pairs split into the attacker's train and held-back test sets.
#[derive(Debug, Clone)]
pub struct LeakedPairSet {
    pub z_train: Matrix,
    pub x_train: Matrix,
    pub z_test: Matrix,
    pub x_test: Matrix,
    pub leak_fraction: f64,
}

impl LeakedPairSet {
    pub fn train_len(&self) -> usize {
        self.z_train.rows()
    }

    pub fn test_len(&self) -> usize {
        self.z_test.rows()
    }
}

/// Raw (activation, input) pairs in data order, the dump-file carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDump {
    pub z: Matrix,
    pub x: Matrix,
}

/// Run the defended model's client half over held-out data and pair each
/// activation row with its input row.
pub fn harvest_raw_pairs(model: &SplitModel, data: &Dataset) -> Result<PairDump> {
    if data.x.rows() == 0 {
        return Err(Error::SampleSize("cannot harvest pairs from empty data".into()));
    }
    let z = model.forward_client_plain(&data.x)?;
    Ok(PairDump { z, x: data.x.clone() })
}

/// Seeded split of raw pairs: 10% of all pairs are held back as the
/// attacker's test set, and the attacker trains on `leak_fraction` of the
/// total, drawn from the remaining 90% pool.
pub fn split_pairs(pairs: &PairDump, leak_fraction: f64, seed: u64) -> Result<LeakedPairSet> {
    let n = pairs.z.rows();
    if n < 2 {
        return Err(Error::SampleSize(format!("need at least 2 pairs, got {}", n)));
    }
    if !(0.0..=0.9).contains(&leak_fraction) || leak_fraction <= 0.0 {
        return Err(Error::Config(format!(
            "leak fraction must lie in (0, 0.9], got {}",
            leak_fraction
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng::substream(seed, "attacker-split");
    rng.shuffle(&mut idx);
    let n_test = ((n as f64) * 0.1).round().max(1.0) as usize;
    let n_train = (((n as f64) * leak_fraction).round() as usize)
        .min(n - n_test)
        .max(1);
    let test_idx = &idx[..n_test];
    let train_idx = &idx[n_test..n_test + n_train];
    Ok(LeakedPairSet {
        z_train: pairs.z.select_rows(train_idx),
        x_train: pairs.x.select_rows(train_idx),
        z_test: pairs.z.select_rows(test_idx),
        x_test: pairs.x.select_rows(test_idx),
        leak_fraction,
    })
}

/// Convenience: harvest then split.
pub fn harvest_pairs(
    model: &SplitModel,
    data: &Dataset,
    leak_fraction: f64,
    seed: u64,
) -> Result<LeakedPairSet> {
    let raw = harvest_raw_pairs(model, data)?;
    split_pairs(&raw, leak_fraction, seed)
}

pub fn save_pairs(pairs: &PairDump, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&PAIR_MAGIC);
    buf.extend_from_slice(&(pairs.z.rows() as u32).to_le_bytes());
    for i in 0..pairs.z.rows() {
        for row in [pairs.z.row(i), pairs.x.row(i)] {
            let tensor = WireTensor::F32 {
                dims: vec![row.len() as u32],
                data: row.iter().map(|&v| v as f32).collect(),
            };
            let msg_bytes = encode_tensor(&tensor);
            buf.extend_from_slice(&msg_bytes);
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn encode_tensor(t: &WireTensor) -> Vec<u8> {
    // reuse the wire tensor encoding via a throwaway frame body
    let msg = crate::splitnet::wire::WireMessage::new(
        crate::splitnet::wire::MsgType::Metrics,
        0,
        vec![t.clone()],
    );
    msg.encode()[crate::splitnet::wire::HEADER_LEN..].to_vec()
}

pub fn load_pairs(path: &Path) -> Result<PairDump> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || bytes[..4] != PAIR_MAGIC {
        return Err(Error::Format("bad pair-dump magic".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if count == 0 {
        return Err(Error::Format("pair dump holds no pairs".into()));
    }
    // wrap the remaining payload in a synthetic frame to reuse the decoder
    let payload = &bytes[8..];
    let mut frame = Vec::with_capacity(17 + payload.len());
    frame.extend_from_slice(&crate::splitnet::wire::WIRE_MAGIC);
    frame.push(crate::splitnet::wire::MsgType::Metrics as u8);
    frame.extend_from_slice(&0u64.to_le_bytes());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(payload);
    let msg = crate::splitnet::wire::WireMessage::decode(&frame)
        .map_err(|e| Error::Format(format!("pair dump payload: {}", e)))?;
    if msg.tensors.len() != 2 * count {
        return Err(Error::Format(format!(
            "pair dump declares {} pairs but holds {} tensors",
            count,
            msg.tensors.len()
        )));
    }
    let dz = msg.tensors[0].values().len();
    let dx = msg.tensors[1].values().len();
    let mut z = Matrix::zeros(count, dz);
    let mut x = Matrix::zeros(count, dx);
    for i in 0..count {
        let zv = msg.tensors[2 * i].values();
        let xv = msg.tensors[2 * i + 1].values();
        if zv.len() != dz || xv.len() != dx {
            return Err(Error::Format("inconsistent pair widths in dump".into()));
        }
        for (j, v) in zv.iter().enumerate() {
            z.set(i, j, *v);
        }
        for (j, v) in xv.iter().enumerate() {
            x.set(i, j, *v);
        }
    }
    Ok(PairDump { z, x })
}

/// Dense decoder mapping activations back to input space. Hidden widths
/// interpolate geometrically between the two dimensionalities, one stage
/// per doubling of the gap, floored at 16 units.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub dims: Vec<usize>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl Decoder {
    pub fn new(latent_dim: usize, output_dim: usize, seed: u64) -> Self {
        let ratio = output_dim as f64 / latent_dim as f64;
        let stages = ratio.log2().abs().ceil().max(1.0).min(3.0) as usize;
        let mut dims = vec![latent_dim];
        for s in 1..=stages {
            let t = s as f64 / (stages + 1) as f64;
            let d = (latent_dim as f64 * ratio.powf(t)).round() as usize;
            dims.push(d.max(16));
        }
        dims.push(output_dim);
        let mut rng = Rng::new(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let std = (2.0 / w[0] as f64).sqrt();
            weights.push(rng.normal_matrix(w[0], w[1], 0.0, std));
            biases.push(Matrix::zeros(1, w[1]));
        }
        Decoder { dims, weights, biases }
    }

    fn forward(&self, tape: &mut Tape, z: Var) -> Result<(Var, Vec<Var>)> {
        let mut h = z;
        let mut vars = Vec::new();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let wl = tape.leaf(w.clone());
            let bl = tape.leaf(b.clone());
            let hw = tape.matmul(h, wl)?;
            h = tape.broadcast_add_row(hw, bl)?;
            if i != last {
                h = tape.relu(h);
            }
            vars.push(wl);
            vars.push(bl);
        }
        Ok((h, vars))
    }

    pub fn reconstruct(&self, z: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let zl = tape.leaf(z.clone());
        let (out, _) = self.forward(&mut tape, zl)?;
        Ok(tape.value(out).clone())
    }

    /// Parameter order matches the forward pass: weight, bias per stage.
    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttackerBudget {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
}

impl Default for AttackerBudget {
    // At a few hundred training pairs an epoch is only a handful of steps,
    // so the decay must be much slower than in large-data training or the
    // attacker freezes long before it can even fit an identity map.
    fn default() -> Self {
        AttackerBudget { epochs: 200, lr: 5e-3, lr_decay: 0.995, batch_size: 32 }
    }
}

#[derive(Debug)]
pub struct TrainedAttacker {
    pub decoder: Decoder,
    pub epoch_losses: Vec<f64>,
}

/// Fit the decoder to the leaked pairs by minimizing the mean squared
/// reconstruction error. A non-finite loss aborts with a diagnostic.
pub fn train_attacker(
    pairs: &LeakedPairSet,
    budget: &AttackerBudget,
    seed: u64,
) -> Result<TrainedAttacker> {
    if pairs.train_len() == 0 {
        return Err(Error::SampleSize("attacker has no training pairs".into()));
    }
    let mut decoder = Decoder::new(pairs.z_train.cols(), pairs.x_train.cols(), {
        crate::numcore::substream_seed(seed, "attacker-init")
    });
    let mut shuffle_rng = Rng::substream(seed, "attacker-shuffle");
    let shapes: Vec<(usize, usize)> = decoder.params_mut().iter().map(|p| p.shape()).collect();
    let mut adam = AdamState::new(budget.lr, budget.lr_decay, &shapes);
    let n = pairs.train_len();
    let mut epoch_losses = Vec::with_capacity(budget.epochs);

    for epoch in 0..budget.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut idx);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(budget.batch_size) {
            let zb = pairs.z_train.select_rows(chunk);
            let xb = pairs.x_train.select_rows(chunk);
            let mut tape = Tape::new();
            let zl = tape.leaf(zb);
            let (xhat, vars) = decoder.forward(&mut tape, zl)?;
            let neg = tape.leaf(xb.scale(-1.0));
            let resid = tape.add(xhat, neg)?;
            let sq = tape.l2_sq(resid);
            let loss = tape.scale(sq, 1.0 / chunk.len() as f64);
            let value = tape.value(loss).scalar_value();
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "attacker loss became non-finite at epoch {} (lr {}, batch {})",
                    epoch, adam.lr, batches
                )));
            }
            loss_sum += value;
            batches += 1;
            let grads = tape.backward(loss)?;
            let grad_list: Vec<Matrix> = vars
                .iter()
                .map(|v| grads.wrt(*v, tape.value(*v).shape()))
                .collect();
            let mut params = decoder.params_mut();
            adam.step(&mut params, &grad_list)?;
        }
        adam.end_epoch();
        epoch_losses.push(loss_sum / batches.max(1) as f64);
    }
    Ok(TrainedAttacker { decoder, epoch_losses })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AttackReport {
    /// Euclidean reconstruction error per test sample, sample order.
    pub per_sample_l2: Vec<f64>,
    pub mean_l2: f64,
    pub median_l2: f64,
    pub q1_l2: f64,
    pub q3_l2: f64,
    /// Mean squared error per feature over the test set.
    pub mse: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Score the decoder on the attacker-test pairs.
pub fn evaluate_attack(decoder: &Decoder, pairs: &LeakedPairSet) -> Result<AttackReport> {
    let xhat = decoder.reconstruct(&pairs.z_test)?;
    evaluate_reconstruction(&xhat, &pairs.x_test)
}

/// Score arbitrary reconstructions against ground truth.
pub fn evaluate_reconstruction(xhat: &Matrix, x: &Matrix) -> Result<AttackReport> {
    if xhat.shape() != x.shape() {
        return Err(Error::Dim(format!(
            "reconstruction {:?} vs truth {:?}",
            xhat.shape(),
            x.shape()
        )));
    }
    let n = x.rows();
    let d = x.cols();
    let mut per_sample = Vec::with_capacity(n);
    let mut sq_total = 0.0;
    for i in 0..n {
        let mut sq = 0.0;
        for j in 0..d {
            let diff = xhat.at(i, j) - x.at(i, j);
            sq += diff * diff;
        }
        sq_total += sq;
        per_sample.push(sq.sqrt());
    }
    let mut sorted = per_sample.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(AttackReport {
        mean_l2: per_sample.iter().sum::<f64>() / n as f64,
        median_l2: quantile(&sorted, 0.5),
        q1_l2: quantile(&sorted, 0.25),
        q3_l2: quantile(&sorted, 0.75),
        mse: sq_total / (n * d) as f64,
        per_sample_l2: per_sample,
    })
}

/// MSE of always predicting the train-set mean, the floor an attacker hits
/// when activations carry no information.
pub fn mean_predictor_mse(pairs: &LeakedPairSet) -> f64 {
    let d = pairs.x_train.cols();
    let n_train = pairs.x_train.rows();
    let mut mean = vec![0.0; d];
    for i in 0..n_train {
        for (m, &v) in mean.iter_mut().zip(pairs.x_train.row(i)) {
            *m += v / n_train as f64;
        }
    }
    let n = pairs.x_test.rows();
    let mut sq = 0.0;
    for i in 0..n {
        for (j, &m) in mean.iter().enumerate() {
            let diff = pairs.x_test.at(i, j) - m;
            sq += diff * diff;
        }
    }
    sq / (n * d) as f64
}

pub fn write_report_csv(report: &AttackReport, path: &Path) -> Result<()> {
    let mut out = String::from("sample_id,l2_error\n");
    for (i, e) in report.per_sample_l2.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i, e));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_report_json(report: &AttackReport, path: &Path) -> Result<()> {
    let summary = serde_json::json!({
        "count": report.per_sample_l2.len(),
        "mean_l2": report.mean_l2,
        "median_l2": report.median_l2,
        "q1_l2": report.q1_l2,
        "q3_l2": report.q3_l2,
        "mse": report.mse,
    });
    std::fs::write(path, serde_json::to_string_pretty(&summary).unwrap() + "\n")?;
    Ok(())
}
