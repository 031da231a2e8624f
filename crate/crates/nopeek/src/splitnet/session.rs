//! Session-level types shared by the client and server endpoints, the
//! in-process loopback session runner, and the single-process reference
//! trainer used to check split/unsplit equivalence.

use std::thread;

use crate::burnin::BurninMode;
use crate::depmeasure;
use crate::error::{Error, Result};
use crate::loss::NoPeekWeights;
use crate::model::{default_layer_kinds, AdamState, SplitModel};
use crate::numcore::{substream_seed, Matrix, Rng, Tape};
use crate::splitnet::client::{run_client, ClientOutcome};
use crate::splitnet::server::{run_server, ServerOutcome};
use crate::splitnet::transport::{loopback_pair, CaptureTransport, FrameCapture, Transport};
use crate::splitnet::wire::WireTensor;

pub const HELLO_PROTO_VERSION: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub weights: NoPeekWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub split_index: usize,
    pub seed: u64,
    pub lr: f64,
    pub lr_decay: f64,
    pub noise_scale: f64,
    pub burnin_mode: BurninMode,
    pub burnin_iters: usize,
    /// Lossless 64-bit tensors on the wire (in-process sessions only; the
    /// external contract is 32-bit).
    pub wire_f64: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            weights: NoPeekWeights::default(),
            epochs: 10,
            batch_size: 64,
            split_index: crate::model::DEFAULT_SPLIT_INDEX,
            seed: 1,
            lr: 3e-3,
            lr_decay: 0.995,
            noise_scale: 0.0,
            burnin_mode: BurninMode::Off,
            burnin_iters: 100,
            wire_f64: false,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.split_index == 0 {
            return Err(Error::Config("split_index must be at least 1".into()));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(Error::Config(format!(
                "noise_scale must be finite and >= 0, got {}",
                self.noise_scale
            )));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr and lr_decay must be positive".into()));
        }
        Ok(())
    }

    pub fn init_seed(&self) -> u64 {
        substream_seed(self.seed, "init")
    }

    fn seed_check(&self) -> f64 {
        (self.seed % 1_048_576) as f64
    }
}

/// What the leakage penalty decorrelates the activations against.
#[derive(Debug, Clone)]
pub enum DcorTarget {
    /// The raw input batch, as fed to the network.
    Input,
    /// A protected one-hot attribute, excluded from the trained heads.
    Attribute { name: String, labels: Matrix },
}

/// Client-side training data for one session.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub x: Matrix,
    /// Trained heads: name and one-hot labels, aligned with rows of x.
    pub heads: Vec<(String, Matrix)>,
    pub dcor_target: DcorTarget,
    /// Image geometry (h, w, c, planar) when x carries flattened images.
    pub image: Option<(usize, usize, usize, bool)>,
}

impl ClientData {
    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("client data needs at least one head".into()));
        }
        for (name, y) in &self.heads {
            if y.rows() != self.x.rows() {
                return Err(Error::Dim(format!(
                    "head {:?} has {} rows, data has {}",
                    name,
                    y.rows(),
                    self.x.rows()
                )));
            }
            crate::model::validate_one_hot(y)?;
        }
        if let DcorTarget::Attribute { name, labels } = &self.dcor_target {
            if labels.rows() != self.x.rows() {
                return Err(Error::Dim(format!(
                    "protected attribute {:?} has {} rows, data has {}",
                    name,
                    labels.rows(),
                    self.x.rows()
                )));
            }
            if self.heads.iter().any(|(h, _)| h == name) {
                return Err(Error::Config(format!(
                    "protected attribute {:?} is also a trained head",
                    name
                )));
            }
        }
        Ok(())
    }

    /// Rows used for the per-epoch distance-correlation probe.
    pub fn probe_rows(&self) -> usize {
        self.x.rows().min(128)
    }
}

/// Everything both endpoints must agree on to build the same model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPlan {
    pub input_dim: usize,
    pub image: Option<(usize, usize, usize, bool)>,
    pub heads: Vec<(String, usize)>,
    pub split_index: usize,
    pub init_seed: u64,
}

impl ModelPlan {
    pub fn from_data(cfg: &SessionConfig, data: &ClientData) -> ModelPlan {
        ModelPlan {
            input_dim: data.x.cols(),
            image: data.image,
            heads: data
                .heads
                .iter()
                .map(|(name, y)| (name.clone(), y.cols()))
                .collect(),
            split_index: cfg.split_index,
            init_seed: cfg.init_seed(),
        }
    }

    pub fn build(&self) -> Result<SplitModel> {
        let kinds = default_layer_kinds(self.input_dim, self.image);
        SplitModel::build(kinds, self.split_index, &self.heads, self.init_seed)
    }

    /// Flat numeric form carried by the HELLO frame. Head names do not
    /// cross the wire; the server labels heads by index.
    pub fn hello_values(&self, cfg: &SessionConfig) -> Vec<f64> {
        let mut v = vec![HELLO_PROTO_VERSION, self.input_dim as f64];
        match self.image {
            Some((h, w, c, planar)) => {
                v.extend([1.0, h as f64, w as f64, c as f64, planar as u8 as f64])
            }
            None => v.extend([0.0, 0.0, 0.0, 0.0, 0.0]),
        }
        v.push(self.heads.len() as f64);
        for (_, classes) in &self.heads {
            v.push(*classes as f64);
        }
        v.extend([
            self.split_index as f64,
            cfg.epochs as f64,
            cfg.batch_size as f64,
            cfg.weights.alpha2,
            cfg.seed_check(),
        ]);
        v
    }

    /// Parse a HELLO payload against the server's own config.
    pub fn from_hello(values: &[f64], cfg: &SessionConfig) -> Result<ModelPlan> {
        let err = |m: &str| Error::Protocol(format!("hello rejected: {}", m));
        if values.len() < 7 {
            return Err(err("payload too short"));
        }
        if values[0] != HELLO_PROTO_VERSION {
            return Err(err(&format!("protocol version {}", values[0])));
        }
        let input_dim = values[1] as usize;
        let image = if values[2] != 0.0 {
            Some((
                values[3] as usize,
                values[4] as usize,
                values[5] as usize,
                values[6] != 0.0,
            ))
        } else {
            None
        };
        let n_heads = values[7] as usize;
        if values.len() != 8 + n_heads + 5 {
            return Err(err("payload length inconsistent with head count"));
        }
        let heads: Vec<(String, usize)> = (0..n_heads)
            .map(|i| (format!("head{}", i), values[8 + i] as usize))
            .collect();
        let tail = &values[8 + n_heads..];
        let (split_index, epochs, batch_size) = (tail[0] as usize, tail[1] as usize, tail[2] as usize);
        if split_index != cfg.split_index {
            return Err(err(&format!("split_index {} vs {}", split_index, cfg.split_index)));
        }
        if epochs != cfg.epochs {
            return Err(err(&format!("epochs {} vs {}", epochs, cfg.epochs)));
        }
        if batch_size != cfg.batch_size {
            return Err(err(&format!("batch_size {} vs {}", batch_size, cfg.batch_size)));
        }
        if (tail[3] - cfg.weights.alpha2).abs() > 1e-6 {
            return Err(err(&format!("alpha2 {} vs {}", tail[3], cfg.weights.alpha2)));
        }
        if tail[4] != cfg.seed_check() {
            return Err(err("seed check failed; both endpoints need the same seed"));
        }
        Ok(ModelPlan {
            input_dim,
            image,
            heads,
            split_index,
            init_seed: cfg.init_seed(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub head_accuracy: Vec<(String, f64)>,
    pub dcor_xz: f64,
    pub dcor_yz: f64,
}

/// Uniform noise in [-scale, scale] added elementwise, the send-time
/// perturbation baseline.
pub fn add_noise_baseline(z: &Matrix, scale: f64, rng: &mut Rng) -> Matrix {
    debug_assert!(scale >= 0.0);
    if scale == 0.0 {
        return z.clone();
    }
    Matrix::from_fn(z.rows(), z.cols(), |i, j| z.at(i, j) + rng.uniform(-scale, scale))
}

/// Distance correlations of the probe rows against data and primary-head
/// labels. A degenerate (constant) representation reports zero: nothing is
/// recoverable from a constant.
pub fn probe_dcor(model: &SplitModel, data: &ClientData) -> Result<(f64, f64)> {
    let rows = data.probe_rows();
    let idx: Vec<usize> = (0..rows).collect();
    let xp = data.x.select_rows(&idx);
    let yp = data.heads[0].1.select_rows(&idx);
    let z = model.forward_client_plain(&xp)?;
    let dcx = match depmeasure::dcor(&xp, &z) {
        Ok(v) => v,
        Err(Error::DegenerateVariance(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let dcy = match depmeasure::dcor(&yp, &z) {
        Ok(v) => v,
        Err(Error::DegenerateVariance(_)) => 0.0,
        Err(e) => return Err(e),
    };
    Ok((dcx, dcy))
}

pub fn tensor_for_wire(m: &Matrix, f64_wire: bool) -> WireTensor {
    if f64_wire {
        WireTensor::from_matrix_f64(m)
    } else {
        WireTensor::from_matrix_f32(m)
    }
}

pub fn values_for_wire(v: &[f64], f64_wire: bool) -> WireTensor {
    if f64_wire {
        WireTensor::F64 { dims: vec![v.len() as u32], data: v.to_vec() }
    } else {
        WireTensor::vector_f32(v)
    }
}

/// Run one split session in process over the loopback transport: server on
/// a spawned thread, client on the caller's thread. The optional capture
/// records the client's traffic.
pub fn run_split_session(
    cfg: &SessionConfig,
    data: &ClientData,
    capture: Option<FrameCapture>,
) -> Result<(ClientOutcome, ServerOutcome)> {
    let (client_t, server_t) = loopback_pair();
    let server_cfg = cfg.clone();
    let server_handle = thread::spawn(move || {
        let mut t = server_t;
        run_server(&server_cfg, &mut t)
    });
    let mut client_transport: Option<Box<dyn Transport>> = Some(match capture {
        Some(c) => Box::new(CaptureTransport::new(client_t, c)),
        None => Box::new(client_t),
    });
    let client = run_client(cfg, data, move || Ok(client_transport.take().unwrap()), None);
    let server = server_handle
        .join()
        .map_err(|_| Error::Protocol("server thread panicked".into()))?;
    Ok((client?, server?))
}

#[derive(Debug)]
pub struct UnsplitOutcome {
    pub model: SplitModel,
    pub batch_losses: Vec<f64>,
    pub epoch_rows: Vec<EpochRow>,
}

/// Single-process reference trainer. Per batch it performs the same two
/// reverse passes the split runtime performs (server pass from the task
/// loss, client pass seeded at the protected activations), so with the
/// leakage weight at zero and a lossless wire the split session reproduces
/// this trajectory bit-exactly.
pub fn train_unsplit(cfg: &SessionConfig, data: &ClientData) -> Result<UnsplitOutcome> {
    cfg.validate()?;
    data.validate()?;
    let plan = ModelPlan::from_data(cfg, data);
    let mut model = plan.build()?;
    let n = data.x.rows();

    let mut shuffle_rng = Rng::substream(cfg.seed, "shuffle");
    let mut noise_rng = Rng::substream(cfg.seed, "noise");
    let client_shapes: Vec<(usize, usize)> =
        model.client_params_mut().iter().map(|p| p.shape()).collect();
    let server_shapes: Vec<(usize, usize)> =
        model.server_params_mut().iter().map(|p| p.shape()).collect();
    let mut client_adam = AdamState::new(cfg.lr, cfg.lr_decay, &client_shapes);
    let mut server_adam = AdamState::new(cfg.lr, cfg.lr_decay, &server_shapes);

    let mut batch_losses = Vec::new();
    let mut epoch_rows = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut idx);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = vec![0usize; data.heads.len()];
        let mut seen = 0usize;

        for chunk in idx.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let xb = data.x.select_rows(chunk);
            let ybs: Vec<Matrix> = data.heads.iter().map(|(_, y)| y.select_rows(chunk)).collect();

            let mut tape = Tape::new();
            let xl = tape.leaf(xb.clone());
            let (z, client_vars) = model.forward_client(&mut tape, xl)?;
            let z_server = if cfg.noise_scale > 0.0 {
                let noisy = add_noise_baseline(tape.value(z), cfg.noise_scale, &mut noise_rng);
                tape.leaf(noisy)
            } else {
                z
            };
            let (logits, server_vars) = model.forward_server(&mut tape, z_server)?;
            let mut task: Option<crate::numcore::Var> = None;
            for (l, y) in logits.iter().zip(ybs.iter()) {
                let c = crate::model::cce(&mut tape, *l, y)?;
                task = Some(match task {
                    Some(acc) => tape.add(acc, c)?,
                    None => c,
                });
            }
            let task = tape.scale(task.unwrap(), cfg.weights.alpha2);
            let task_value = tape.value(task).scalar_value();

            // server pass
            let g_task = tape.backward(task)?;
            let server_grads: Vec<Matrix> = server_vars
                .iter()
                .map(|v| g_task.wrt(*v, tape.value(*v).shape()))
                .collect();
            let g_z = g_task.wrt(z_server, tape.value(z_server).shape());

            // client pass, seeded exactly like the wire path
            let mut seeds = vec![(z, g_z)];
            let mut dcor_val = 0.0;
            if cfg.weights.alpha1 > 0.0 {
                let target = match &data.dcor_target {
                    DcorTarget::Input => xb.clone(),
                    DcorTarget::Attribute { labels, .. } => labels.select_rows(chunk),
                };
                let tl = tape.leaf(target);
                let d = depmeasure::dcor_node(&mut tape, tl, z)?;
                dcor_val = tape.value(d).scalar_value();
                let dl = tape.scale(d, cfg.weights.alpha1);
                seeds.push((dl, Matrix::scalar(1.0)));
            }
            let g_client = tape.backward_seeded(seeds)?;
            let client_grads: Vec<Matrix> = client_vars
                .iter()
                .map(|v| g_client.wrt(*v, tape.value(*v).shape()))
                .collect();

            for (head, (l, y)) in logits.iter().zip(ybs.iter()).enumerate() {
                let lv = tape.value(*l);
                for r in 0..y.rows() {
                    if crate::model::argmax(lv.row(r)) == crate::model::argmax(y.row(r)) {
                        correct[head] += 1;
                    }
                }
            }
            seen += chunk.len();

            let mut cp = model.client_params_mut();
            client_adam.step(&mut cp, &client_grads)?;
            let mut sp = model.server_params_mut();
            server_adam.step(&mut sp, &server_grads)?;

            let total = cfg.weights.alpha1 * dcor_val + task_value;
            batch_losses.push(total);
            loss_sum += total;
            batches += 1;
        }
        client_adam.end_epoch();
        server_adam.end_epoch();
        let (dcx, dcy) = probe_dcor(&model, data)?;
        epoch_rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            head_accuracy: data
                .heads
                .iter()
                .enumerate()
                .map(|(i, (name, _))| (name.clone(), correct[i] as f64 / seen.max(1) as f64))
                .collect(),
            dcor_xz: dcx,
            dcor_yz: dcy,
        });
    }
    Ok(UnsplitOutcome { model, batch_losses, epoch_rows })
}
