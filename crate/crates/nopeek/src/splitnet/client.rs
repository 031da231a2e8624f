//! Client endpoint: owns the raw data and the layers up to the split,
//! sends protected activations, receives task gradients, and combines them
//! with the locally computed leakage gradient. When burn-in is enabled it
//! completes before the transport is even created, so no byte can leave
//! the device during device-level decorrelation.

use std::path::PathBuf;

use crate::burnin::{fit_client_to_target, run_burnin, BurninConfig, BurninMode, TraceRow};
use crate::depmeasure;
use crate::error::{Error, Result};
use crate::model::{AdamState, SplitModel};
use crate::numcore::{Matrix, Rng, Tape};
use crate::splitnet::session::{
    add_noise_baseline, probe_dcor, tensor_for_wire, values_for_wire, ClientData, DcorTarget,
    EpochRow, ModelPlan, SessionConfig,
};
use crate::splitnet::transport::Transport;
use crate::splitnet::wire::{MsgType, WireMessage};

#[derive(Debug, Default)]
pub struct ClientLog {
    pub epoch_rows: Vec<EpochRow>,
    /// alpha1 * dcor + alpha2 * cce per training batch, in order.
    pub batch_losses: Vec<f64>,
    pub burnin_trace: Option<Vec<TraceRow>>,
    /// Ordered lifecycle markers: burnin_start, burnin_end, connect,
    /// hello_sent, shutdown_sent.
    pub events: Vec<String>,
}

#[derive(Debug)]
pub struct ClientOutcome {
    /// Full model structure whose client half carries the trained weights.
    pub model: SplitModel,
    pub log: ClientLog,
}

fn send(transport: &mut dyn Transport, msg: &WireMessage) -> Result<()> {
    transport.send_frame(&msg.encode())
}

fn recv(transport: &mut dyn Transport) -> Result<WireMessage> {
    Ok(WireMessage::decode(&transport.recv_frame()?)?)
}

fn expect_reply(msg: WireMessage, want: MsgType) -> Result<WireMessage> {
    match msg.msg_type {
        t if t == want => Ok(msg),
        MsgType::Error => {
            let code = msg
                .tensors
                .first()
                .and_then(|t| t.values().first().copied())
                .unwrap_or(0.0);
            Err(Error::Protocol(format!("server reported error code {}", code)))
        }
        other => Err(Error::Protocol(format!(
            "expected {:?}, got {:?}",
            want, other
        ))),
    }
}

/// Train against a remote server. `connect` is invoked only after burn-in
/// completes. On a transport or protocol failure mid-session the client
/// half is written to `abort_checkpoint` (when given) before the error
/// propagates, so the session is resumable from the saved weights.
pub fn run_client<F>(
    cfg: &SessionConfig,
    data: &ClientData,
    connect: F,
    abort_checkpoint: Option<PathBuf>,
) -> Result<ClientOutcome>
where
    F: FnOnce() -> Result<Box<dyn Transport>>,
{
    cfg.validate()?;
    data.validate()?;
    let plan = ModelPlan::from_data(cfg, data);
    let mut model = plan.build()?;
    let mut log = ClientLog::default();

    // Device-level decorrelation happens strictly before any communication.
    if cfg.burnin_mode != BurninMode::Off && cfg.burnin_iters > 0 {
        log.events.push("burnin_start".into());
        let rows: Vec<usize> = (0..data.x.rows().min(128)).collect();
        let xb = data.x.select_rows(&rows);
        let yb = data.heads[0].1.select_rows(&rows);
        let z0 = model.forward_client_plain(&xb)?;
        let bcfg = BurninConfig {
            mode: cfg.burnin_mode,
            iterations: cfg.burnin_iters,
            ..Default::default()
        };
        let outcome = run_burnin(&xb, &yb, z0, &bcfg)?;
        fit_client_to_target(&mut model, &xb, &outcome.state.z, 200, 3e-3)?;
        log.burnin_trace = Some(outcome.trace);
        log.events.push("burnin_end".into());
    }

    log.events.push("connect".into());
    let mut transport = connect()?;
    let result = session_loop(cfg, data, &plan, &mut model, &mut log, transport.as_mut());
    if let Err(e) = result {
        if let Some(path) = abort_checkpoint {
            let (client_half, _) = model.split_halves();
            let _ = client_half.save(&path);
        }
        return Err(e);
    }
    Ok(ClientOutcome { model, log })
}

fn session_loop(
    cfg: &SessionConfig,
    data: &ClientData,
    plan: &ModelPlan,
    model: &mut SplitModel,
    log: &mut ClientLog,
    transport: &mut dyn Transport,
) -> Result<()> {
    let n = data.x.rows();
    send(
        transport,
        &WireMessage::new(
            MsgType::Hello,
            0,
            vec![values_for_wire(&plan.hello_values(cfg), cfg.wire_f64)],
        ),
    )?;
    log.events.push("hello_sent".into());
    expect_reply(recv(transport)?, MsgType::Hello)?;

    let mut shuffle_rng = Rng::substream(cfg.seed, "shuffle");
    let mut noise_rng = Rng::substream(cfg.seed, "noise");
    let shapes: Vec<(usize, usize)> = model.client_params_mut().iter().map(|p| p.shape()).collect();
    let mut adam = AdamState::new(cfg.lr, cfg.lr_decay, &shapes);
    let mut batch_id: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut idx);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;

        for chunk in idx.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let xb = data.x.select_rows(chunk);
            let mut tape = Tape::new();
            let xl = tape.leaf(xb.clone());
            let (z, client_vars) = model.forward_client(&mut tape, xl)?;
            let z_send = if cfg.noise_scale > 0.0 {
                add_noise_baseline(tape.value(z), cfg.noise_scale, &mut noise_rng)
            } else {
                tape.value(z).clone()
            };

            let mut tensors = vec![tensor_for_wire(&z_send, cfg.wire_f64)];
            for (_, y) in &data.heads {
                tensors.push(tensor_for_wire(&y.select_rows(chunk), cfg.wire_f64));
            }
            send(transport, &WireMessage::new(MsgType::Activation, batch_id, tensors))?;

            let reply = expect_reply(recv(transport)?, MsgType::Gradient)?;
            if reply.batch_id != batch_id {
                return Err(Error::Protocol(format!(
                    "gradient for batch {} while expecting {}",
                    reply.batch_id, batch_id
                )));
            }
            if reply.tensors.len() != 2 {
                return Err(Error::Protocol(format!(
                    "gradient frame carries {} tensors, expected 2",
                    reply.tensors.len()
                )));
            }
            let g_wire = reply.tensors[0].to_matrix()?;
            if g_wire.shape() != tape.value(z).shape() {
                return Err(Error::Protocol(format!(
                    "gradient shape {:?} does not match activations {:?}",
                    g_wire.shape(),
                    tape.value(z).shape()
                )));
            }
            let task_value = reply.tensors[1]
                .values()
                .first()
                .copied()
                .ok_or_else(|| Error::Protocol("gradient frame missing loss scalar".into()))?;

            // combine gradients at Z by linearity: the wire carries
            // alpha2 * dCCE/dZ, the leakage term backpropagates locally
            let mut seeds = vec![(z, g_wire)];
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
            let grads = tape.backward_seeded(seeds)?;
            let grad_list: Vec<Matrix> = client_vars
                .iter()
                .map(|v| grads.wrt(*v, tape.value(*v).shape()))
                .collect();
            let mut params = model.client_params_mut();
            adam.step(&mut params, &grad_list)?;

            let total = cfg.weights.alpha1 * dcor_val + task_value;
            log.batch_losses.push(total);
            loss_sum += total;
            batches += 1;
            batch_id += 1;
        }

        send(transport, &WireMessage::new(MsgType::EpochEnd, epoch as u64, vec![]))?;
        let metrics = expect_reply(recv(transport)?, MsgType::Metrics)?;
        let values = metrics
            .tensors
            .first()
            .map(|t| t.values())
            .ok_or_else(|| Error::Protocol("metrics frame missing payload".into()))?;
        if values.len() != 1 + data.heads.len() {
            return Err(Error::Protocol(format!(
                "metrics frame carries {} values, expected {}",
                values.len(),
                1 + data.heads.len()
            )));
        }
        adam.end_epoch();
        let (dcor_xz, dcor_yz) = probe_dcor(model, data)?;
        log.epoch_rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            head_accuracy: data
                .heads
                .iter()
                .enumerate()
                .map(|(i, (name, _))| (name.clone(), values[1 + i]))
                .collect(),
            dcor_xz,
            dcor_yz,
        });
    }

    send(transport, &WireMessage::new(MsgType::Shutdown, 0, vec![]))?;
    log.events.push("shutdown_sent".into());
    Ok(())
}
