//! Server endpoint: holds the layers after the split plus the heads.
//! Per activation frame it finishes the forward pass, computes the task
//! loss against the received labels, replies with the gradient at the
//! split, and updates its own parameters. It never sees the raw data.

use crate::error::{Error, Result};
use crate::model::{argmax, AdamState, SplitModel};
use crate::numcore::Tape;
use crate::splitnet::session::{tensor_for_wire, values_for_wire, ModelPlan, SessionConfig};
use crate::splitnet::transport::Transport;
use crate::splitnet::wire::{MsgType, WireMessage, WireTensor};

pub const ERR_PROTOCOL: f64 = 4.0;
pub const ERR_CONFIG_MISMATCH: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ServerEpochRow {
    pub epoch: usize,
    pub mean_task_loss: f64,
    pub head_accuracy: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct ServerLog {
    pub epoch_rows: Vec<ServerEpochRow>,
    pub batches_seen: usize,
}

#[derive(Debug)]
pub struct ServerOutcome {
    /// Full model structure whose server half carries the trained weights.
    pub model: SplitModel,
    pub log: ServerLog,
}

fn send_error(transport: &mut dyn Transport, batch_id: u64, code: f64) {
    let msg = WireMessage::new(MsgType::Error, batch_id, vec![WireTensor::scalar_f32(code)]);
    let _ = transport.send_frame(&msg.encode());
}

/// Serve exactly one training session on the given transport.
pub fn run_server(cfg: &SessionConfig, transport: &mut dyn Transport) -> Result<ServerOutcome> {
    cfg.validate()?;
    let hello = WireMessage::decode(&transport.recv_frame()?)?;
    if hello.msg_type != MsgType::Hello {
        send_error(transport, hello.batch_id, ERR_PROTOCOL);
        return Err(Error::Protocol(format!(
            "expected HELLO, got {:?}",
            hello.msg_type
        )));
    }
    let hello_values = hello
        .tensors
        .first()
        .map(|t| t.values())
        .ok_or_else(|| Error::Protocol("hello frame missing payload".into()))?;
    let plan = match ModelPlan::from_hello(&hello_values, cfg) {
        Ok(p) => p,
        Err(e) => {
            send_error(transport, 0, ERR_CONFIG_MISMATCH);
            return Err(e);
        }
    };
    let mut model = plan.build()?;
    transport.send_frame(&WireMessage::new(MsgType::Hello, 0, vec![]).encode())?;

    let shapes: Vec<(usize, usize)> = model.server_params_mut().iter().map(|p| p.shape()).collect();
    let mut adam = AdamState::new(cfg.lr, cfg.lr_decay, &shapes);
    let mut log = ServerLog::default();
    let mut expected_batch: u64 = 0;
    let mut epoch_loss_sum = 0.0;
    let mut epoch_batches = 0usize;
    let mut correct = vec![0usize; plan.heads.len()];
    let mut seen = 0usize;

    loop {
        let msg = WireMessage::decode(&transport.recv_frame()?)?;
        match msg.msg_type {
            MsgType::Activation => {
                if msg.batch_id != expected_batch {
                    send_error(transport, msg.batch_id, ERR_PROTOCOL);
                    return Err(Error::Protocol(format!(
                        "batch id {} out of order, expected {}",
                        msg.batch_id, expected_batch
                    )));
                }
                if msg.tensors.len() != 1 + plan.heads.len() {
                    send_error(transport, msg.batch_id, ERR_PROTOCOL);
                    return Err(Error::Protocol(format!(
                        "activation frame carries {} tensors, expected {}",
                        msg.tensors.len(),
                        1 + plan.heads.len()
                    )));
                }
                let z = msg.tensors[0].to_matrix()?;
                if z.cols() != model.split_dim() {
                    send_error(transport, msg.batch_id, ERR_PROTOCOL);
                    return Err(Error::Protocol(format!(
                        "activations are {} wide, split layer expects {}",
                        z.cols(),
                        model.split_dim()
                    )));
                }
                let ys: Vec<_> = msg.tensors[1..]
                    .iter()
                    .map(|t| t.to_matrix())
                    .collect::<std::result::Result<Vec<_>, _>>()?;

                let mut tape = Tape::new();
                let zl = tape.leaf(z.clone());
                let (logits, server_vars) = model.forward_server(&mut tape, zl)?;
                let mut task: Option<crate::numcore::Var> = None;
                for (l, y) in logits.iter().zip(ys.iter()) {
                    let c = crate::model::cce(&mut tape, *l, y)?;
                    task = Some(match task {
                        Some(acc) => tape.add(acc, c)?,
                        None => c,
                    });
                }
                let task = tape.scale(task.unwrap(), cfg.weights.alpha2);
                let task_value = tape.value(task).scalar_value();

                let grads = tape.backward(task)?;
                let g_z = grads.wrt(zl, z.shape());
                let grad_list: Vec<_> = server_vars
                    .iter()
                    .map(|v| grads.wrt(*v, tape.value(*v).shape()))
                    .collect();

                for (head, (l, y)) in logits.iter().zip(ys.iter()).enumerate() {
                    let lv = tape.value(*l);
                    for r in 0..y.rows() {
                        if argmax(lv.row(r)) == argmax(y.row(r)) {
                            correct[head] += 1;
                        }
                    }
                }
                seen += z.rows();
                epoch_loss_sum += task_value;
                epoch_batches += 1;
                log.batches_seen += 1;

                let mut params = model.server_params_mut();
                adam.step(&mut params, &grad_list)?;

                transport.send_frame(
                    &WireMessage::new(
                        MsgType::Gradient,
                        msg.batch_id,
                        vec![
                            tensor_for_wire(&g_z, cfg.wire_f64),
                            values_for_wire(&[task_value], cfg.wire_f64),
                        ],
                    )
                    .encode(),
                )?;
                expected_batch += 1;
            }
            MsgType::EpochEnd => {
                let mut values = vec![epoch_loss_sum / epoch_batches.max(1) as f64];
                for c in &correct {
                    values.push(*c as f64 / seen.max(1) as f64);
                }
                transport.send_frame(
                    &WireMessage::new(
                        MsgType::Metrics,
                        msg.batch_id,
                        vec![values_for_wire(&values, cfg.wire_f64)],
                    )
                    .encode(),
                )?;
                log.epoch_rows.push(ServerEpochRow {
                    epoch: msg.batch_id as usize,
                    mean_task_loss: values[0],
                    head_accuracy: values[1..].to_vec(),
                });
                adam.end_epoch();
                epoch_loss_sum = 0.0;
                epoch_batches = 0;
                correct = vec![0; plan.heads.len()];
                seen = 0;
            }
            MsgType::Shutdown => break,
            other => {
                send_error(transport, msg.batch_id, ERR_PROTOCOL);
                return Err(Error::Protocol(format!(
                    "unexpected frame {:?} mid-session",
                    other
                )));
            }
        }
    }
    Ok(ServerOutcome { model, log })
}
