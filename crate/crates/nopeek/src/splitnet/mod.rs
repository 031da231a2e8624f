//! Two-endpoint split-learning runtime over a byte-exact framed protocol:
//! activations forward, gradients back, strictly alternating.

pub mod client;
pub mod server;
pub mod session;
pub mod transport;
pub mod wire;

pub use client::{run_client, ClientLog, ClientOutcome};
pub use server::{run_server, ServerLog, ServerOutcome};
pub use session::{
    add_noise_baseline, probe_dcor, run_split_session, train_unsplit, ClientData, DcorTarget,
    EpochRow, ModelPlan, SessionConfig, UnsplitOutcome,
};
pub use transport::{
    loopback_pair, CaptureTransport, Direction, FlakyTransport, FrameCapture, LoopbackTransport,
    TcpTransport, Transport,
};
pub use wire::{MsgType, WireError, WireMessage, WireTensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::NoPeekWeights;
    use crate::numcore::{Matrix, Rng};

    pub fn blob_data(n: usize, seed: u64) -> ClientData {
        let mut rng = Rng::new(seed);
        let mut x = Matrix::zeros(n, 6);
        let mut y = Matrix::zeros(n, 4);
        for i in 0..n {
            let c = i % 4;
            let (cx, cy) = match c {
                0 => (-3.0, -3.0),
                1 => (-3.0, 3.0),
                2 => (3.0, -3.0),
                _ => (3.0, 3.0),
            };
            x.set(i, 0, cx + rng.normal(0.0, 1.0));
            x.set(i, 1, cy + rng.normal(0.0, 1.0));
            for j in 2..6 {
                x.set(i, j, rng.normal(0.0, 1.0));
            }
            y.set(i, c, 1.0);
        }
        ClientData {
            x,
            heads: vec![("class".to_string(), y)],
            dcor_target: DcorTarget::Input,
            image: None,
        }
    }

    fn small_cfg() -> SessionConfig {
        SessionConfig {
            weights: NoPeekWeights { alpha1: 0.0, alpha2: 1.0 },
            epochs: 1,
            batch_size: 16,
            split_index: 5,
            seed: 42,
            wire_f64: true,
            ..Default::default()
        }
    }

    #[test]
    fn smoke_session_one_batch_protocol_trace() {
        let data = blob_data(16, 1); // exactly one batch
        let cfg = small_cfg();
        let capture = FrameCapture::new();
        let (client, server) = run_split_session(&cfg, &data, Some(capture.clone())).unwrap();
        assert_eq!(client.log.epoch_rows.len(), 1);
        assert_eq!(server.log.batches_seen, 1);

        let sent: Vec<MsgType> = capture
            .inventory()
            .unwrap()
            .into_iter()
            .filter(|(d, _, _)| *d == Direction::Sent)
            .map(|(_, t, _)| t)
            .collect();
        assert_eq!(
            sent,
            vec![
                MsgType::Hello,
                MsgType::Activation,
                MsgType::EpochEnd,
                MsgType::Shutdown
            ]
        );
        let received: Vec<MsgType> = capture
            .inventory()
            .unwrap()
            .into_iter()
            .filter(|(d, _, _)| *d == Direction::Received)
            .map(|(_, t, _)| t)
            .collect();
        assert_eq!(
            received,
            vec![MsgType::Hello, MsgType::Gradient, MsgType::Metrics]
        );
    }

    #[test]
    fn split_alpha_zero_matches_unsplit_bit_exactly_on_lossless_wire() {
        let data = blob_data(48, 2);
        let mut cfg = small_cfg();
        cfg.epochs = 2;
        let (client, server) = run_split_session(&cfg, &data, None).unwrap();
        let reference = train_unsplit(&cfg, &data).unwrap();
        assert_eq!(client.log.batch_losses.len(), reference.batch_losses.len());
        for (a, b) in client.log.batch_losses.iter().zip(reference.batch_losses.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "loss trajectories diverged");
        }
        // trained halves match the reference parameters bitwise
        let joined = SplitModel::reassemble(
            &client.model.split_halves().0,
            &server.model.split_halves().1,
        );
        for (a, b) in joined
            .layers
            .iter()
            .zip(reference.model.layers.iter())
        {
            assert_eq!(a.params, b.params);
        }
    }

    use crate::model::SplitModel;

    #[test]
    fn split_with_f32_wire_stays_within_tolerance() {
        let data = blob_data(48, 3);
        let mut cfg = small_cfg();
        cfg.epochs = 2;
        cfg.wire_f64 = false;
        let (client, _) = run_split_session(&cfg, &data, None).unwrap();
        let reference = train_unsplit(&cfg, &data).unwrap();
        for (a, b) in client.log.batch_losses.iter().zip(reference.batch_losses.iter()) {
            assert!((a - b).abs() < 1e-6, "divergence {} vs {}", a, b);
        }
    }

    #[test]
    fn session_is_deterministic_across_runs() {
        let data = blob_data(32, 4);
        let mut cfg = small_cfg();
        cfg.weights.alpha1 = 0.5;
        let c1 = FrameCapture::new();
        let c2 = FrameCapture::new();
        run_split_session(&cfg, &data, Some(c1.clone())).unwrap();
        run_split_session(&cfg, &data, Some(c2.clone())).unwrap();
        let f1 = c1.raw_frames();
        let f2 = c2.raw_frames();
        assert_eq!(f1.len(), f2.len());
        for ((d1, b1), (d2, b2)) in f1.iter().zip(f2.iter()) {
            assert_eq!(d1, d2);
            assert_eq!(b1, b2, "frames differ between identical runs");
        }
    }

    #[test]
    fn activation_frames_never_carry_input_width_tensors() {
        let data = blob_data(32, 5);
        let input_dim = data.x.cols() as u32;
        let mut cfg = small_cfg();
        cfg.weights.alpha1 = 0.3;
        let capture = FrameCapture::new();
        run_split_session(&cfg, &data, Some(capture.clone())).unwrap();
        for (_, msg_type, tensor_dims) in capture.inventory().unwrap() {
            for dims in &tensor_dims {
                if dims.len() == 2 {
                    assert_ne!(
                        dims[1], input_dim,
                        "{:?} frame carries an input-width tensor",
                        msg_type
                    );
                }
            }
        }
    }

    #[test]
    fn batch_ids_strictly_increase() {
        let data = blob_data(48, 6);
        let mut cfg = small_cfg();
        cfg.epochs = 2;
        let capture = FrameCapture::new();
        run_split_session(&cfg, &data, Some(capture.clone())).unwrap();
        let frames = capture.raw_frames();
        let mut last: Option<u64> = None;
        let mut activations = 0;
        let mut gradients = 0;
        for (dir, bytes) in &frames {
            let msg = WireMessage::decode(bytes).unwrap();
            match (dir, msg.msg_type) {
                (Direction::Sent, MsgType::Activation) => {
                    if let Some(prev) = last {
                        assert!(msg.batch_id > prev, "batch ids must increase");
                    }
                    last = Some(msg.batch_id);
                    activations += 1;
                }
                (Direction::Received, MsgType::Gradient) => gradients += 1,
                _ => {}
            }
        }
        assert_eq!(activations, gradients, "exactly one gradient per activation");
    }

    #[test]
    fn noise_scale_zero_leaves_activations_unchanged() {
        let mut rng = Rng::new(7);
        let z = rng.normal_matrix(4, 3, 0.0, 1.0);
        let mut noise_rng = Rng::new(8);
        assert_eq!(add_noise_baseline(&z, 0.0, &mut noise_rng), z);
    }

    #[test]
    fn noise_is_seed_reproducible() {
        let mut rng = Rng::new(9);
        let z = rng.normal_matrix(4, 3, 0.0, 1.0);
        let a = add_noise_baseline(&z, 2.0, &mut Rng::new(11));
        let b = add_noise_baseline(&z, 2.0, &mut Rng::new(11));
        assert_eq!(a, b);
        assert_ne!(a, z);
        for i in 0..4 {
            for j in 0..3 {
                assert!((a.at(i, j) - z.at(i, j)).abs() <= 2.0);
            }
        }
    }

    #[test]
    fn burnin_completes_before_any_traffic() {
        let data = blob_data(32, 10);
        let mut cfg = small_cfg();
        cfg.burnin_mode = crate::burnin::BurninMode::Ascent;
        cfg.burnin_iters = 5;
        let capture = FrameCapture::new();
        let (client, _) = run_split_session(&cfg, &data, Some(capture.clone())).unwrap();
        let events = &client.log.events;
        let pos = |name: &str| events.iter().position(|e| e == name).unwrap();
        assert!(pos("burnin_start") < pos("burnin_end"));
        assert!(pos("burnin_end") < pos("connect"));
        assert!(pos("connect") < pos("hello_sent"));
        assert!(client.log.burnin_trace.is_some());
        // first captured frame is the HELLO, nothing earlier
        let inv = capture.inventory().unwrap();
        assert_eq!(inv[0].1, MsgType::Hello);
    }

    #[test]
    fn out_of_order_batch_id_is_a_protocol_error() {
        let (mut client_t, mut server_t) = loopback_pair();
        let cfg = small_cfg();
        let handle = std::thread::spawn(move || run_server(&cfg, &mut server_t));
        // well-formed hello for the default plan
        let cfg2 = small_cfg();
        let data = blob_data(8, 11);
        let plan = ModelPlan::from_data(&cfg2, &data);
        client_t
            .send_frame(
                &WireMessage::new(
                    MsgType::Hello,
                    0,
                    vec![session::values_for_wire(&plan.hello_values(&cfg2), true)],
                )
                .encode(),
            )
            .unwrap();
        let _ack = client_t.recv_frame().unwrap();
        // activation with a wrong batch id
        let z = Matrix::zeros(4, 64);
        let mut y = Matrix::zeros(4, 4);
        for i in 0..4 {
            y.set(i, i % 4, 1.0);
        }
        client_t
            .send_frame(
                &WireMessage::new(
                    MsgType::Activation,
                    7,
                    vec![
                        WireTensor::from_matrix_f64(&z),
                        WireTensor::from_matrix_f64(&y),
                    ],
                )
                .encode(),
            )
            .unwrap();
        let reply = WireMessage::decode(&client_t.recv_frame().unwrap()).unwrap();
        assert_eq!(reply.msg_type, MsgType::Error);
        let err = handle.join().unwrap();
        assert!(matches!(err, Err(crate::error::Error::Protocol(_))));
    }

    #[test]
    fn connection_loss_writes_resumable_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abort.npkm");
        let data = blob_data(32, 12);
        let cfg = small_cfg();
        let (client_t, server_t) = loopback_pair();
        let server_cfg = cfg.clone();
        let handle = std::thread::spawn(move || {
            let mut t = server_t;
            let _ = run_server(&server_cfg, &mut t);
        });
        // allow just the hello through, then fail
        let mut flaky: Option<Box<dyn Transport>> =
            Some(Box::new(FlakyTransport::new(client_t, 1)));
        let result = run_client(
            &cfg,
            &data,
            move || Ok(flaky.take().unwrap()),
            Some(path.clone()),
        );
        assert!(result.is_err());
        assert!(path.exists(), "abort checkpoint was not written");
        let saved = SplitModel::load(&path).unwrap();
        assert_eq!(saved.layers.len(), cfg.split_index);
        handle.join().unwrap();
    }

    #[test]
    fn gradient_shape_mismatch_is_protocol_error() {
        let (client_t, server_t) = loopback_pair();
        let data = blob_data(8, 13);
        let cfg = small_cfg();
        // fake server: ack hello, then reply with a wrong-shaped gradient
        let handle = std::thread::spawn(move || {
            let mut t = server_t;
            let _hello = t.recv_frame().unwrap();
            t.send_frame(&WireMessage::new(MsgType::Hello, 0, vec![]).encode())
                .unwrap();
            let act = WireMessage::decode(&t.recv_frame().unwrap()).unwrap();
            let bad = Matrix::zeros(2, 2);
            t.send_frame(
                &WireMessage::new(
                    MsgType::Gradient,
                    act.batch_id,
                    vec![
                        WireTensor::from_matrix_f64(&bad),
                        WireTensor::scalar_f32(0.0),
                    ],
                )
                .encode(),
            )
            .unwrap();
        });
        let mut t: Option<Box<dyn Transport>> = Some(Box::new(client_t));
        let result = run_client(&cfg, &data, move || Ok(t.take().unwrap()), None);
        assert!(matches!(result, Err(crate::error::Error::Protocol(_))));
        handle.join().unwrap();
    }
}
