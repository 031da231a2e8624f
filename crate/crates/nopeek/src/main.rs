//! Thin command-line front end; all functionality lives in the library.

use std::net::TcpListener;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use nopeek::attack::{
    evaluate_attack, load_pairs, save_pairs, split_pairs, train_attacker, AttackerBudget,
};
use nopeek::config::FileConfig;
use nopeek::error::{Error, Result};
use nopeek::harness::{self, dataset, experiment, report};
use nopeek::model::SplitModel;
use nopeek::splitnet::{self, SessionConfig, TcpTransport, Transport};

#[derive(Parser)]
#[command(name = "nopeek", version, about = "Split learning with leakage-reduced activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        /// blobs or stripes-image
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run device-level decorrelation on its own and write the trace CSV.
    Burnin {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Train client and server in process over the loopback transport,
    /// then harvest pairs, attack, and write reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Skip the reconstruction attack stage.
        #[arg(long)]
        no_attack: bool,
    },
    /// Serve one training session on a TCP port.
    Server {
        #[arg(long)]
        port: u16,
        #[arg(long)]
        config: PathBuf,
        /// Write the trained server half here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Connect to a server and train.
    Client {
        #[arg(long)]
        addr: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the trained client half here (also used on abort).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the reconstruction attacker on a pair dump.
    Attack {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.9)]
        leak_fraction: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Privacy-utility curve over a list of leakage weights.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated alpha1 values, e.g. 0,0.1,0.5,1,2
        #[arg(long)]
        alphas: String,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Dump per-sample activation images (P6 PPM) of a checkpointed model.
    DumpActivations {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// How many layers to run before dumping; defaults to the split.
        #[arg(long)]
        layer: Option<usize>,
        /// Target shape HxWxC, e.g. 8x8x1; inferred square when omitted.
        #[arg(long)]
        shape: Option<String>,
    },
    /// Print the summary of a written report directory.
    Report {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("NOPEEK_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(e.exit_code());
        }
    }
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<_> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("shape must be HxWxC, got {:?}", s)));
    }
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.parse().map_err(|_| Error::Config(format!("bad shape component {:?}", p))))
        .collect::<Result<_>>()?;
    Ok((dims[0], dims[1], dims[2]))
}

fn client_data_from(cfg: &FileConfig, ds: &dataset::Dataset) -> Result<splitnet::ClientData> {
    let heads = match &cfg.protect_attr {
        Some(protect) => {
            ds.attribute(protect)?;
            ds.attributes
                .iter()
                .filter(|(n, _)| n != protect)
                .map(|(n, m)| (n.clone(), m.clone()))
                .collect()
        }
        None => vec![(ds.attributes[0].0.clone(), ds.attributes[0].1.clone())],
    };
    let dcor_target = match &cfg.protect_attr {
        Some(protect) => splitnet::DcorTarget::Attribute {
            name: protect.clone(),
            labels: ds.attribute(protect)?.clone(),
        },
        None => splitnet::DcorTarget::Input,
    };
    Ok(splitnet::ClientData { x: ds.x.clone(), heads, dcor_target, image: ds.image_shape })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { kind, n, seed, out } => {
            let ds = harness::gen_synthetic(&kind, n, seed)?;
            harness::save_dataset(&ds, &out)?;
            println!("wrote {} samples of {:?} to {}", ds.len(), ds.name, out.display());
        }
        Command::Burnin { config, data, trace } => {
            let cfg = FileConfig::load(&config)?;
            let ds = harness::load_dataset(&data)?;
            let session = cfg.to_session()?;
            let rows: Vec<usize> = (0..ds.len().min(128)).collect();
            let sub = ds.select(&rows);
            let plan = splitnet::ModelPlan {
                input_dim: sub.x.cols(),
                image: sub.image_shape,
                heads: vec![(sub.attributes[0].0.clone(), sub.attributes[0].1.cols())],
                split_index: session.split_index,
                init_seed: session.init_seed(),
            };
            let model = plan.build()?;
            let z0 = model.forward_client_plain(&sub.x)?;
            let mode = if cfg.burnin_mode == nopeek::burnin::BurninMode::Off {
                nopeek::burnin::BurninMode::Ascent
            } else {
                cfg.burnin_mode
            };
            let bcfg = nopeek::burnin::BurninConfig {
                mode,
                iterations: cfg.burnin_iters,
                ..Default::default()
            };
            let outcome = nopeek::burnin::run_burnin(&sub.x, &sub.attributes[0].1, z0, &bcfg)?;
            nopeek::burnin::write_trace_csv(&trace, &outcome.trace)?;
            let first = outcome.trace.first().unwrap();
            let last = outcome.trace.last().unwrap();
            println!(
                "burn-in: f {:.4} -> {:.4}, dcor(X,Z) {:.4} -> {:.4}, dcor(Y,Z) {:.4} -> {:.4}",
                first.f, last.f, first.dcor_xz, last.dcor_xz, first.dcor_yz, last.dcor_yz
            );
        }
        Command::Train { config, data, out_dir, no_attack } => {
            let cfg = FileConfig::load(&config)?;
            let ds = harness::load_dataset(&data)?;
            let opts = experiment::ExperimentOptions { skip_attack: no_attack, ..Default::default() };
            let outcome = experiment::run_experiment(&cfg, &ds, &opts)?;
            report::write_experiment(&outcome, &out_dir)?;
            outcome.model.save(&out_dir.join("model.npkm"))?;
            let raw = nopeek::attack::harvest_raw_pairs(&outcome.model, &outcome.val)?;
            save_pairs(&raw, &out_dir.join("pairs.npkp"))?;
            println!("{}", report::describe_report_dir(&out_dir)?);
        }
        Command::Server { port, config, out } => {
            let cfg = FileConfig::load(&config)?;
            let session: SessionConfig = cfg.to_session()?;
            let listener = TcpListener::bind(("0.0.0.0", port))
                .map_err(|e| Error::Protocol(format!("bind port {}: {}", port, e)))?;
            log::info!("listening on {}", listener.local_addr().unwrap());
            let (stream, peer) = listener
                .accept()
                .map_err(|e| Error::Protocol(format!("accept: {}", e)))?;
            log::info!("session from {}", peer);
            let mut transport = TcpTransport::from_stream(stream);
            let outcome = splitnet::run_server(&session, &mut transport)?;
            if let Some(path) = out {
                outcome.model.split_halves().1.save(&path)?;
                println!("saved server half to {}", path.display());
            }
            for row in &outcome.log.epoch_rows {
                println!(
                    "epoch {}: task loss {:.4}, accuracy {:?}",
                    row.epoch, row.mean_task_loss, row.head_accuracy
                );
            }
        }
        Command::Client { addr, config, data, out } => {
            let cfg = FileConfig::load(&config)?;
            let ds = harness::load_dataset(&data)?;
            let session: SessionConfig = cfg.to_session()?;
            let client_data = client_data_from(&cfg, &ds)?;
            let addr2 = addr.clone();
            let outcome = splitnet::run_client(
                &session,
                &client_data,
                move || Ok(Box::new(TcpTransport::connect(&addr2)?) as Box<dyn Transport>),
                out.clone(),
            )?;
            if let Some(path) = out {
                outcome.model.split_halves().0.save(&path)?;
                println!("saved client half to {}", path.display());
            }
            for row in &outcome.log.epoch_rows {
                println!(
                    "epoch {}: loss {:.4}, dcor(X,Z) {:.4}, dcor(Y,Z) {:.4}",
                    row.epoch, row.train_loss, row.dcor_xz, row.dcor_yz
                );
            }
        }
        Command::Attack { pairs, out_dir, epochs, leak_fraction, seed } => {
            let raw = load_pairs(&pairs)?;
            let set = split_pairs(&raw, leak_fraction, seed)?;
            let budget = AttackerBudget { epochs, ..Default::default() };
            let attacker = train_attacker(&set, &budget, seed)?;
            let rep = evaluate_attack(&attacker.decoder, &set)?;
            std::fs::create_dir_all(&out_dir)?;
            nopeek::attack::write_report_csv(&rep, &out_dir.join("attack.csv"))?;
            nopeek::attack::write_report_json(&rep, &out_dir.join("attack.json"))?;
            println!(
                "attacker test: mean l2 {:.4}, median l2 {:.4}, mse {:.6}",
                rep.mean_l2, rep.median_l2, rep.mse
            );
        }
        Command::Sweep { config, data, alphas, out_dir } => {
            let cfg = FileConfig::load(&config)?;
            let ds = harness::load_dataset(&data)?;
            let alpha_list: Vec<f64> = alphas
                .split(',')
                .map(|a| {
                    a.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad alpha {:?}", a)))
                })
                .collect::<Result<_>>()?;
            if alpha_list.len() < 2 {
                log::warn!("sweeping fewer than 2 alphas traces no curve");
            }
            let results = experiment::sweep_alpha(&cfg, &ds, &alpha_list, &Default::default())?;
            std::fs::create_dir_all(&out_dir)?;
            let rows: Vec<_> = results.iter().map(|(r, _)| r.clone()).collect();
            experiment::write_sweep_csv(&rows, &out_dir.join("sweep.csv"))?;
            for (row, outcome) in &results {
                let sub = out_dir.join(format!("alpha_{}", row.alpha));
                report::write_experiment(outcome, &sub)?;
            }
            for r in &rows {
                println!(
                    "alpha {}: accuracy {:.4}, dcor {:.4}, attacker mse {:.6}",
                    r.alpha, r.accuracy, r.dcor_xz, r.attacker_mse
                );
            }
        }
        Command::DumpActivations { checkpoint, data, out_dir, layer, shape } => {
            let model = SplitModel::load(&checkpoint)?;
            let ds = harness::load_dataset(&data)?;
            let layer_count = layer.unwrap_or(model.split_index);
            let width = model
                .layers
                .get(layer_count.wrapping_sub(1))
                .map(|l| l.kind.output_dim())
                .unwrap_or(ds.x.cols());
            let shape = match shape {
                Some(s) => parse_shape(&s)?,
                None => {
                    let side = (width as f64).sqrt() as usize;
                    if side * side != width {
                        return Err(Error::Config(format!(
                            "layer width {} is not square; pass --shape HxWxC",
                            width
                        )));
                    }
                    (side, side, 1)
                }
            };
            let paths = harness::dump_activation_images(&model, &ds, layer_count, shape, &out_dir)?;
            println!("wrote {} images to {}", paths.len(), out_dir.display());
        }
        Command::Report { dir } => {
            print!("{}", report::describe_report_dir(&dir)?);
        }
    }
    Ok(())
}
