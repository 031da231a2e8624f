//! Communication-free device-level decorrelation.
//!
//! Before any activation leaves the device, the client iterates on a
//! representation Z that trades distance correlation with the raw data X
//! against distance correlation with the labels Y, maximizing
//!
//!   f(Z) = Tr(Z^T L_Y Z) / sqrt(Tr(Y^T L_Y Y) Tr(Z^T L_Z Z))
//!        - Tr(Z^T L_X Z) / sqrt(Tr(X^T L_X X) Tr(Z^T L_Z Z))
//!
//! where L_A = -J D2_A J is the negated double-centered squared-distance
//! matrix of A (positive semidefinite: twice the centered Gram matrix) and
//! L_Z is rebuilt from the current Z. Under this construction f is
//! invariant to rotation, translation, and positive scaling of Z, and
//! Tr(Z^T L_A Z) = (1/2) sum_ij A_ij ||z_i - z_j||^2 for the centered A.
//!
//! Two update modes, both safeguarded so the f history never decreases:
//! gradient ascent with the exact f as line-search oracle (default), and a
//! majorization-minimization style multiplicative update Z <- H Z that
//! falls back to ascent whenever it fails to improve f.
//!
//! This module has no dependency on the wire runtime; nothing here can
//! touch a socket.

use crate::depmeasure;
use crate::error::{Error, Result};
use crate::model::{AdamState, SplitModel};
use crate::numcore::linalg;
use crate::numcore::{kernels, Matrix, Tape};

const DEGENERATE_TRACE: f64 = 1e-12;
const MONOTONE_SLACK: f64 = 1e-12;
const MAX_CONSECUTIVE_REJECTS: usize = 30;

/// Graph-Laplacian surrogate of the two reference samples.
#[derive(Debug, Clone)]
pub struct LaplacianSurrogate {
    pub l_x: Matrix,
    pub l_y: Matrix,
    /// Tr(X^T L_X X) and Tr(Y^T L_Y Y).
    pub t_xx: f64,
    pub t_yy: f64,
    /// k_X = 1/sqrt(Tr(X^T L_X X)), k_Y likewise.
    pub k_x: f64,
    pub k_y: f64,
    pub n: usize,
}

/// L_A = -J D2 J for the squared-distance matrix D2 of the rows of `a`.
fn laplacian_of(a: &Matrix) -> Matrix {
    kernels::double_center(&kernels::squared_dist(a)).scale(-1.0)
}

/// Tr(Z^T M Z) for square M.
fn quad_trace(z: &Matrix, m: &Matrix) -> f64 {
    let mz = m.matmul(z);
    z.hadamard(&mz).sum()
}

pub fn build_laplacians(x: &Matrix, y: &Matrix) -> Result<LaplacianSurrogate> {
    let n = x.rows();
    if n < 3 {
        return Err(Error::SampleSize(format!("burn-in needs n >= 3, got {}", n)));
    }
    if y.rows() != n {
        return Err(Error::Dim(format!("x has {} rows, y has {}", n, y.rows())));
    }
    let l_x = laplacian_of(x);
    let l_y = laplacian_of(y);
    let t_xx = quad_trace(x, &l_x);
    let t_yy = quad_trace(y, &l_y);
    if t_xx <= DEGENERATE_TRACE {
        return Err(Error::DegenerateData(format!(
            "Tr(X^T L_X X) = {:.3e} is not positive",
            t_xx
        )));
    }
    if t_yy <= DEGENERATE_TRACE {
        return Err(Error::DegenerateData(format!(
            "Tr(Y^T L_Y Y) = {:.3e} is not positive",
            t_yy
        )));
    }
    Ok(LaplacianSurrogate {
        l_x,
        l_y,
        t_xx,
        t_yy,
        k_x: 1.0 / t_xx.sqrt(),
        k_y: 1.0 / t_yy.sqrt(),
        n,
    })
}

pub fn f_objective(z: &Matrix, lap: &LaplacianSurrogate) -> Result<f64> {
    if z.rows() != lap.n {
        return Err(Error::Dim(format!("z has {} rows, surrogate has {}", z.rows(), lap.n)));
    }
    let l_z = laplacian_of(z);
    let t_zz = quad_trace(z, &l_z);
    if t_zz <= DEGENERATE_TRACE {
        return Err(Error::DegenerateData(format!(
            "Tr(Z^T L_Z Z) = {:.3e} is not positive",
            t_zz
        )));
    }
    let n_y = quad_trace(z, &lap.l_y);
    let n_x = quad_trace(z, &lap.l_x);
    Ok(n_y / (lap.t_yy * t_zz).sqrt() - n_x / (lap.t_xx * t_zz).sqrt())
}

/// Gradient of f with L_Z frozen at the current Z:
///   (2/sqrt(T_Z)) (k_Y L_Y - k_X L_X) Z - (f / T_Z) L_Z Z
fn grad_frozen(z: &Matrix, lap: &LaplacianSurrogate) -> Result<Matrix> {
    let l_z = laplacian_of(z);
    let t_zz = quad_trace(z, &l_z);
    if t_zz <= DEGENERATE_TRACE {
        return Err(Error::DegenerateData("degenerate Z in gradient".into()));
    }
    let f = f_objective(z, lap)?;
    let mix = lap.l_y.scale(lap.k_y).sub(&lap.l_x.scale(lap.k_x));
    let term1 = mix.matmul(z).scale(2.0 / t_zz.sqrt());
    let term2 = l_z.matmul(z).scale(f / t_zz);
    Ok(term1.sub(&term2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    /// Gradient vanished; Z unchanged.
    Stationary,
    /// Thirty consecutive rejected trials; the loop should terminate.
    Stagnated,
}

#[derive(Debug, Clone)]
pub struct BurninState {
    pub z: Matrix,
    pub iteration: usize,
    pub f_history: Vec<f64>,
    /// Current ascent step size, halved on rejection.
    pub step: f64,
    consecutive_rejects: usize,
}

impl BurninState {
    pub fn new(z: Matrix, lap: &LaplacianSurrogate, step: f64) -> Result<Self> {
        let f0 = f_objective(&z, lap)?;
        Ok(BurninState {
            z,
            iteration: 0,
            f_history: vec![f0],
            step,
            consecutive_rejects: 0,
        })
    }

    pub fn f_current(&self) -> f64 {
        *self.f_history.last().unwrap()
    }
}

/// One safeguarded ascent step: backtracking line search on the exact f,
/// accepting only f(new) >= f(old) - 1e-12.
pub fn ascent_step(state: &mut BurninState, lap: &LaplacianSurrogate) -> Result<StepOutcome> {
    let f_old = state.f_current();
    let g = grad_frozen(&state.z, lap)?;
    let gnorm = g.frob_norm();
    state.iteration += 1;
    if gnorm < 1e-12 * state.z.frob_norm().max(1.0) {
        state.f_history.push(f_old);
        return Ok(StepOutcome::Stationary);
    }
    // Normalized direction keeps the step scale meaningful across problems.
    let dir = g.scale(1.0 / gnorm);
    loop {
        let trial = state.z.add(&dir.scale(state.step * state.z.frob_norm().max(1.0)));
        match f_objective(&trial, lap) {
            Ok(f_new) if f_new >= f_old - MONOTONE_SLACK => {
                state.z = trial;
                state.f_history.push(f_new);
                state.consecutive_rejects = 0;
                // mild growth speeds early progress without risking the
                // monotone guarantee, which the acceptance test enforces
                state.step = (state.step * 1.25).min(1.0);
                return Ok(StepOutcome::Accepted);
            }
            _ => {
                state.consecutive_rejects += 1;
                state.step *= 0.5;
                if state.consecutive_rejects >= MAX_CONSECUTIVE_REJECTS {
                    state.f_history.push(f_old);
                    return Ok(StepOutcome::Stagnated);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MmParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_sq: f64,
}

impl Default for MmParams {
    fn default() -> Self {
        MmParams { alpha: 1.0, beta: 1.0, gamma_sq: 1.0 }
    }
}

/// S_XY = k_Y L_Y - beta k_X L_X.
pub fn mixing_matrix(lap: &LaplacianSurrogate, beta: f64) -> Matrix {
    lap.l_y.scale(lap.k_y).sub(&lap.l_x.scale(beta * lap.k_x))
}

/// H = (gamma^2 D_X - alpha S_XY)^+ (gamma^2 D_X - L_M) with
/// D_X = diag(rowsum |S_XY|) + gamma^2 I. The added diagonal keeps the
/// inverted factor diagonally dominant for alpha <= gamma^2.
pub fn mm_operator(
    lap: &LaplacianSurrogate,
    alpha: f64,
    beta: f64,
    gamma_sq: f64,
    l_m: &Matrix,
) -> Result<Matrix> {
    let s = mixing_matrix(lap, beta);
    let n = lap.n;
    let mut d_x = Matrix::zeros(n, n);
    for i in 0..n {
        let rs: f64 = s.row(i).iter().map(|v| v.abs()).sum();
        d_x.set(i, i, rs + gamma_sq);
    }
    let left = d_x.scale(gamma_sq).sub(&s.scale(alpha));
    let right = d_x.scale(gamma_sq).sub(l_m);
    let pinv = linalg::pinv_symmetric(&left, 1e-12)?;
    Ok(pinv.matmul(&right))
}

/// One safeguarded multiplicative step Z <- H Z with default L_M = -S_XY.
/// Falls back to an ascent step whenever H fails to improve f, halving the
/// multiplicative mixing weight for the next attempt.
pub fn mm_step(
    state: &mut BurninState,
    lap: &LaplacianSurrogate,
    params: &mut MmParams,
) -> Result<StepOutcome> {
    let f_old = state.f_current();
    let l_m = mixing_matrix(lap, params.beta).scale(-1.0);
    let h = mm_operator(lap, params.alpha, params.beta, params.gamma_sq, &l_m)?;
    let trial = h.matmul(&state.z);
    match f_objective(&trial, lap) {
        Ok(f_new) if f_new >= f_old - MONOTONE_SLACK => {
            state.z = trial;
            state.iteration += 1;
            state.f_history.push(f_new);
            state.consecutive_rejects = 0;
            Ok(StepOutcome::Accepted)
        }
        _ => {
            params.alpha *= 0.5;
            ascent_step(state, lap)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BurninMode {
    Off,
    Ascent,
    Mm,
}

impl BurninMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(BurninMode::Off),
            "ascent" => Ok(BurninMode::Ascent),
            "mm" => Ok(BurninMode::Mm),
            other => Err(Error::Config(format!(
                "burnin_mode must be off, ascent, or mm, got {:?}",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BurninMode::Off => "off",
            BurninMode::Ascent => "ascent",
            BurninMode::Mm => "mm",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BurninConfig {
    pub mode: BurninMode,
    pub iterations: usize,
    pub step_init: f64,
    pub mm: MmParams,
}

impl Default for BurninConfig {
    fn default() -> Self {
        BurninConfig {
            mode: BurninMode::Ascent,
            iterations: 100,
            step_init: 0.05,
            mm: MmParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub f: f64,
    pub dcor_xz: f64,
    pub dcor_yz: f64,
}

#[derive(Debug)]
pub struct BurninOutcome {
    pub state: BurninState,
    pub trace: Vec<TraceRow>,
    pub stagnated: bool,
}

/// Run the full burn-in loop from an initial representation, tracing f and
/// the distance correlations of Z with the data and the labels.
pub fn run_burnin(
    x: &Matrix,
    y: &Matrix,
    z_init: Matrix,
    cfg: &BurninConfig,
) -> Result<BurninOutcome> {
    let lap = build_laplacians(x, y)?;
    let mut state = BurninState::new(z_init, &lap, cfg.step_init)?;
    let mut mm_params = cfg.mm;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let row = |state: &BurninState, it: usize| -> Result<TraceRow> {
        Ok(TraceRow {
            iteration: it,
            f: state.f_current(),
            dcor_xz: depmeasure::dcor(x, &state.z)?,
            dcor_yz: depmeasure::dcor(y, &state.z)?,
        })
    };
    trace.push(row(&state, 0)?);
    let mut stagnated = false;
    for it in 1..=cfg.iterations {
        let outcome = match cfg.mode {
            BurninMode::Off => break,
            BurninMode::Ascent => ascent_step(&mut state, &lap)?,
            BurninMode::Mm => mm_step(&mut state, &lap, &mut mm_params)?,
        };
        trace.push(row(&state, it)?);
        if outcome == StepOutcome::Stagnated {
            stagnated = true;
            break;
        }
    }
    // f is scale-free, so pin the output to unit RMS entries to keep the
    // downstream regression well conditioned
    let norm = state.z.frob_norm();
    if norm > 0.0 {
        state.z = state.z.scale((state.z.len() as f64).sqrt() / norm);
    }
    Ok(BurninOutcome { state, trace, stagnated })
}

pub fn write_trace_csv(path: &std::path::Path, trace: &[TraceRow]) -> Result<()> {
    let mut out = String::from("iteration,f,dcor_xz,dcor_yz\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{}\n", r.iteration, r.f, r.dcor_xz, r.dcor_yz));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Pre-fit the client half to reproduce the burned-in representation:
/// a fixed number of Adam steps on mean ||forward_client(X) - Z||^2.
/// Returns the final regression loss.
pub fn fit_client_to_target(
    model: &mut SplitModel,
    x: &Matrix,
    z_target: &Matrix,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    if z_target.rows() != x.rows() {
        return Err(Error::Dim(format!(
            "regression target has {} rows, data has {}",
            z_target.rows(),
            x.rows()
        )));
    }
    if z_target.cols() != model.split_dim() {
        return Err(Error::Dim(format!(
            "regression target has {} cols, split layer emits {}",
            z_target.cols(),
            model.split_dim()
        )));
    }
    let shapes: Vec<(usize, usize)> = model
        .client_params_mut()
        .iter()
        .map(|p| p.shape())
        .collect();
    let mut adam = AdamState::new(lr, 1.0, &shapes);
    let inv_n = 1.0 / x.rows() as f64;
    let mut last = f64::INFINITY;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let xl = tape.leaf(x.clone());
        let (z, client_vars) = model.forward_client(&mut tape, xl)?;
        let neg_target = tape.leaf(z_target.scale(-1.0));
        let resid = tape.add(z, neg_target)?;
        let sq = tape.l2_sq(resid);
        let loss = tape.scale(sq, inv_n);
        last = tape.value(loss).scalar_value();
        let grads = tape.backward(loss)?;
        let grad_list: Vec<Matrix> = client_vars
            .iter()
            .map(|v| grads.wrt(*v, tape.value(*v).shape()))
            .collect();
        let mut params = model.client_params_mut();
        adam.step(&mut params, &grad_list)?;
    }
    Ok(last)
}
