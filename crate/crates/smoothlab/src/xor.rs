//! Large-step SGD on the XOR distribution with the expected-weight oracle.
//!
//! Data is uniform on {-1, +1}^d with label y = x(1) x(2). The quadratic net
//! is trained by one-pass mini-batch SGD under the linear loss with step size
//! eta = m. Under the population gradient only the first two coordinates of
//! each neuron move, following
//!
//!   alpha(t+1) = alpha(t) + gamma beta(t)
//!   beta(t+1)  = beta(t)  + gamma alpha(t),   gamma = eta a_i / m,
//!
//! whose closed form at eta = m collapses to 2^{t-1} (w0(1) + a_i w0(2)).
//! The oracle serves as the correctness reference for the SGD runs: the
//! deviation profile z^t tracks how far the sampled weights drift from it.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Dataset, Provenance};
use crate::net::{Model, QuadNetParams};
use crate::numerics::{derive_seed, gemm_nt_s, gemm_tn_s, Matrix, RngStream};
use crate::Error;

/// Stream ids inside one run seed: weights draw from stream 0 (see
/// [`QuadNetParams::init_gaussian`]), step-t batches from `BATCH_STREAM + t`,
/// step-t Monte-Carlo evaluation from `MC_STREAM + t`.
const BATCH_STREAM: u64 = 1_000;
const MC_STREAM: u64 = 2_000;

/// Base of the logarithm in the default step count T = ceil(log(d)).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogBase {
    /// Consistent with the 2^t signal growth of the oracle.
    Two,
    Natural,
}

#[derive(Clone, Debug)]
pub struct XorConfig {
    pub dim: usize,
    pub width: usize,
    /// Fresh i.i.d. batch size per step.
    pub batch_size: usize,
    /// Step size; defaults to m.
    pub eta: Option<f64>,
    /// Step count; defaults to ceil(log_base(d)).
    pub steps: Option<usize>,
    pub log_base: LogBase,
    /// Monte-Carlo sample count for the per-step accuracy estimate.
    pub mc_samples: usize,
    /// Use the full 2^d enumeration as the batch at every step (d <= 20):
    /// SGD then follows the population dynamics exactly.
    pub enumeration_batches: bool,
    pub seed: u64,
}

impl XorConfig {
    pub fn new(dim: usize, width: usize, batch_size: usize, seed: u64) -> Self {
        XorConfig {
            dim,
            width,
            batch_size,
            eta: None,
            steps: None,
            log_base: LogBase::Two,
            mc_samples: 10_000,
            enumeration_batches: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.dim < 2 {
            return Err(Error::Config("xor needs dim >= 2".into()));
        }
        if self.width == 0 || self.width % 2 != 0 {
            return Err(Error::Config("xor needs an even positive width".into()));
        }
        if self.batch_size == 0 && !self.enumeration_batches {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        if self.enumeration_batches && self.dim > 20 {
            return Err(Error::Config("enumeration batches need dim <= 20".into()));
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0) {
                return Err(Error::Config("eta must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn resolved_eta(&self) -> f64 {
        self.eta.unwrap_or(self.width as f64)
    }

    pub fn resolved_steps(&self) -> usize {
        self.steps.unwrap_or(default_steps(self.dim, self.log_base))
    }
}

/// T = ceil(log(d)) in the configured base.
pub fn default_steps(dim: usize, base: LogBase) -> usize {
    let d = dim as f64;
    let t = match base {
        LogBase::Two => d.log2(),
        LogBase::Natural => d.ln(),
    };
    t.ceil().max(1.0) as usize
}

/// `count` i.i.d. uniform points of {-1, +1}^d with labels y = x(1) x(2).
pub fn sample_xor(seed: u64, stream_id: u64, d: usize, count: usize) -> Dataset {
    assert!(d >= 2 && count >= 1);
    let mut rng = RngStream::new(seed, stream_id);
    let mut data = Vec::with_capacity(count * d);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let start = data.len();
        for _ in 0..d {
            data.push(rng.next_sign());
        }
        labels.push(data[start] * data[start + 1]);
    }
    Dataset::new(Matrix::from_vec(count, d, data), labels, Provenance::Xor)
        .expect("hypercube samples are always valid")
}

/// All 2^d points of the hypercube with their XOR labels (d <= 20).
pub fn enumerate_xor(d: usize) -> Result<Dataset, Error> {
    if !(2..=20).contains(&d) {
        return Err(Error::Config(format!("exact enumeration needs 2 <= d <= 20, got {d}")));
    }
    let count = 1usize << d;
    let mut data = Vec::with_capacity(count * d);
    let mut labels = Vec::with_capacity(count);
    for g in 0..count {
        for k in 0..d {
            data.push(if g >> k & 1 == 0 { 1.0 } else { -1.0 });
        }
        let x0 = data[g * d];
        let x1 = data[g * d + 1];
        labels.push(x0 * x1);
    }
    Dataset::new(Matrix::from_vec(count, d, data), labels, Provenance::Xor)
}

/// One mini-batch SGD step under the linear loss:
/// `w_i += (eta a_i / (n m)) sum_j (x_j^T w_i) x_j y_j`.
pub fn sgd_step(params: &mut QuadNetParams, batch: &Dataset, eta: f64) {
    assert!(eta > 0.0);
    assert_eq!(batch.input_dim(), params.input_dim());
    assert!(!batch.is_empty());
    let (m, d, n) = (params.width(), params.input_dim(), batch.len());
    let x = batch.inputs();

    // s_{ji} = x_j^T w_i
    let mut s = Matrix::zeros(n, m);
    gemm_nt_s(n, d, m, x.data(), params.weights.data(), s.data_mut());
    for j in 0..n {
        let yj = batch.labels()[j];
        for v in s.row_mut(j) {
            *v *= yj;
        }
    }
    // update_i = sum_j s_{ji} y_j x_j, then scaled by eta a_i / (n m)
    let mut update = Matrix::zeros(m, d);
    gemm_tn_s(n, m, d, s.data(), x.data(), update.data_mut());
    let base = eta / (n as f64 * m as f64);
    for i in 0..m {
        let scale = base * params.signs()[i];
        let wrow = params.weights.row_mut(i);
        for (w, u) in wrow.iter_mut().zip(update.row(i)) {
            *w += scale * u;
        }
    }
}

/// Expected-weight dynamics under the population gradient: per neuron, the
/// signal pair (alpha, beta) with its gamma, plus the frozen tail.
#[derive(Clone, Debug)]
pub struct OracleState {
    alphas: Vec<f64>,
    betas: Vec<f64>,
    gammas: Vec<f64>,
    /// Initial weights; coordinates 3..d never move under the population
    /// dynamics.
    tail: Matrix,
    t: usize,
}

impl OracleState {
    pub fn from_params(params: &QuadNetParams, eta: f64) -> Self {
        let m = params.width();
        OracleState {
            alphas: (0..m).map(|i| params.weights.get(i, 0)).collect(),
            betas: (0..m).map(|i| params.weights.get(i, 1)).collect(),
            gammas: (0..m).map(|i| eta * params.signs()[i] / m as f64).collect(),
            tail: params.weights.clone(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    pub fn alpha(&self, i: usize) -> f64 {
        self.alphas[i]
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.betas[i]
    }

    /// alpha(t+1) = alpha(t) + gamma beta(t); beta(t+1) = beta(t) + gamma alpha(t).
    pub fn population_step(&mut self) {
        for i in 0..self.alphas.len() {
            let (a, b, g) = (self.alphas[i], self.betas[i], self.gammas[i]);
            self.alphas[i] = a + g * b;
            self.betas[i] = b + g * a;
        }
        self.t += 1;
    }

    /// Expected weights at the current step: the signal pair plus frozen tail.
    pub fn expected_weights(&self) -> Matrix {
        let mut w = self.tail.clone();
        for i in 0..self.alphas.len() {
            w.set(i, 0, self.alphas[i]);
            w.set(i, 1, self.betas[i]);
        }
        w
    }
}

/// Closed-form solution of the oracle recursion after `t` steps:
/// even/odd binomial sums collapse to `((1+g)^t +- (1-g)^t) / 2`.
pub fn oracle_closed_form(gamma: f64, alpha0: f64, beta0: f64, t: usize) -> (f64, f64) {
    let plus = (1.0 + gamma).powi(t as i32);
    let minus = (1.0 - gamma).powi(t as i32);
    let even = 0.5 * (plus + minus);
    let odd = 0.5 * (plus - minus);
    (even * alpha0 + odd * beta0, even * beta0 + odd * alpha0)
}

/// Per-step deviation diagnostics of the SGD weights from the oracle.
#[derive(Clone, Copy, Debug)]
pub struct Deviation {
    /// z^t = max over neurons and coordinates of |E[w](k) - w(k)|.
    pub z: f64,
    /// Max over neurons of the tail norm ||v(3:d)||.
    pub tail_norm: f64,
}

pub fn deviation_profile(params: &QuadNetParams, oracle: &OracleState) -> Deviation {
    let expected = oracle.expected_weights();
    let (m, d) = (params.width(), params.input_dim());
    let mut z = 0.0f64;
    let mut tail_norm = 0.0f64;
    for i in 0..m {
        let er = expected.row(i);
        let wr = params.weights.row(i);
        let mut tail_sq = 0.0;
        for k in 0..d {
            let dev = (er[k] - wr[k]).abs();
            z = z.max(dev);
            if k >= 2 {
                tail_sq += dev * dev;
            }
        }
        tail_norm = tail_norm.max(tail_sq.sqrt());
    }
    Deviation { z, tail_norm }
}

fn accuracy_over(params: &QuadNetParams, data: &Dataset) -> f64 {
    let model = params.model();
    let outs = model.batch_forward(params.weights.data(), data.inputs());
    // ties y Phi = 0 count as errors: the accuracy event is strict.
    let correct = outs
        .iter()
        .zip(data.labels())
        .filter(|(phi, y)| **y * **phi > 0.0)
        .count();
    correct as f64 / data.len() as f64
}

/// Monte-Carlo test accuracy on fresh samples.
pub fn test_accuracy(params: &QuadNetParams, seed: u64, stream_id: u64, mc_samples: usize) -> f64 {
    let data = sample_xor(seed, stream_id, params.input_dim(), mc_samples);
    accuracy_over(params, &data)
}

/// Exact accuracy over the full 2^d enumeration (d <= 20).
pub fn exact_test_accuracy(params: &QuadNetParams) -> Result<f64, Error> {
    let data = enumerate_xor(params.input_dim())?;
    Ok(accuracy_over(params, &data))
}

/// One logged SGD step (step 0 is the initialization row).
#[derive(Clone, Copy, Debug)]
pub struct XorStepLog {
    pub step: usize,
    pub mc_accuracy: f64,
    pub exact_accuracy: Option<f64>,
    pub z: f64,
    pub tail_norm: f64,
    /// Mean |w_i(1)| over neurons: the measured signal strength.
    pub signal_coord1: f64,
    pub signal_coord2: f64,
}

#[derive(Clone, Debug)]
pub struct XorRun {
    pub config: XorConfig,
    pub steps: Vec<XorStepLog>,
    pub final_params: QuadNetParams,
}

impl XorRun {
    pub fn final_accuracy(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.mc_accuracy)
    }

    /// First step whose Monte-Carlo error drops below the threshold.
    pub fn steps_to_error_below(&self, threshold: f64) -> Option<usize> {
        self.steps.iter().find(|s| 1.0 - s.mc_accuracy < threshold).map(|s| s.step)
    }
}

fn signal_means(params: &QuadNetParams) -> (f64, f64) {
    let m = params.width();
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for i in 0..m {
        s1 += params.weights.get(i, 0).abs();
        s2 += params.weights.get(i, 1).abs();
    }
    (s1 / m as f64, s2 / m as f64)
}

/// T one-pass SGD steps with fresh batches, logging accuracy, the deviation
/// profile against the oracle, and the signal coordinates per step.
pub fn run_theorem4(cfg: &XorConfig) -> Result<XorRun, Error> {
    cfg.validate()?;
    let eta = cfg.resolved_eta();
    let t_max = cfg.resolved_steps();
    let mut params = QuadNetParams::init_gaussian(cfg.seed, cfg.width, cfg.dim)?;
    let mut oracle = OracleState::from_params(&params, eta);

    let exact_ok = cfg.dim <= 20;
    let mut steps = Vec::with_capacity(t_max + 1);
    let (s1, s2) = signal_means(&params);
    steps.push(XorStepLog {
        step: 0,
        mc_accuracy: test_accuracy(&params, cfg.seed, MC_STREAM, cfg.mc_samples),
        exact_accuracy: if exact_ok { Some(exact_test_accuracy(&params)?) } else { None },
        z: 0.0,
        tail_norm: 0.0,
        signal_coord1: s1,
        signal_coord2: s2,
    });

    for t in 1..=t_max {
        let batch = if cfg.enumeration_batches {
            enumerate_xor(cfg.dim)?
        } else {
            sample_xor(cfg.seed, BATCH_STREAM + t as u64, cfg.dim, cfg.batch_size)
        };
        sgd_step(&mut params, &batch, eta);
        oracle.population_step();
        let dev = deviation_profile(&params, &oracle);
        let (s1, s2) = signal_means(&params);
        steps.push(XorStepLog {
            step: t,
            mc_accuracy: test_accuracy(&params, cfg.seed, MC_STREAM + t as u64, cfg.mc_samples),
            exact_accuracy: if exact_ok { Some(exact_test_accuracy(&params)?) } else { None },
            z: dev.z,
            tail_norm: dev.tail_norm,
            signal_coord1: s1,
            signal_coord2: s2,
        });
    }
    Ok(XorRun { config: cfg.clone(), steps, final_params: params })
}

/// One sweep cell: a full run at (d, replicate).
#[derive(Clone, Debug)]
pub struct SweepCell {
    pub dim: usize,
    pub replicate: u64,
    pub run: XorRun,
}

/// Run the (dims x replicates) grid in parallel with disjoint derived seeds;
/// results come back sorted by dim then replicate.
pub fn sweep(
    dims: &[usize],
    replicates: u64,
    batch_of_dim: impl Fn(usize) -> usize + Sync,
    make_cfg: impl Fn(usize, usize, u64) -> XorConfig + Sync,
    top_seed: u64,
) -> Result<Vec<SweepCell>, Error> {
    let mut jobs = Vec::new();
    for &d in dims {
        for r in 0..replicates {
            jobs.push((d, r));
        }
    }
    let cells: Result<Vec<SweepCell>, Error> = jobs
        .par_iter()
        .map(|&(d, r)| {
            let seed = derive_seed(top_seed, d as u64, r);
            let mut cfg = make_cfg(d, batch_of_dim(d), seed);
            cfg.seed = seed;
            let run = run_theorem4(&cfg)?;
            Ok(SweepCell { dim: d, replicate: r, run })
        })
        .collect();
    let mut cells = cells?;
    cells.sort_by_key(|c| (c.dim, c.replicate));
    Ok(cells)
}

const SWEEP_HEADER: &str =
    "d,seed,n,m,eta,T,step,mc_accuracy,exact_accuracy,z_t,tail_norm,signal_coord1,signal_coord2";

/// Per-step sweep CSV; the exact-accuracy column is empty when d > 20.
pub fn write_sweep_csv(cells: &[SweepCell], path: &Path) -> Result<(), Error> {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for cell in cells {
        let cfg = &cell.run.config;
        for s in &cell.run.steps {
            let exact = s.exact_accuracy.map_or(String::new(), |v| format!("{v:.16e}"));
            out.push_str(&format!(
                "{},{},{},{},{:.16e},{},{},{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                cell.dim,
                cell.replicate,
                cfg.batch_size,
                cfg.width,
                cfg.resolved_eta(),
                cfg.resolved_steps(),
                s.step,
                s.mc_accuracy,
                exact,
                s.z,
                s.tail_norm,
                s.signal_coord1,
                s.signal_coord2,
            ));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
