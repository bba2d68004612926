//! Full-batch gradient descent with per-iteration metric logging, the
//! descent-lemma check, stopping rules, the width-condition verdicts, and the
//! local quasi-convexity probe.

use crate::data::Dataset;
use crate::net::Model;
use crate::numerics::{flat_axpy, flat_dist, flat_norm};
use crate::objective::{
    descent_step_size, empirical_loss, empirical_loss_and_grad, estimate_constants, LossKind,
    ObjectiveConstants, ProbeOpts,
};
use crate::Error;

/// Slack for the descent inequality; absorbs f64 rounding only.
pub const DESCENT_SLACK: f64 = 1e-10;

/// One logged iterate.
#[derive(Clone, Copy, Debug)]
pub struct IterRecord {
    pub iter: usize,
    /// F_hat(w_t); recorded at every step.
    pub train_loss: f64,
    /// Held-out loss; NaN flags a strided (skipped) evaluation.
    pub test_loss: f64,
    /// test_loss - train_loss; NaN when test_loss was skipped.
    pub gen_gap: f64,
    /// rho(t) = ||w_t - w_0||.
    pub dist_from_init: f64,
    pub grad_norm: f64,
    /// sum_{tau < t} F_hat(w_tau); row 0 carries 0.
    pub cum_train_loss: f64,
    pub eta: f64,
    /// Step t-1 -> t violated the descent inequality beyond the slack.
    pub descent_violation: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RunMetrics {
    pub records: Vec<IterRecord>,
}

impl RunMetrics {
    pub fn final_record(&self) -> Option<&IterRecord> {
        self.records.last()
    }

    /// sum_{t=0}^{T-1} F_hat(w_t): the stability-bound accumulator.
    pub fn cumulative_train_loss(&self) -> f64 {
        self.final_record().map_or(0.0, |r| r.cum_train_loss)
    }

    /// Last record that has a test evaluation.
    pub fn last_evaluated(&self) -> Option<&IterRecord> {
        self.records.iter().rev().find(|r| !r.test_loss.is_nan())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSizeRule {
    Fixed(f64),
    /// eta = safety / (C1^2 + C2) with constants measured at initialization.
    Auto { safety: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopRule {
    /// Run exactly `max_iters` steps.
    FixedT,
    /// T = ceil(sqrt(n)); the early-stopping rule for noisy data.
    SqrtN,
    /// Stop once the train loss falls below the threshold (or at `max_iters`).
    LossBelow(f64),
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub step_size: StepSizeRule,
    pub max_iters: usize,
    pub stop_rule: StopRule,
    /// Test-evaluation cadence. `None`: every iteration for T <= 5000, else
    /// every ceil(T/5000). Train losses are recorded at every step regardless.
    pub eval_every: Option<usize>,
}

impl TrainConfig {
    pub fn fixed(eta: f64, max_iters: usize) -> Self {
        TrainConfig {
            step_size: StepSizeRule::Fixed(eta),
            max_iters,
            stop_rule: StopRule::FixedT,
            eval_every: None,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if let StepSizeRule::Fixed(eta) = self.step_size {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::Config("step size must be positive and finite".into()));
            }
        }
        if let StepSizeRule::Auto { safety } = self.step_size {
            if !(safety > 0.0 && safety <= 1.0) {
                return Err(Error::Config("auto step-size safety must be in (0, 1]".into()));
            }
        }
        if let StopRule::LossBelow(eps) = self.stop_rule {
            if !(eps > 0.0) {
                return Err(Error::Config("loss-below threshold must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Result of a training run. `diverged` carries the failing iterate when the
/// loss or weights became non-finite; the metrics then end at the diagnostic
/// record for that iterate.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: Vec<f64>,
    pub metrics: RunMetrics,
    pub eta: f64,
    /// Constants measured at initialization when the step size was auto.
    pub constants: Option<ObjectiveConstants>,
    pub diverged: Option<usize>,
}

/// w_{t+1} = w_t - eta * grad F_hat(w_t) for T steps, logging one record per
/// iterate (t = 0..=T).
pub fn train_gd<M: Model + ?Sized>(
    model: &M,
    w0: &[f64],
    train: &Dataset,
    test: Option<&Dataset>,
    kind: LossKind,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, Error> {
    train_gd_observed(model, w0, train, test, kind, cfg, |_, _, _| {})
}

/// [`train_gd`] with a per-iterate observer `(t, w_t, record)`, for callers
/// that audit quantities needing the live weights (e.g. Hessian probes).
pub fn train_gd_observed<M: Model + ?Sized>(
    model: &M,
    w0: &[f64],
    train: &Dataset,
    test: Option<&Dataset>,
    kind: LossKind,
    cfg: &TrainConfig,
    mut observer: impl FnMut(usize, &[f64], &IterRecord),
) -> Result<TrainOutcome, Error> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut constants = None;
    let eta = match cfg.step_size {
        StepSizeRule::Fixed(eta) => eta,
        StepSizeRule::Auto { safety } => {
            let c = estimate_constants(model, w0, w0, train.inputs(), ProbeOpts::default());
            let eta = descent_step_size(&c, safety);
            constants = Some(c);
            eta
        }
    };

    let t_max = match cfg.stop_rule {
        StopRule::FixedT | StopRule::LossBelow(_) => cfg.max_iters,
        StopRule::SqrtN => (train.len() as f64).sqrt().ceil() as usize,
    };
    let eval_every = cfg
        .eval_every
        .unwrap_or(if t_max <= 5000 { 1 } else { t_max.div_ceil(5000) })
        .max(1);

    let mut w = w0.to_vec();
    let mut metrics = RunMetrics::default();
    let mut cum = 0.0;
    let mut prev: Option<(f64, f64)> = None; // (loss, grad_norm) at t-1
    let mut diverged = None;

    for t in 0..=t_max {
        let (loss, grad) = empirical_loss_and_grad(model, &w, train, kind)?;
        let grad_norm = flat_norm(&grad);
        let finite = loss.is_finite() && grad_norm.is_finite();

        let violation = match prev {
            Some((pl, pg)) => loss > pl - 0.5 * eta * pg * pg + DESCENT_SLACK,
            None => false,
        };
        let evaluate = finite && (t % eval_every == 0 || t == t_max);
        let test_loss = match (evaluate, test) {
            (true, Some(ts)) => empirical_loss(model, &w, ts, kind)?,
            _ => f64::NAN,
        };
        let record = IterRecord {
            iter: t,
            train_loss: loss,
            test_loss,
            gen_gap: test_loss - loss,
            dist_from_init: flat_dist(&w, w0),
            grad_norm,
            cum_train_loss: cum,
            eta,
            descent_violation: violation,
        };
        observer(t, &w, &record);
        metrics.records.push(record);

        if !finite {
            // Abort rather than clip: clipped steps would silently invalidate
            // the descent-lemma assertions.
            diverged = Some(t);
            break;
        }
        cum += loss;
        prev = Some((loss, grad_norm));

        if t == t_max {
            break;
        }
        if let StopRule::LossBelow(eps) = cfg.stop_rule {
            if loss <= eps {
                break;
            }
        }
        flat_axpy(&mut w, -eta, &grad);
    }

    Ok(TrainOutcome { weights: w, metrics, eta, constants, diverged })
}

/// Count iterates violating F(w_{t+1}) <= F(w_t) - (eta/2) ||grad F(w_t)||^2
/// beyond the absolute slack; pure arithmetic over the logged records.
pub fn descent_check(metrics: &RunMetrics) -> usize {
    metrics
        .records
        .windows(2)
        .filter(|pair| {
            let (a, b) = (&pair[0], &pair[1]);
            b.train_loss > a.train_loss - 0.5 * b.eta * a.grad_norm * a.grad_norm + DESCENT_SLACK
        })
        .count()
}

/// Train-loss rate bound 4 rho*^2 / (eta T).
pub fn train_rate_bound(rho_star: f64, eta: f64, t: usize) -> f64 {
    assert!(rho_star >= 0.0 && eta > 0.0 && t > 0);
    4.0 * rho_star * rho_star / (eta * t as f64)
}

/// Empirical generalized local quasi-convexity probe along `[w1, w2]`.
#[derive(Clone, Copy, Debug)]
pub struct GlqcProbe {
    pub max_on_segment: f64,
    pub endpoint_max: f64,
    /// max_on_segment / endpoint_max.
    pub tau_ratio: f64,
}

/// Evaluate F_hat at `samples` evenly spaced points on the segment between
/// two weight vectors and report the segment-to-endpoint ratio.
pub fn glqc_probe<M: Model + ?Sized>(
    model: &M,
    data: &Dataset,
    kind: LossKind,
    w1: &[f64],
    w2: &[f64],
    samples: usize,
) -> Result<GlqcProbe, Error> {
    if samples < 3 {
        return Err(Error::Config("glqc probe needs at least 3 segment samples".into()));
    }
    assert_eq!(w1.len(), w2.len());
    let mut max_on_segment = f64::NEG_INFINITY;
    let mut first = 0.0;
    let mut last = 0.0;
    let mut buf = vec![0.0; w1.len()];
    for k in 0..samples {
        let alpha = k as f64 / (samples - 1) as f64;
        for i in 0..buf.len() {
            buf[i] = (1.0 - alpha) * w1[i] + alpha * w2[i];
        }
        let loss = empirical_loss(model, &buf, data, kind)?;
        if k == 0 {
            first = loss;
        }
        if k == samples - 1 {
            last = loss;
        }
        max_on_segment = max_on_segment.max(loss);
    }
    let endpoint_max = first.max(last);
    let tau_ratio = if endpoint_max > 0.0 {
        max_on_segment / endpoint_max
    } else if max_on_segment <= 0.0 {
        1.0
    } else {
        f64::INFINITY
    };
    Ok(GlqcProbe { max_on_segment, endpoint_max, tau_ratio })
}

/// Width-condition verdicts.
#[derive(Clone, Copy, Debug)]
pub struct WidthCheck {
    /// Minimal m with m >= 4 beta^2 (6 rho_eff)^{6L+4}; saturates at u64::MAX.
    pub required_m: u64,
    pub satisfied: bool,
    /// Minimal m with m >= beta^2 n^{3L+3}, when n was supplied.
    pub required_m_early_stop: Option<u64>,
    pub satisfied_early_stop: Option<bool>,
}

fn ceil_to_count(v: f64) -> u64 {
    if !v.is_finite() || v >= u64::MAX as f64 {
        u64::MAX
    } else {
        v.ceil().max(0.0) as u64
    }
}

/// Check m against the convergence width condition (and, when `n` is given,
/// the polynomial variant used with the sqrt(n) early-stopping rule).
pub fn width_condition_check(
    hidden_layers: usize,
    width: usize,
    rho_star: f64,
    beta_hat: f64,
    n: Option<usize>,
) -> WidthCheck {
    assert!(rho_star >= 0.0 && beta_hat >= 0.0);
    let rho_eff = rho_star.max(1.0);
    let l = hidden_layers as i32;
    let required = 4.0 * beta_hat * beta_hat * (6.0 * rho_eff).powi(6 * l + 4);
    let required_m = ceil_to_count(required);
    let satisfied = width as f64 >= required;
    let (required_m_early_stop, satisfied_early_stop) = match n {
        Some(n) => {
            let req = beta_hat * beta_hat * (n as f64).powi(3 * l + 3);
            (Some(ceil_to_count(req)), Some(width as f64 >= req))
        }
        None => (None, None),
    };
    WidthCheck { required_m, satisfied, required_m_early_stop, satisfied_early_stop }
}
