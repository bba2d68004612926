//! Tangent-feature extraction at initialization, margin estimation, the
//! separability-based target-weight construction, and the stability-bound
//! evaluations over logged training metrics.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::net::{grad_model, Model};
use crate::numerics::{flat_axpy, flat_dot, flat_norm, flat_scale, Matrix};
use crate::objective::LossKind;
use crate::trainer::RunMetrics;
use crate::Error;

/// Materialize features only while n*p stays under this many f64 entries
/// (256 MB); larger jobs stream rows on the fly.
pub const DEFAULT_FEATURE_BUDGET: usize = 32_000_000;

/// Label-signed model gradients at initialization: row i is
/// `y_i * grad Phi(w0, x_i)`.
pub enum NtkFeatures<'a> {
    Dense(Matrix),
    Streaming { model: &'a dyn Model, w0: &'a [f64], data: &'a Dataset },
}

impl<'a> NtkFeatures<'a> {
    pub fn dense(rows: Matrix) -> Self {
        NtkFeatures::Dense(rows)
    }

    pub fn len(&self) -> usize {
        match self {
            NtkFeatures::Dense(m) => m.rows(),
            NtkFeatures::Streaming { data, .. } => data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            NtkFeatures::Dense(m) => m.cols(),
            NtkFeatures::Streaming { model, .. } => model.param_count(),
        }
    }

    /// Visit every feature row in order. Streaming mode recomputes each row;
    /// dense mode borrows it.
    pub fn for_each_row(&self, mut f: impl FnMut(usize, &[f64])) {
        match self {
            NtkFeatures::Dense(m) => {
                for i in 0..m.rows() {
                    f(i, m.row(i));
                }
            }
            NtkFeatures::Streaming { model, w0, data } => {
                for i in 0..data.len() {
                    let mut row = grad_model(*model, w0, data.input(i));
                    flat_scale(&mut row, data.labels()[i]);
                    f(i, &row);
                }
            }
        }
    }

    /// <phi_i, v> for every row.
    pub fn margins(&self, v: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.for_each_row(|_, row| out.push(flat_dot(row, v)));
        out
    }

    pub fn min_row_norm(&self) -> f64 {
        let mut min = f64::INFINITY;
        self.for_each_row(|_, row| min = min.min(flat_norm(row)));
        min
    }
}

/// Extract the per-sample label-signed gradients at `w0`.
pub fn ntk_features<'a>(
    model: &'a dyn Model,
    w0: &'a [f64],
    data: &'a Dataset,
    budget_entries: usize,
) -> Result<NtkFeatures<'a>, Error> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = model.param_count();
    if data.len().saturating_mul(p) > budget_entries {
        return Ok(NtkFeatures::Streaming { model, w0, data });
    }
    let mut rows = Matrix::zeros(data.len(), p);
    for i in 0..data.len() {
        let mut g = grad_model(model, w0, data.input(i));
        flat_scale(&mut g, data.labels()[i]);
        rows.row_mut(i).copy_from_slice(&g);
    }
    if !rows.is_finite() {
        return Err(Error::Dataset("ntk features contain non-finite values".into()));
    }
    Ok(NtkFeatures::Dense(rows))
}

#[derive(Clone, Debug)]
pub struct MarginEstimate {
    /// min_i <phi_i, w_hat>; a certified lower bound of the max margin for
    /// any unit direction, in particular the returned one.
    pub gamma_hat: f64,
    /// Unit direction; zero vector when no direction was found.
    pub direction: Vec<f64>,
    /// False: "not separated at initialization".
    pub separated: bool,
}

/// Normalized gradient descent on the logistic loss over the feature rows.
///
/// Each iteration takes a unit step `1/sqrt(t+1)` along the normalized
/// negative gradient; the returned min-margin of the normalized iterate is a
/// conservative lower bound of the true feature margin.
pub fn estimate_margin(feats: &NtkFeatures<'_>, iters: usize) -> MarginEstimate {
    assert!(iters >= 1);
    let p = feats.dim();
    let n = feats.len().max(1) as f64;
    let mut v = vec![0.0; p];
    for t in 0..iters {
        let mut g = vec![0.0; p];
        feats.for_each_row(|_, row| {
            let s = flat_dot(row, &v);
            let c = LossKind::Logistic.d1(s) / n;
            flat_axpy(&mut g, c, row);
        });
        let gn = flat_norm(&g);
        if gn == 0.0 {
            break;
        }
        let step = 1.0 / ((t + 1) as f64).sqrt();
        flat_axpy(&mut v, -step / gn, &g);
    }
    let vn = flat_norm(&v);
    if vn == 0.0 {
        return MarginEstimate { gamma_hat: 0.0, direction: v, separated: false };
    }
    flat_scale(&mut v, 1.0 / vn);
    let gamma_hat = feats.margins(&v).into_iter().fold(f64::INFINITY, f64::min);
    MarginEstimate { gamma_hat, direction: v, separated: gamma_hat > 0.0 }
}

/// B_hat = max_i |Phi(w0, x_i)|.
pub fn output_bound<M: Model + ?Sized>(model: &M, w0: &[f64], data: &Dataset) -> Result<f64, Error> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outs = model.batch_forward(w0, data.inputs());
    Ok(outs.into_iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
}

/// The separability-based target construction
/// `w* = w0 + (w / gamma) (2B + log(1/eps))`.
#[derive(Clone, Debug)]
pub struct Corollary1 {
    pub w_star: Vec<f64>,
    /// rho = (2 max(B, 1) + log(1/eps)) / gamma; the B >= 1 floor follows the
    /// construction's convention.
    pub rho: f64,
    /// Same formula with the raw (unfloored) B, reported for comparison.
    pub rho_raw_b: f64,
    /// Minimal width beta^2 ((2 max(B,1) + log(1/eps)) / gamma)^{6L+4},
    /// saturating at u64::MAX.
    pub required_m: u64,
    pub width_satisfied: bool,
}

pub fn corollary1_construct(
    w0: &[f64],
    direction: &[f64],
    gamma_hat: f64,
    b_hat: f64,
    epsilon: f64,
    beta_hat: f64,
    hidden_layers: usize,
    width: usize,
) -> Result<Corollary1, Error> {
    if !(gamma_hat > 0.0) {
        return Err(Error::Config("construction unavailable: data not separated (gamma <= 0)".into()));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Config("epsilon must be in (0, 1]".into()));
    }
    assert_eq!(w0.len(), direction.len());
    let dn = flat_norm(direction);
    if dn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let log_term = (1.0 / epsilon).ln();
    let rho = (2.0 * b_hat.max(1.0) + log_term) / gamma_hat;
    let rho_raw_b = (2.0 * b_hat + log_term) / gamma_hat;
    let mut w_star = w0.to_vec();
    flat_axpy(&mut w_star, rho / dn, direction);
    let req = beta_hat * beta_hat * rho.powi(6 * hidden_layers as i32 + 4);
    let required_m = if !req.is_finite() || req >= u64::MAX as f64 {
        u64::MAX
    } else {
        req.ceil().max(0.0) as u64
    };
    Ok(Corollary1 { w_star, rho, rho_raw_b, required_m, width_satisfied: width as f64 >= req })
}

/// Evaluated stability bounds plus the initialization-geometry quantities
/// that feed them. Serialized as a flat JSON object.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BoundReport {
    pub gamma_hat: Option<f64>,
    #[serde(rename = "B_hat")]
    pub b_hat: Option<f64>,
    #[serde(rename = "G0")]
    pub g0: f64,
    /// (2.2 / n) sum_{t<T} F_hat(w_t)
    pub bound_eq12: f64,
    /// 9 rho^2 (G0 + 1/4)^2 / n, with the rho passed by the caller
    /// (measured final rho(T) unless stated otherwise).
    pub bound_eq9: f64,
    /// 2.2 eta (G0 + 1/4)^2 / n * sum_{t<T} F_hat(w_t)
    pub bound_eq8: f64,
    /// Eq. 9 re-evaluated at the construction radius, when available.
    pub bound_eq9_corollary: Option<f64>,
    pub corollary_rho: Option<f64>,
    pub corollary_required_m: Option<u64>,
}

/// Evaluate the three generalization-gap bounds from logged quantities.
///
/// Requires every-step train losses (contiguous iterates starting at 0); the
/// arithmetic is pure, so recomputation from a metrics CSV reproduces the
/// report bit-exactly.
pub fn stability_bounds(
    metrics: &RunMetrics,
    g0: f64,
    rho: f64,
    eta: f64,
    n: usize,
) -> Result<BoundReport, Error> {
    if metrics.records.is_empty() {
        return Err(Error::Csv("metrics contain no records".into()));
    }
    for (i, r) in metrics.records.iter().enumerate() {
        if r.iter != i {
            return Err(Error::Csv(format!(
                "stability bounds need every-step train losses; record {i} has iter {}",
                r.iter
            )));
        }
        if !r.train_loss.is_finite() {
            return Err(Error::Csv(format!("non-finite train loss at iter {i}")));
        }
    }
    if n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let sum = metrics.cumulative_train_loss();
    let nf = n as f64;
    let lip = (g0 + 0.25) * (g0 + 0.25);
    Ok(BoundReport {
        gamma_hat: None,
        b_hat: None,
        g0,
        bound_eq12: 2.2 * sum / nf,
        bound_eq9: 9.0 * rho * rho * lip / nf,
        bound_eq8: 2.2 * eta * lip * sum / nf,
        bound_eq9_corollary: None,
        corollary_rho: None,
        corollary_required_m: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, synth_ntk_separable};
    use crate::net::{forward, Activation, LinearModel, NetConfig, NetworkParams, QuadNet};
    use crate::numerics::RngStream;
    use crate::objective::empirical_loss;
    use crate::trainer::IterRecord;

    fn toy_records(losses: &[f64], eta: f64) -> RunMetrics {
        let mut records = Vec::new();
        let mut cum = 0.0;
        for (t, &l) in losses.iter().enumerate() {
            records.push(IterRecord {
                iter: t,
                train_loss: l,
                test_loss: f64::NAN,
                gen_gap: f64::NAN,
                dist_from_init: 0.0,
                grad_norm: 0.0,
                cum_train_loss: cum,
                eta,
                descent_violation: false,
            });
            cum += l;
        }
        RunMetrics { records }
    }

    #[test]
    fn label_flip_negates_feature_row() {
        let cfg = NetConfig::deep(1, 4, 3, Activation::Tanh);
        let w0 = NetworkParams::init_gaussian(&cfg, 3);
        let x = vec![0.4, -0.2, 0.5];
        let pos = Dataset::new(Matrix::from_vec(1, 3, x.clone()), vec![1.0], Provenance::Synthetic).unwrap();
        let neg = Dataset::new(Matrix::from_vec(1, 3, x), vec![-1.0], Provenance::Synthetic).unwrap();
        let fp = ntk_features(&cfg, w0.flat(), &pos, usize::MAX).unwrap();
        let fn_ = ntk_features(&cfg, w0.flat(), &neg, usize::MAX).unwrap();
        let (NtkFeatures::Dense(a), NtkFeatures::Dense(b)) = (&fp, &fn_) else { panic!() };
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn duplicate_samples_give_identical_rows() {
        let cfg = NetConfig::deep(1, 4, 3, Activation::Softplus);
        let w0 = NetworkParams::init_gaussian(&cfg, 5);
        let x = vec![0.4, -0.2, 0.5];
        let two = Dataset::new(
            Matrix::from_vec(2, 3, [x.clone(), x].concat()),
            vec![1.0, 1.0],
            Provenance::Synthetic,
        )
        .unwrap();
        let feats = ntk_features(&cfg, w0.flat(), &two, usize::MAX).unwrap();
        let NtkFeatures::Dense(m) = &feats else { panic!() };
        assert_eq!(m.row(0), m.row(1));
    }

    #[test]
    fn quadratic_features_match_closed_form() {
        let net = QuadNet::new(2, 3, vec![1.0, -1.0]).unwrap();
        let mut rng = RngStream::new(31, 0);
        let w0: Vec<f64> = (0..6).map(|_| rng.next_gaussian()).collect();
        let x = vec![0.3, -0.6, 0.2];
        let y = -1.0;
        let ds = Dataset::new(Matrix::from_vec(1, 3, x.clone()), vec![y], Provenance::Xor).unwrap();
        let feats = ntk_features(&net, &w0, &ds, usize::MAX).unwrap();
        let NtkFeatures::Dense(m) = &feats else { panic!() };
        for i in 0..2 {
            let wi = &w0[i * 3..(i + 1) * 3];
            let s = flat_dot(wi, &x);
            for k in 0..3 {
                let want = y * net.signs[i] / 2.0 * s * x[k];
                assert!((m.row(0)[i * 3 + k] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn streaming_and_dense_modes_agree() {
        let cfg = NetConfig::deep(1, 4, 3, Activation::Tanh);
        let w0 = NetworkParams::init_gaussian(&cfg, 12);
        let ds = synth_ntk_separable(4, 3, 6, 0.4).unwrap();
        let dense = ntk_features(&cfg, w0.flat(), &ds, usize::MAX).unwrap();
        let streaming = ntk_features(&cfg, w0.flat(), &ds, 1).unwrap();
        assert!(matches!(streaming, NtkFeatures::Streaming { .. }));
        let mut rng = RngStream::new(9, 9);
        let v: Vec<f64> = (0..dense.dim()).map(|_| rng.next_gaussian()).collect();
        let md = dense.margins(&v);
        let ms = streaming.margins(&v);
        for (a, b) in md.iter().zip(&ms) {
            assert!((a - b).abs() < 1e-14);
        }
        let ed = estimate_margin(&dense, 50);
        let es = estimate_margin(&streaming, 50);
        assert!((ed.gamma_hat - es.gamma_hat).abs() < 1e-12);
    }

    #[test]
    fn margin_of_coincident_unit_features_approaches_one() {
        // x and -x with opposite labels produce identical rows; the max
        // margin of a single unit row is exactly 1.
        let u = vec![0.6, 0.8];
        let rows = Matrix::from_vec(2, 2, [u.clone(), u].concat());
        let est = estimate_margin(&NtkFeatures::dense(rows), 10_000);
        assert!(est.separated);
        assert!(est.gamma_hat >= 0.99, "gamma {}", est.gamma_hat);

        let single = Matrix::from_vec(1, 2, vec![0.6, 0.8]);
        let est = estimate_margin(&NtkFeatures::dense(single), 10_000);
        assert!(est.gamma_hat >= 0.99);
    }

    #[test]
    fn inseparable_features_report_not_separated() {
        // x and -x with the same sign: rows u and -u.
        let rows = Matrix::from_vec(2, 2, vec![0.6, 0.8, -0.6, -0.8]);
        let est = estimate_margin(&NtkFeatures::dense(rows), 500);
        assert!(!est.separated);
        assert!(est.gamma_hat <= 0.0);
    }

    #[test]
    fn margin_never_exceeds_min_row_norm() {
        let mut rng = RngStream::new(17, 3);
        for trial in 0..5 {
            let n = 6;
            let data: Vec<f64> = (0..n * 4).map(|_| rng.next_gaussian()).collect();
            let feats = NtkFeatures::dense(Matrix::from_vec(n, 4, data));
            let est = estimate_margin(&feats, 300);
            assert!(
                est.gamma_hat <= feats.min_row_norm() + 1e-12,
                "trial {trial}: {} vs {}",
                est.gamma_hat,
                feats.min_row_norm()
            );
        }
    }

    #[test]
    fn output_bound_basics() {
        let cfg = NetConfig::deep(1, 4, 3, Activation::ShiftedSoftplus);
        let zero = NetworkParams::zeros(&cfg);
        let ds = synth_ntk_separable(5, 3, 8, 0.4).unwrap();
        assert_eq!(output_bound(&cfg, zero.flat(), &ds).unwrap(), 0.0);

        let w0 = NetworkParams::init_gaussian(&cfg, 3);
        let b = output_bound(&cfg, w0.flat(), &ds).unwrap();
        let doubled = Dataset::new(
            Matrix::from_vec(
                16,
                3,
                [ds.inputs().data().to_vec(), ds.inputs().data().to_vec()].concat(),
            ),
            [ds.labels().to_vec(), ds.labels().to_vec()].concat(),
            Provenance::Synthetic,
        )
        .unwrap();
        assert_eq!(output_bound(&cfg, w0.flat(), &doubled).unwrap(), b);
    }

    #[test]
    fn output_bound_shows_no_growth_trend_across_widths() {
        use crate::net::FirstLayerScaling;
        let ds = synth_ntk_separable(8, 10, 100, 0.4).unwrap();
        for scaling in [FirstLayerScaling::Scaled, FirstLayerScaling::Unscaled] {
            let mut bs = Vec::new();
            for m in [100usize, 400, 1600] {
                // the max over samples is noisy per draw; average it over seeds
                let mut acc = 0.0;
                for seed in 0..5u64 {
                    let mut cfg = NetConfig::deep(2, m, 10, Activation::Softplus);
                    cfg.first_layer_scaling = scaling;
                    let w0 = NetworkParams::init_gaussian(&cfg, 40 + seed);
                    acc += output_bound(&cfg, w0.flat(), &ds).unwrap();
                }
                bs.push(acc / 5.0);
            }
            // widening must not inflate the init outputs beyond factor 2
            let max = bs.iter().cloned().fold(f64::MIN, f64::max);
            assert!(max <= 2.0 * bs[0], "B grows across widths: {bs:?}");
            assert!(bs.iter().all(|b| *b < 10.0), "B not O(1): {bs:?}");
        }
    }

    #[test]
    fn corollary_construction_substitutions() {
        let w0 = vec![0.0; 3];
        let dir = vec![1.0, 0.0, 0.0];
        let c = corollary1_construct(&w0, &dir, 0.5, 1.0, 0.01, 1.0, 1, 10).unwrap();
        let want = (2.0 + 100f64.ln()) / 0.5;
        assert!((c.rho - want).abs() < 1e-12, "{} vs {want}", c.rho);
        assert!((c.rho - 13.210340371976184).abs() < 1e-12);
        assert_eq!(c.w_star, vec![c.rho, 0.0, 0.0]);

        let c1 = corollary1_construct(&w0, &dir, 0.5, 1.5, 1.0, 1.0, 1, 10).unwrap();
        assert!((c1.rho - 2.0 * 1.5 / 0.5).abs() < 1e-12);

        assert!(corollary1_construct(&w0, &dir, 0.0, 1.0, 0.5, 1.0, 1, 10).is_err());
    }

    #[test]
    fn corollary_rho_is_monotone() {
        let rho = |g: f64, b: f64, e: f64| (2.0 * b.max(1.0) + (1.0 / e).ln()) / g;
        assert!(rho(0.6, 1.0, 0.01) < rho(0.3, 1.0, 0.01));
        assert!(rho(0.5, 1.0, 0.01) < rho(0.5, 2.0, 0.01));
        assert!(rho(0.5, 1.0, 0.1) < rho(0.5, 1.0, 0.01));
    }

    #[test]
    fn constructed_target_reaches_epsilon_loss_when_width_verdict_passes() {
        // Curvature-free model: beta_hat = 0, so the width verdict passes and
        // the first-order construction argument is exact.
        let d = 6;
        let model = LinearModel { input_dim: d };
        let ds = synth_ntk_separable(77, d, 40, 0.5).unwrap();
        let mut rng = RngStream::new(50, 1);
        let w0: Vec<f64> = (0..d).map(|_| 0.05 * rng.next_gaussian()).collect();

        let feats = ntk_features(&model, &w0, &ds, usize::MAX).unwrap();
        let margin = estimate_margin(&feats, 3000);
        assert!(margin.separated);
        let b = output_bound(&model, &w0, &ds).unwrap();
        let eps = 0.05;
        let c = corollary1_construct(&w0, &margin.direction, margin.gamma_hat, b, eps, 0.0, 0, 1)
            .unwrap();
        assert!(c.width_satisfied);
        let loss = empirical_loss(&model, &c.w_star, &ds, LossKind::Logistic).unwrap();
        assert!(loss <= eps, "constructed loss {loss} vs eps {eps}");
        // sanity: every margin at w_star clears log(1/eps)
        for i in 0..ds.len() {
            let t = ds.labels()[i] * forward(&model, &c.w_star, ds.input(i));
            assert!(t >= (1.0 / eps).ln() - 1e-9);
        }
    }

    #[test]
    fn stability_bound_substitutions() {
        // sum = 50 over T=100 rows, n=1000, G0=1, eta=0.1
        let losses = vec![0.5; 100];
        let metrics = toy_records(&losses, 0.1);
        let report = stability_bounds(&metrics, 1.0, 2.0, 0.1, 1000).unwrap();
        // the accumulator covers t < T: 99 recorded steps of 0.5 = 49.5;
        // extend by one row so the sum is exactly 50
        let mut lengthened = losses;
        lengthened.push(0.5);
        let metrics = toy_records(&lengthened, 0.1);
        let report2 = stability_bounds(&metrics, 1.0, 2.0, 0.1, 1000).unwrap();
        assert!((report2.bound_eq12 - 0.11).abs() < 1e-15);
        assert!((report2.bound_eq9 - 0.05625).abs() < 1e-15);
        assert!((report2.bound_eq8 - 0.0171875).abs() < 1e-15);
        assert!(report.bound_eq12 < report2.bound_eq12);
    }

    #[test]
    fn eq8_below_eq12_inside_the_small_step_region() {
        let metrics = toy_records(&[0.7, 0.5, 0.3, 0.2], 0.1);
        let mut rng = RngStream::new(23, 0);
        for _ in 0..50 {
            let g0 = 2.0 * rng.next_f64();
            let lip = (g0 + 0.25) * (g0 + 0.25);
            let eta = rng.next_f64() / lip;
            let r = stability_bounds(&metrics, g0, 1.0, eta, 100).unwrap();
            assert!(r.bound_eq8 <= r.bound_eq12 + 1e-15);
        }
    }

    #[test]
    fn bounds_reject_strided_metrics() {
        let mut metrics = toy_records(&[0.7, 0.5, 0.3], 0.1);
        metrics.records[2].iter = 5;
        assert!(stability_bounds(&metrics, 1.0, 1.0, 0.1, 10).is_err());
    }
}
