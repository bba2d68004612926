//! Classification losses, the empirical objective and its exact gradient,
//! measured gradient/Hessian constants, and the descent-lemma step-size rule.
//!
//! The objective is `F_hat(w) = (1/n) sum_i f(y_i Phi(w, x_i))`. Its gradient
//! and Hessian obey the self-bounded inequalities
//! `||grad F_hat|| <= C1 F_hat` and `||hess F_hat|| <= (C2 + C1^2) F_hat`
//! with `C1 = G0 + beta rho^{3L+1}/sqrt(m)` and `C2 = beta rho^{3L}/sqrt(m)`,
//! where beta is estimated from Hessian probes at run time.

use crate::data::Dataset;
use crate::net::{measured_lipschitz, model_hessian_norm, Model};
use crate::numerics::{flat_dist, flat_norm, flat_scale, Matrix, RngStream, SpectralEstimate};
use crate::Error;

/// Loss applied to the margin t = y * Phi(w, x).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// f(t) = log(1 + e^{-t})
    Logistic,
    /// f(t) = -t (XOR experiment only)
    Linear,
}

impl LossKind {
    pub fn value(self, t: f64) -> f64 {
        match self {
            // Branch at 0 keeps both tails stable out to |t| ~ 1e4 and beyond.
            LossKind::Logistic => {
                if t > 0.0 {
                    (-t).exp().ln_1p()
                } else {
                    -t + t.exp().ln_1p()
                }
            }
            LossKind::Linear => -t,
        }
    }

    pub fn d1(self, t: f64) -> f64 {
        match self {
            LossKind::Logistic => {
                if t > 0.0 {
                    let e = (-t).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + t.exp())
                }
            }
            LossKind::Linear => -1.0,
        }
    }

    pub fn d2(self, t: f64) -> f64 {
        match self {
            LossKind::Logistic => {
                let e = (-t.abs()).exp();
                let denom = 1.0 + e;
                e / (denom * denom)
            }
            LossKind::Linear => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Logistic => "logistic",
            LossKind::Linear => "linear",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, Error> {
        match name {
            "logistic" => Ok(LossKind::Logistic),
            "linear" => Ok(LossKind::Linear),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

/// Mean sample loss F_hat(w) over the dataset.
pub fn empirical_loss<M: Model + ?Sized>(
    model: &M,
    w: &[f64],
    data: &Dataset,
    kind: LossKind,
) -> Result<f64, Error> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outs = model.batch_forward(w, data.inputs());
    let n = data.len() as f64;
    let mut acc = 0.0;
    for (phi, y) in outs.iter().zip(data.labels()) {
        acc += kind.value(y * phi);
    }
    Ok(acc / n)
}

/// F_hat(w) and its exact gradient in one pass; the reduction order over
/// samples is fixed, so repeated runs are bit-identical.
pub fn empirical_loss_and_grad<M: Model + ?Sized>(
    model: &M,
    w: &[f64],
    data: &Dataset,
    kind: LossKind,
) -> Result<(f64, Vec<f64>), Error> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.len() as f64;
    let labels = data.labels();
    let mut loss_acc = 0.0;
    let mut coeff = |j: usize, phi: f64| {
        let t = labels[j] * phi;
        loss_acc += kind.value(t);
        kind.d1(t) * labels[j] / n
    };
    let (_outs, grad) = model.batch_forward_backward(w, data.inputs(), &mut coeff);
    Ok((loss_acc / n, grad))
}

/// grad F_hat(w) = (1/n) sum_i f'(y_i Phi(w, x_i)) y_i grad Phi(w, x_i).
pub fn empirical_grad<M: Model + ?Sized>(
    model: &M,
    w: &[f64],
    data: &Dataset,
    kind: LossKind,
) -> Result<Vec<f64>, Error> {
    empirical_loss_and_grad(model, w, data, kind).map(|(_, g)| g)
}

/// Central-difference Hessian-vector product of the empirical objective.
pub fn objective_hvp<M: Model + ?Sized>(
    model: &M,
    w: &[f64],
    data: &Dataset,
    kind: LossKind,
    v: &[f64],
) -> Result<Vec<f64>, Error> {
    let vn = flat_norm(v);
    if vn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let eps = 1e-4 * (1.0 + flat_norm(w));
    let s = eps / vn;
    let mut wp = w.to_vec();
    let mut wm = w.to_vec();
    for i in 0..w.len() {
        wp[i] += s * v[i];
        wm[i] -= s * v[i];
    }
    let gp = empirical_grad(model, &wp, data, kind)?;
    let gm = empirical_grad(model, &wm, data, kind)?;
    let scale = vn / (2.0 * eps);
    Ok(gp.iter().zip(&gm).map(|(a, b)| scale * (a - b)).collect())
}

/// Spectral norm of the objective Hessian by power iteration over
/// [`objective_hvp`].
pub fn objective_hessian_norm<M: Model + ?Sized>(
    model: &M,
    w: &[f64],
    data: &Dataset,
    kind: LossKind,
    iters: usize,
    tol: f64,
) -> Result<SpectralEstimate, Error> {
    assert!(iters >= 1 && tol > 0.0);
    let mut rng = RngStream::new(0x5eed_cafe, 0);
    let mut v: Vec<f64> = (0..w.len()).map(|_| rng.next_gaussian()).collect();
    let nv = flat_norm(&v);
    flat_scale(&mut v, 1.0 / nv);
    let mut estimate = 0.0;
    for it in 1..=iters {
        let hv = objective_hvp(model, w, data, kind, &v)?;
        let norm = flat_norm(&hv);
        if norm == 0.0 {
            return Ok(SpectralEstimate { value: 0.0, converged: true, iterations: it });
        }
        let rel = (norm - estimate).abs() / norm.max(f64::MIN_POSITIVE);
        estimate = norm;
        if rel < tol {
            return Ok(SpectralEstimate { value: estimate, converged: true, iterations: it });
        }
        v = hv;
        flat_scale(&mut v, 1.0 / norm);
    }
    Ok(SpectralEstimate { value: estimate, converged: false, iterations: iters })
}

/// Measured loss-level constants at a given radius from initialization.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveConstants {
    /// C1 = G0 + beta_hat * rho_eff^{3L+1} / sqrt(m)
    pub c1: f64,
    /// C2 = beta_hat * rho_eff^{3L} / sqrt(m)
    pub c2: f64,
    pub g0: f64,
    /// Empirical depth constant from Hessian probes.
    pub beta_hat: f64,
    /// Raw radius ||w - w0|| (the formulas use max(rho, 1)).
    pub rho: f64,
    pub hidden_layers: usize,
    pub width: usize,
}

impl ObjectiveConstants {
    /// Assemble the constants from the measured inputs. The radius is floored
    /// at 1 in the powers, matching the convention that the target distance
    /// is at least 1.
    pub fn assemble(g0: f64, beta_hat: f64, rho: f64, hidden_layers: usize, width: usize) -> Self {
        let rho_eff = rho.max(1.0);
        let sqrt_m = (width as f64).sqrt();
        let l3 = 3 * hidden_layers as i32;
        let c2 = beta_hat * rho_eff.powi(l3) / sqrt_m;
        let c1 = g0 + beta_hat * rho_eff.powi(l3 + 1) / sqrt_m;
        ObjectiveConstants { c1, c2, g0, beta_hat, rho, hidden_layers, width }
    }

    /// Constants re-evaluated at a different radius with the same measured
    /// G0 and beta_hat.
    pub fn at_radius(&self, rho: f64) -> Self {
        ObjectiveConstants::assemble(self.g0, self.beta_hat, rho, self.hidden_layers, self.width)
    }
}

/// Options for the Hessian probes behind [`estimate_constants`].
#[derive(Clone, Copy, Debug)]
pub struct ProbeOpts {
    pub hess_iters: usize,
    pub hess_tol: f64,
    /// Cap on how many probe rows get a Hessian power iteration.
    pub max_hess_probes: usize,
}

impl Default for ProbeOpts {
    fn default() -> Self {
        ProbeOpts { hess_iters: 120, hess_tol: 1e-7, max_hess_probes: 3 }
    }
}

/// Measure G0 at `w0`, estimate beta_hat from Hessian probes at `w`, and
/// assemble C1/C2 at the radius `||w - w0||`.
pub fn estimate_constants<M: Model + ?Sized>(
    model: &M,
    w0: &[f64],
    w: &[f64],
    probes: &Matrix,
    opts: ProbeOpts,
) -> ObjectiveConstants {
    assert!(probes.rows() > 0, "probe set must be nonempty");
    let g0 = measured_lipschitz(model, w0, probes);
    let rho = flat_dist(w, w0);
    let rho_eff = rho.max(1.0);
    let l3 = 3 * model.hidden_layers() as i32;
    let sqrt_m = (model.width() as f64).sqrt();
    let mut beta_hat: f64 = 0.0;
    for j in 0..probes.rows().min(opts.max_hess_probes) {
        let est = model_hessian_norm(model, w, probes.row(j), opts.hess_iters, opts.hess_tol);
        beta_hat = beta_hat.max(est.value * sqrt_m / rho_eff.powi(l3));
    }
    ObjectiveConstants::assemble(g0, beta_hat, rho, model.hidden_layers(), model.width())
}

/// Descent-lemma step size eta = safety / (C1^2 + C2).
pub fn descent_step_size(c: &ObjectiveConstants, safety: f64) -> f64 {
    assert!(safety > 0.0 && safety <= 1.0);
    safety / (c.c1 * c.c1 + c.c2)
}

/// Width-free fallback eta = safety / (G0^2 + 1/4), valid in the regime where
/// the Hessian term is negligible.
pub fn fallback_step_size(g0: f64, safety: f64) -> f64 {
    assert!(safety > 0.0 && safety <= 1.0);
    safety / (g0 * g0 + 0.25)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use crate::net::{grad_model, Activation, NetConfig, NetworkParams, QuadNet};
    use crate::numerics::flat_axpy;

    fn small_dataset(seed: u64, n: usize, d: usize) -> Dataset {
        let mut rng = RngStream::new(seed, 50);
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let mut x: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
            let norm = flat_norm(&x);
            flat_scale(&mut x, 0.9 / norm);
            data.extend_from_slice(&x);
            labels.push(if i % 2 == 0 { 1.0 } else { -1.0 });
        }
        Dataset::new(Matrix::from_vec(n, d, data), labels, Provenance::Synthetic).unwrap()
    }

    #[test]
    fn logistic_values_at_zero() {
        let f = LossKind::Logistic;
        assert!((f.value(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((f.d1(0.0) + 0.5).abs() < 1e-15);
        assert!((f.d2(0.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn logistic_is_self_bounded_on_dense_samples() {
        let f = LossKind::Logistic;
        let mut rng = RngStream::new(17, 0);
        for _ in 0..100_000 {
            let t = -50.0 + 100.0 * rng.next_f64();
            let (v, d1, d2) = (f.value(t), f.d1(t), f.d2(t));
            assert!(d1.abs() <= v + 1e-15, "t={t}");
            assert!((0.0..=0.25 + 1e-15).contains(&d2), "t={t}");
        }
        // stability far out on both tails
        assert!(LossKind::Logistic.value(1e4).is_finite());
        assert_eq!(LossKind::Logistic.value(-1e4), 1e4);
        assert_eq!(LossKind::Logistic.d1(-1e4), -1.0);
    }

    #[test]
    fn zero_net_logistic_loss_is_log_two() {
        let cfg = NetConfig::deep(2, 4, 3, Activation::ShiftedSoftplus);
        let w = NetworkParams::zeros(&cfg);
        let data = small_dataset(1, 6, 3);
        let loss = empirical_loss(&cfg, w.flat(), &data, LossKind::Logistic).unwrap();
        assert_eq!(loss, std::f64::consts::LN_2);
    }

    #[test]
    fn duplicated_sample_keeps_mean_loss() {
        let cfg = NetConfig::deep(1, 3, 4, Activation::Tanh);
        let w = NetworkParams::init_gaussian(&cfg, 3);
        let one = small_dataset(2, 1, 4);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(one.input(0));
            labels.push(one.labels()[0]);
        }
        let five =
            Dataset::new(Matrix::from_vec(5, 4, data), labels, Provenance::Synthetic).unwrap();
        let a = empirical_loss(&cfg, w.flat(), &one, LossKind::Logistic).unwrap();
        let b = empirical_loss(&cfg, w.flat(), &five, LossKind::Logistic).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn hand_margin_mean_matches() {
        // margins (1, -1, 0) -> (f(1) + f(-1) + f(0)) / 3
        let f = LossKind::Logistic;
        let want = (f.value(1.0) + f.value(-1.0) + f.value(0.0)) / 3.0;
        assert!((want - (0.31326168751822286 + 1.3132616875182228 + std::f64::consts::LN_2) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let cfg = NetConfig::deep(1, 2, 3, Activation::Tanh);
        let w = NetworkParams::zeros(&cfg);
        let empty =
            Dataset::new(Matrix::from_vec(0, 3, vec![]), vec![], Provenance::Synthetic).unwrap();
        assert!(matches!(
            empirical_loss(&cfg, w.flat(), &empty, LossKind::Logistic),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let cfg = NetConfig::deep(2, 5, 4, Activation::Softplus);
        let w = NetworkParams::init_gaussian(&cfg, 11);
        let data = small_dataset(4, 7, 4);
        let (_l, g) = empirical_loss_and_grad(&cfg, w.flat(), &data, LossKind::Logistic).unwrap();
        let mut fd = vec![0.0; g.len()];
        let mut wp = w.flat().to_vec();
        let h = 1e-5;
        for i in 0..wp.len() {
            let orig = wp[i];
            wp[i] = orig + h;
            let fp = empirical_loss(&cfg, &wp, &data, LossKind::Logistic).unwrap();
            wp[i] = orig - h;
            let fm = empirical_loss(&cfg, &wp, &data, LossKind::Logistic).unwrap();
            wp[i] = orig;
            fd[i] = (fp - fm) / (2.0 * h);
        }
        let rel = flat_dist(&g, &fd) / flat_norm(&fd).max(1e-12);
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn linear_loss_gradient_is_mean_signed_model_gradient() {
        let net = QuadNet::new(4, 3, vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let mut rng = RngStream::new(9, 1);
        let w: Vec<f64> = (0..12).map(|_| rng.next_gaussian()).collect();
        let data = small_dataset(6, 5, 3);
        let g = empirical_grad(&net, &w, &data, LossKind::Linear).unwrap();
        let mut want = vec![0.0; 12];
        for i in 0..data.len() {
            let gi = grad_model(&net, &w, data.input(i));
            flat_axpy(&mut want, -data.labels()[i] / data.len() as f64, &gi);
        }
        let rel = flat_dist(&g, &want) / flat_norm(&want).max(1e-15);
        assert!(rel < 1e-12, "rel {rel}");
    }

    #[test]
    fn gradient_self_bound_holds_with_measured_constants() {
        let cfg = NetConfig::deep(2, 8, 5, Activation::Softplus);
        let w0 = NetworkParams::init_gaussian(&cfg, 21);
        let data = small_dataset(8, 10, 5);
        // move a short distance off initialization
        let mut w = w0.flat().to_vec();
        let mut rng = RngStream::new(33, 8);
        let step: Vec<f64> = (0..w.len()).map(|_| 0.01 * rng.next_gaussian()).collect();
        flat_axpy(&mut w, 1.0, &step);

        let c = estimate_constants(&cfg, w0.flat(), &w, data.inputs(), ProbeOpts::default());
        let (loss, g) = empirical_loss_and_grad(&cfg, &w, &data, LossKind::Logistic).unwrap();
        assert!(flat_norm(&g) <= c.c1 * loss, "{} vs {}", flat_norm(&g), c.c1 * loss);
    }

    #[test]
    fn constants_at_initialization_floor_the_radius() {
        let cfg = NetConfig::deep(2, 6, 4, Activation::Tanh);
        let w0 = NetworkParams::init_gaussian(&cfg, 5);
        let data = small_dataset(3, 4, 4);
        let c = estimate_constants(&cfg, w0.flat(), w0.flat(), data.inputs(), ProbeOpts::default());
        assert_eq!(c.rho, 0.0);
        assert!(c.c2 >= 0.0);
        assert!(c.c1 >= c.g0);
    }

    #[test]
    fn doubling_the_radius_scales_c2_by_eight_to_the_l() {
        for l in [1usize, 2] {
            let a = ObjectiveConstants::assemble(1.0, 2.0, 2.0, l, 64);
            let b = ObjectiveConstants::assemble(1.0, 2.0, 4.0, l, 64);
            let want = 2f64.powi(3 * l as i32);
            assert!((b.c2 / a.c2 - want).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_net_beta_hat_matches_closed_form() {
        // ||hess Phi|| = ||x||^2 / m exactly, so beta_hat = ||x||^2 sqrt(m)/m
        // at the rho_eff = 1 floor.
        let net = QuadNet::new(4, 3, vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let mut rng = RngStream::new(14, 2);
        let w0: Vec<f64> = (0..12).map(|_| 0.1 * rng.next_gaussian()).collect();
        let x = Matrix::from_vec(1, 3, vec![0.6, -0.3, 0.2]);
        let c = estimate_constants(&net, &w0, &w0, &x, ProbeOpts::default());
        let xn2 = 0.6f64 * 0.6 + 0.3 * 0.3 + 0.2 * 0.2;
        let want = xn2 * 4f64.sqrt() / 4.0;
        assert!((c.beta_hat - want).abs() / want < 1e-6, "{} vs {}", c.beta_hat, want);
    }

    #[test]
    fn step_size_substitutions() {
        let c = ObjectiveConstants { c1: 2.0, c2: 1.0, g0: 1.0, beta_hat: 0.0, rho: 1.0, hidden_layers: 1, width: 4 };
        assert!((descent_step_size(&c, 1.0) - 0.2).abs() < 1e-15);
        assert!((fallback_step_size(1.5, 0.9) - 0.36).abs() < 1e-15);
    }

    #[test]
    fn objective_hessian_norm_is_bounded_by_lemma_constants() {
        let cfg = NetConfig::deep(2, 8, 5, Activation::Softplus);
        let w0 = NetworkParams::init_gaussian(&cfg, 77);
        let data = small_dataset(13, 12, 5);
        let c = estimate_constants(&cfg, w0.flat(), w0.flat(), data.inputs(), ProbeOpts::default());
        let loss = empirical_loss(&cfg, w0.flat(), &data, LossKind::Logistic).unwrap();
        let est = objective_hessian_norm(&cfg, w0.flat(), &data, LossKind::Logistic, 150, 1e-8).unwrap();
        let bound = 1.1 * (c.c2 + c.c1 * c.c1) * loss;
        assert!(est.value <= bound, "{} vs {}", est.value, bound);
    }
}
