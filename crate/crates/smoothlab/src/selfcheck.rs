//! Built-in property suite behind the `check` subcommand: oracle equivalence,
//! gradient checks, activation contracts, descent assertions, and the
//! round-trip contracts, each as a named pass/fail item.

use crate::data::{synth_ntk_separable, Dataset, Provenance};
use crate::net::{
    forward, grad_model, hessian_vector_product, model_hessian_norm, Activation, NetConfig,
    NetworkParams, QuadNet, QuadNetParams,
};
use crate::numerics::{flat_dist, flat_dot, flat_norm, Matrix, RngStream};
use crate::objective::{empirical_grad, LossKind};
use crate::trainer::{descent_check, train_gd, StepSizeRule, StopRule, TrainConfig};
use crate::xor::{deviation_profile, enumerate_xor, oracle_closed_form, sgd_step, OracleState};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Count of bound violations |d1| <= 1, |d2| <= 1 over a dense grid of
/// [-20, 20]. Kept as a standalone probe so a corrupted activation is
/// detectable by the same code path the real suite uses.
pub fn activation_bound_violations(d1: &dyn Fn(f64) -> f64, d2: &dyn Fn(f64) -> f64) -> usize {
    let mut bad = 0;
    for i in 0..=40_000 {
        let t = -20.0 + i as f64 * 1e-3;
        if d1(t).abs() > 1.0 + 1e-15 || d2(t).abs() > 1.0 + 1e-15 {
            bad += 1;
        }
    }
    bad
}

fn check(name: &'static str, body: impl FnOnce() -> Result<String, String>) -> CheckOutcome {
    match body() {
        Ok(detail) => CheckOutcome { name, passed: true, detail },
        Err(detail) => CheckOutcome { name, passed: false, detail },
    }
}

fn unit_vec(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, 3);
    let mut x: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
    let n = flat_norm(&x);
    for v in &mut x {
        *v /= n;
    }
    x
}

fn gradcheck_case(act: Activation, seed: u64) -> Result<(), String> {
    let cfg = NetConfig::deep(2, 6, 4, act);
    let w = NetworkParams::init_gaussian(&cfg, seed);
    let x = unit_vec(4, seed);
    let g = grad_model(&cfg, w.flat(), &x);
    let mut fd = vec![0.0; g.len()];
    let mut wp = w.flat().to_vec();
    for i in 0..wp.len() {
        let orig = wp[i];
        wp[i] = orig + 1e-5;
        let fp = forward(&cfg, &wp, &x);
        wp[i] = orig - 1e-5;
        let fm = forward(&cfg, &wp, &x);
        wp[i] = orig;
        fd[i] = (fp - fm) / 2e-5;
    }
    let rel = flat_dist(&g, &fd) / flat_norm(&fd).max(1e-12);
    if rel < 1e-6 {
        Ok(())
    } else {
        Err(format!("{} seed {seed}: relative error {rel}", act.name()))
    }
}

pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        check("activation-bounds", || {
            for act in [Activation::Softplus, Activation::ShiftedSoftplus, Activation::Tanh] {
                let bad =
                    activation_bound_violations(&|t| act.d1(t), &|t| act.d2(t));
                if bad > 0 {
                    return Err(format!("{}: {bad} grid points violate the 1-bounds", act.name()));
                }
            }
            if Activation::ShiftedSoftplus.value(0.0) != 0.0 {
                return Err("shifted softplus does not vanish at 0".into());
            }
            Ok("softplus/tanh derivative bounds hold on 40001 grid points".into())
        }),
        check("logistic-self-bound", || {
            let f = LossKind::Logistic;
            let mut rng = RngStream::new(4, 0);
            for _ in 0..100_000 {
                let t = -50.0 + 100.0 * rng.next_f64();
                if f.d1(t).abs() > f.value(t) + 1e-15 || !(0.0..=0.25 + 1e-15).contains(&f.d2(t)) {
                    return Err(format!("self-bound violated at t = {t}"));
                }
            }
            Ok("|f'| <= f and f'' <= 1/4 on 1e5 samples".into())
        }),
        check("backprop-gradcheck", || {
            for act in [Activation::Softplus, Activation::ShiftedSoftplus, Activation::Tanh] {
                for seed in 0..3 {
                    gradcheck_case(act, 300 + seed)?;
                }
            }
            Ok("9 finite-difference gradient checks within 1e-6".into())
        }),
        check("hvp-symmetry", || {
            let cfg = NetConfig::deep(2, 5, 3, Activation::Tanh);
            let w = NetworkParams::init_gaussian(&cfg, 15);
            let x = unit_vec(3, 2);
            let mut rng = RngStream::new(6, 1);
            let p = cfg.param_count();
            let u: Vec<f64> = (0..p).map(|_| rng.next_gaussian()).collect();
            let v: Vec<f64> = (0..p).map(|_| rng.next_gaussian()).collect();
            let hv = hessian_vector_product(&cfg, w.flat(), &x, &v).map_err(|e| e.to_string())?;
            let hu = hessian_vector_product(&cfg, w.flat(), &x, &u).map_err(|e| e.to_string())?;
            let (a, b) = (flat_dot(&u, &hv), flat_dot(&v, &hu));
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            if rel < 1e-7 {
                Ok(format!("asymmetry {rel:.2e}"))
            } else {
                Err(format!("asymmetry {rel:.2e} exceeds 1e-7"))
            }
        }),
        check("quadratic-closed-forms", || {
            let net = QuadNet::new(2, 3, vec![1.0, -1.0]).map_err(|e| e.to_string())?;
            let mut rng = RngStream::new(12, 2);
            let w: Vec<f64> = (0..6).map(|_| rng.next_gaussian()).collect();
            let x = unit_vec(3, 8);
            let g = grad_model(&net, &w, &x);
            for i in 0..2 {
                let s = flat_dot(&w[i * 3..(i + 1) * 3], &x);
                for k in 0..3 {
                    let want = net.signs[i] / 2.0 * s * x[k];
                    if (g[i * 3 + k] - want).abs() > 1e-12 {
                        return Err(format!("gradient mismatch at ({i}, {k})"));
                    }
                }
            }
            let one = QuadNet::new(1, 3, vec![1.0]).map_err(|e| e.to_string())?;
            let est = model_hessian_norm(&one, &w[..3], &x, 200, 1e-10);
            let want = flat_dot(&x, &x);
            if (est.value - want).abs() / want > 1e-6 {
                return Err(format!("hessian norm {} vs closed form {want}", est.value));
            }
            Ok("quadratic gradient and rank-one Hessian norm match closed forms".into())
        }),
        check("xor-oracle-equivalence", || {
            for &gamma in &[0.3, -0.7, 1.0] {
                let (a0, b0) = (0.2, -0.4);
                let (mut a, mut b) = (a0, b0);
                for t in 1..=30 {
                    let (na, nb) = (a + gamma * b, b + gamma * a);
                    a = na;
                    b = nb;
                    let (ca, cb) = oracle_closed_form(gamma, a0, b0, t);
                    let scale = a.abs().max(b.abs()).max(1e-300);
                    if (a - ca).abs() / scale > 1e-12 || (b - cb).abs() / scale > 1e-12 {
                        return Err(format!("recursion/closed-form split at gamma {gamma}, t {t}"));
                    }
                }
            }
            let mut params = QuadNetParams::init_gaussian(3, 4, 4).map_err(|e| e.to_string())?;
            let mut oracle = OracleState::from_params(&params, 4.0);
            let full = enumerate_xor(4).map_err(|e| e.to_string())?;
            for t in 1..=10 {
                sgd_step(&mut params, &full, 4.0);
                oracle.population_step();
                let dev = deviation_profile(&params, &oracle);
                if dev.z > 1e-12 {
                    return Err(format!("enumeration dynamics drift z = {} at t = {t}", dev.z));
                }
            }
            Ok("recursion = closed form (t <= 30) and enumeration SGD = oracle (t <= 10)".into())
        }),
        check("xor-sgd-cross-module", || {
            let mut params = QuadNetParams::init_gaussian(9, 6, 8).map_err(|e| e.to_string())?;
            let model = params.model();
            let batch = crate::xor::sample_xor(9, 1_000, 8, 48);
            let mut generic = params.weights.data().to_vec();
            let g =
                empirical_grad(&model, &generic, &batch, LossKind::Linear).map_err(|e| e.to_string())?;
            for (w, gi) in generic.iter_mut().zip(&g) {
                *w -= 6.0 * gi;
            }
            sgd_step(&mut params, &batch, 6.0);
            let rel = flat_dist(params.weights.data(), &generic) / flat_norm(&generic);
            if rel < 1e-12 {
                Ok(format!("update paths agree to {rel:.2e}"))
            } else {
                Err(format!("update paths diverge: {rel:.2e}"))
            }
        }),
        check("descent-lemma-small-run", || {
            let cfg = NetConfig::deep(2, 32, 8, Activation::Softplus);
            let w0 = NetworkParams::init_gaussian(&cfg, 17);
            let data = synth_ntk_separable(6, 8, 64, 0.5).map_err(|e| e.to_string())?;
            let tcfg = TrainConfig {
                step_size: StepSizeRule::Auto { safety: 0.9 },
                max_iters: 60,
                stop_rule: StopRule::FixedT,
                eval_every: None,
            };
            let out = train_gd(&cfg, w0.flat(), &data, None, LossKind::Logistic, &tcfg)
                .map_err(|e| e.to_string())?;
            let violations = descent_check(&out.metrics);
            if violations == 0 && out.diverged.is_none() {
                Ok(format!("auto eta {:.3e}, 0 violations over 60 steps", out.eta))
            } else {
                Err(format!("{violations} descent violations"))
            }
        }),
        check("flatten-roundtrip", || {
            let cfg = NetConfig::deep(3, 4, 5, Activation::Tanh);
            let w = NetworkParams::init_gaussian(&cfg, 23);
            let back = NetworkParams::from_flat(&cfg, w.flat().to_vec()).map_err(|e| e.to_string())?;
            if back == w && w.param_count() == 4 * 5 + 2 * 16 + 4 {
                Ok("flatten/unflatten is the identity".into())
            } else {
                Err("flatten/unflatten mismatch".into())
            }
        }),
        check("metrics-csv-roundtrip", || {
            let dir = std::env::temp_dir().join(format!("smoothlab-check-{}", std::process::id()));
            std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            let path = dir.join("metrics.csv");
            let cfg = NetConfig::deep(1, 4, 3, Activation::Tanh);
            let w0 = NetworkParams::init_gaussian(&cfg, 2);
            let data = synth_ntk_separable(2, 3, 16, 0.5).map_err(|e| e.to_string())?;
            let out = train_gd(&cfg, w0.flat(), &data, Some(&data), LossKind::Logistic, &TrainConfig::fixed(0.5, 10))
                .map_err(|e| e.to_string())?;
            crate::data::write_metrics_csv(&out.metrics, &path).map_err(|e| e.to_string())?;
            let back = crate::data::read_metrics_csv(&path).map_err(|e| e.to_string())?;
            let same = back.records.len() == out.metrics.records.len()
                && back
                    .records
                    .iter()
                    .zip(&out.metrics.records)
                    .all(|(a, b)| a.train_loss.to_bits() == b.train_loss.to_bits());
            let _ = std::fs::remove_dir_all(&dir);
            if same {
                Ok("metrics CSV round-trips bit-exactly".into())
            } else {
                Err("metrics CSV round-trip mismatch".into())
            }
        }),
        check("dataset-contract", || {
            let ds = synth_ntk_separable(11, 12, 64, 0.4).map_err(|e| e.to_string())?;
            for i in 0..ds.len() {
                if flat_norm(ds.input(i)) > 1.0 + 1e-12 {
                    return Err(format!("sample {i} leaves the unit ball"));
                }
            }
            let bad = Dataset::new(Matrix::from_vec(1, 1, vec![0.5]), vec![0.3], Provenance::Synthetic);
            if bad.is_ok() {
                return Err("label validation failed to reject 0.3".into());
            }
            Ok("unit-ball and label contracts enforced".into())
        }),
    ]
}
