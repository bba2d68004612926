// Calibration probe for the figure-3-scale stability tracking run.
use smoothlab::data::{Dataset, Provenance};
use smoothlab::net::{Activation, NetConfig, NetworkParams};
use smoothlab::numerics::{derive_seed, flat_norm, flat_scale, Matrix, RngStream};
use smoothlab::objective::LossKind;
use smoothlab::trainer::{train_gd, StepSizeRule, StopRule, TrainConfig};
use std::time::Instant;

fn synthetic_mnist_like(seed: u64, n: usize) -> Dataset {
    let d = 784;
    let mut dir_rng = RngStream::new(derive_seed(seed, 900, 0), 0);
    let mut mu: Vec<f64> = (0..d).map(|_| dir_rng.next_gaussian()).collect();
    let norm = flat_norm(&mu);
    flat_scale(&mut mu, 0.9 / norm);
    let mut rng = RngStream::new(derive_seed(seed, 901, 0), 1);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let cluster = if rng.next_u64() % 2 == 0 { 1.0 } else { -1.0 };
        let mut x: Vec<f64> = mu
            .iter()
            .map(|&c| cluster * c + 0.3 / (d as f64).sqrt() * rng.next_gaussian())
            .collect();
        let norm = flat_norm(&x);
        if norm > 1.0 {
            flat_scale(&mut x, 1.0 / norm);
        }
        let mut y = cluster;
        if rng.next_f64() < 0.06 {
            y = -y;
        }
        data.extend_from_slice(&x);
        labels.push(y);
    }
    Dataset::new(Matrix::from_vec(n, d, data), labels, Provenance::Synthetic).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let t_max: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let t0 = Instant::now();
    let all = synthetic_mnist_like(seed, 4000);
    let mut rng = RngStream::new(seed, 912);
    let (train, test) = all.split(&mut rng, 0.5).unwrap();
    println!("train {} test {} (gen {:.1}s)", train.len(), test.len(), t0.elapsed().as_secs_f64());
    let mut cfg = NetConfig::deep(2, 300, 784, Activation::Softplus);
    cfg.first_layer_scaling = smoothlab::net::FirstLayerScaling::Unscaled;
    let w0 = NetworkParams::init_gaussian(&cfg, seed);
    let tcfg = TrainConfig {
        step_size: StepSizeRule::Fixed(0.02),
        max_iters: t_max,
        stop_rule: StopRule::FixedT,
        eval_every: Some(100),
    };
    let t0 = Instant::now();
    let out = train_gd(&cfg, w0.flat(), &train, Some(&test), LossKind::Logistic, &tcfg).unwrap();
    for r in out.metrics.records.iter().filter(|r| !r.test_loss.is_nan()) {
        let bound = 2.2 * r.cum_train_loss / train.len() as f64;
        println!(
            "t={:5} train {:.5} test {:.5} gap {:+.5} rho {:.3} bound12 {:.4} (b/g {:.1})",
            r.iter, r.train_loss, r.test_loss, r.gen_gap, r.dist_from_init, bound,
            bound / r.gen_gap
        );
    }
    println!("wall {:.1}s for T={}", t0.elapsed().as_secs_f64(), t_max);
}
