use smoothlab::net::{Activation, FirstLayerScaling, NetConfig, NetworkParams};
use smoothlab::objective::{empirical_loss_and_grad, LossKind};
use smoothlab::data::{Dataset, Provenance};
use smoothlab::numerics::{Matrix, RngStream};
use std::time::Instant;

fn main() {
    for scaling in [FirstLayerScaling::Scaled, FirstLayerScaling::Unscaled] {
        let mut cfg = NetConfig::deep(2, 300, 784, Activation::Softplus);
        cfg.first_layer_scaling = scaling;
        let w0 = NetworkParams::init_gaussian(&cfg, 7);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut r = RngStream::new(2, 0);
        for i in 0..2000 {
            let mut row: Vec<f64> = (0..784).map(|_| r.next_gaussian()).collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut row { *v /= n * 1.001; }
            data.extend_from_slice(&row);
            labels.push(if i % 2 == 0 { 1.0 } else { -1.0 });
        }
        let ds = Dataset::new(Matrix::from_vec(2000, 784, data), labels, Provenance::Synthetic).unwrap();
        let _ = empirical_loss_and_grad(&cfg, w0.flat(), &ds, LossKind::Logistic).unwrap();
        let t0 = Instant::now();
        for _ in 0..10 {
            let _ = empirical_loss_and_grad(&cfg, w0.flat(), &ds, LossKind::Logistic).unwrap();
        }
        println!("{scaling:?}: {:.3} s/iter", t0.elapsed().as_secs_f64() / 10.0);
    }
}
