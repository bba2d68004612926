use smoothlab::net::{model_hessian_norm, Activation, FirstLayerScaling, NetConfig, NetworkParams};
use smoothlab::numerics::{flat_axpy, flat_norm, flat_scale, RngStream};

fn unit(len: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, stream);
    let mut v: Vec<f64> = (0..len).map(|_| rng.next_gaussian()).collect();
    let n = flat_norm(&v);
    flat_scale(&mut v, 1.0 / n);
    v
}

fn estimate(scaling: FirstLayerScaling, act: Activation, m: usize, rho: f64, seeds: u64) -> f64 {
    let d = 24;
    let probe = unit(d, 600, 0);
    let mut cfg = NetConfig::deep(2, m, d, act);
    cfg.first_layer_scaling = scaling;
    let mut acc = 0.0;
    for seed in 0..seeds {
        let w0 = NetworkParams::init_gaussian(&cfg, 601 + seed);
        let dir = unit(cfg.param_count(), 602, seed);
        let mut w = w0.flat().to_vec();
        flat_axpy(&mut w, rho, &dir);
        acc += model_hessian_norm(&cfg, &w, &probe, 250, 1e-8).value;
    }
    acc / seeds as f64
}

fn main() {
    for scaling in [FirstLayerScaling::Scaled, FirstLayerScaling::Unscaled] {
        for act in [Activation::Softplus, Activation::ShiftedSoftplus, Activation::Tanh] {
            for rho in [1.0, 4.0] {
                let e64 = estimate(scaling, act, 64, rho, 3);
                let e1024 = estimate(scaling, act, 1024, rho, 3);
                println!(
                    "{scaling:?} {:18} rho={rho}: est64 {e64:.4e} est1024 {e1024:.4e} ratio {:.3}",
                    act.name(),
                    e1024 / e64
                );
            }
        }
    }
}
