// Dense cross-check of the Hessian norm width scaling: build the full
// Hessian by finite differences of exact gradients, then power-iterate the
// dense matrix. Independent of the matrix-free estimator.
use smoothlab::net::{grad_model, model_hessian_norm, Activation, FirstLayerScaling, NetConfig, NetworkParams};
use smoothlab::numerics::{flat_axpy, flat_norm, flat_scale, RngStream};

fn unit(len: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, stream);
    let mut v: Vec<f64> = (0..len).map(|_| rng.next_gaussian()).collect();
    let n = flat_norm(&v);
    flat_scale(&mut v, 1.0 / n);
    v
}

fn dense_hessian_norm(cfg: &NetConfig, w: &[f64], x: &[f64]) -> f64 {
    let p = w.len();
    let eps = 1e-5 * (1.0 + flat_norm(w));
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut wp = w.to_vec();
    for j in 0..p {
        let orig = wp[j];
        wp[j] = orig + eps;
        let gp = grad_model(cfg, &wp, x);
        wp[j] = orig - eps;
        let gm = grad_model(cfg, &wp, x);
        wp[j] = orig;
        cols.push(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect());
    }
    // symmetrize and power iterate
    let mut v = unit(p, 42, 9);
    let mut est = 0.0;
    for _ in 0..300 {
        let mut hv = vec![0.0; p];
        for (j, col) in cols.iter().enumerate() {
            let vj = v[j];
            if vj != 0.0 {
                for (h, c) in hv.iter_mut().zip(col) {
                    *h += 0.5 * vj * c;
                }
            }
        }
        // plus the transpose action for exact symmetry
        for (j, col) in cols.iter().enumerate() {
            let dot: f64 = col.iter().zip(&v).map(|(c, vi)| c * vi).sum();
            hv[j] += 0.5 * dot;
        }
        let n = flat_norm(&hv);
        if n == 0.0 { return 0.0; }
        est = n;
        v = hv;
        flat_scale(&mut v, 1.0 / n);
    }
    est
}

fn main() {
    let d = 6;
    let probe = unit(d, 600, 0);
    for scaling in [FirstLayerScaling::Scaled] {
        println!("--- {scaling:?} shifted-softplus, dense FD Hessian vs matrix-free");
        let mut prev: Option<f64> = None;
        for m in [8usize, 16, 32, 64] {
            let mut cfg = NetConfig::deep(2, m, d, Activation::ShiftedSoftplus);
            cfg.first_layer_scaling = scaling;
            let w0 = NetworkParams::init_gaussian(&cfg, 601);
            let dir = unit(cfg.param_count(), 602, 0);
            let mut w = w0.flat().to_vec();
            flat_axpy(&mut w, 1.0, &dir);
            let dense = dense_hessian_norm(&cfg, &w, &probe);
            let mf = model_hessian_norm(&cfg, &w, &probe, 400, 1e-9).value;
            let r = prev.map(|p| dense / p);
            println!("m={m:3} p={:5}: dense {dense:.5e}  matrix-free {mf:.5e}  ratio-to-prev(2x) {r:?}", cfg.param_count());
            prev = Some(dense);
        }
    }
}
