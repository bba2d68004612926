//! Model classes: the L-hidden-layer width-m MLP with 1/sqrt(m) scaling and a
//! smooth activation, and the two-layer quadratic net with fixed output signs.
//!
//! Both expose the same [`Model`] surface: batched forward passes and exact
//! reverse-mode parameter gradients over a flat weight vector. Second-order
//! information (Hessian-vector products, Hessian spectral norms) is derived
//! from the exact gradients by central differences.

use std::io::{Read, Write};
use std::path::Path;

use crate::numerics::{
    flat_dot, flat_norm, flat_scale, gaussian_matrix, gemm_nn_s, gemm_nt_s, gemm_tn_s, Matrix,
    RngStream, SpectralEstimate,
};
use crate::Error;

/// Smooth scalar activations. All are 1-Lipschitz and 1-smooth on the reals;
/// only the shifted variants satisfy sigma(0) = 0 exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    ShiftedSoftplus,
    Tanh,
    Quadratic,
}

impl Activation {
    pub fn value(self, t: f64) -> f64 {
        match self {
            // For t > 0 compute t + log1p(e^-t): avoids overflow at |t| > 700.
            Activation::Softplus => {
                if t > 0.0 {
                    t + (-t).exp().ln_1p()
                } else {
                    t.exp().ln_1p()
                }
            }
            Activation::ShiftedSoftplus => Activation::Softplus.value(t) - std::f64::consts::LN_2,
            Activation::Tanh => t.tanh(),
            Activation::Quadratic => 0.5 * t * t,
        }
    }

    pub fn d1(self, t: f64) -> f64 {
        match self {
            Activation::Softplus | Activation::ShiftedSoftplus => sigmoid(t),
            Activation::Tanh => {
                let th = t.tanh();
                1.0 - th * th
            }
            Activation::Quadratic => t,
        }
    }

    pub fn d2(self, t: f64) -> f64 {
        match self {
            Activation::Softplus | Activation::ShiftedSoftplus => {
                let s = sigmoid(t);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let th = t.tanh();
                -2.0 * th * (1.0 - th * th)
            }
            Activation::Quadratic => 1.0,
        }
    }

    /// (value, first derivative) sharing one transcendental evaluation; the
    /// batched backward path calls this once per pre-activation.
    #[inline]
    pub fn value_d1(self, t: f64) -> (f64, f64) {
        match self {
            Activation::Softplus | Activation::ShiftedSoftplus => {
                let (value, d1) = if t > 0.0 {
                    let e = (-t).exp();
                    (t + e.ln_1p(), 1.0 / (1.0 + e))
                } else {
                    let e = t.exp();
                    (e.ln_1p(), e / (1.0 + e))
                };
                if self == Activation::ShiftedSoftplus {
                    (value - std::f64::consts::LN_2, d1)
                } else {
                    (value, d1)
                }
            }
            Activation::Tanh => {
                let th = t.tanh();
                (th, 1.0 - th * th)
            }
            Activation::Quadratic => (0.5 * t * t, t),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::ShiftedSoftplus => "shifted-softplus",
            Activation::Tanh => "tanh",
            Activation::Quadratic => "quadratic",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, Error> {
        match name {
            "softplus" => Ok(Activation::Softplus),
            "shifted-softplus" => Ok(Activation::ShiftedSoftplus),
            "tanh" => Ok(Activation::Tanh),
            "quadratic" => Ok(Activation::Quadratic),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Softplus => 0,
            Activation::ShiftedSoftplus => 1,
            Activation::Tanh => 2,
            Activation::Quadratic => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, Error> {
        match tag {
            0 => Ok(Activation::Softplus),
            1 => Ok(Activation::ShiftedSoftplus),
            2 => Ok(Activation::Tanh),
            3 => Ok(Activation::Quadratic),
            other => Err(Error::Config(format!("unknown activation tag {other}"))),
        }
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Whether the first hidden layer's activation output is multiplied by
/// 1/sqrt(m) like every other layer, or left unscaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FirstLayerScaling {
    Scaled,
    Unscaled,
}

/// Architecture of the deep smooth net.
#[derive(Clone, Copy, Debug)]
pub struct NetConfig {
    /// Number of hidden layers L.
    pub hidden_layers: usize,
    /// Hidden width m.
    pub width: usize,
    /// Input dimension d.
    pub input_dim: usize,
    pub activation: Activation,
    pub first_layer_scaling: FirstLayerScaling,
    /// Standard deviation of the i.i.d. Gaussian initialization.
    pub init_stddev: f64,
}

impl NetConfig {
    /// Deep net with standard Gaussian init and every layer scaled by 1/sqrt(m).
    pub fn deep(hidden_layers: usize, width: usize, input_dim: usize, activation: Activation) -> Self {
        NetConfig {
            hidden_layers,
            width,
            input_dim,
            activation,
            first_layer_scaling: FirstLayerScaling::Scaled,
            init_stddev: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.hidden_layers < 1 {
            return Err(Error::Config("hidden_layers must be >= 1".into()));
        }
        if self.width < 1 || self.input_dim < 1 {
            return Err(Error::Config("width and input_dim must be >= 1".into()));
        }
        if !(self.init_stddev > 0.0) {
            return Err(Error::Config("init_stddev must be > 0".into()));
        }
        if self.activation == Activation::Quadratic {
            return Err(Error::Config(
                "quadratic activation belongs to the fixed-sign two-layer net (use QuadNet)".into(),
            ));
        }
        Ok(())
    }

    /// Shapes of W_1 (m x d), W_2..W_L (m x m), W_{L+1} (m x 1).
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let (l, m, d) = (self.hidden_layers, self.width, self.input_dim);
        let mut dims = Vec::with_capacity(l + 1);
        dims.push((m, d));
        for _ in 1..l {
            dims.push((m, m));
        }
        dims.push((m, 1));
        dims
    }

    /// p = m*d + (L-1)*m^2 + m
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(r, c)| r * c).sum()
    }

    /// Scale multiplying layer `l`'s activation output (0-based hidden layers).
    #[inline]
    fn hidden_scale(&self, layer: usize) -> f64 {
        if layer == 0 && self.first_layer_scaling == FirstLayerScaling::Unscaled {
            1.0
        } else {
            1.0 / (self.width as f64).sqrt()
        }
    }
}

/// Flat parameter vector of a deep net plus the layer shapes needed to view
/// it as per-layer matrices. Layers are stored back to back, row-major, so
/// flatten/unflatten is the identity on all entries.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    dims: Vec<(usize, usize)>,
    data: Vec<f64>,
}

impl NetworkParams {
    /// i.i.d. Gaussian initialization; layer `l` draws from stream id `l`.
    pub fn init_gaussian(cfg: &NetConfig, seed: u64) -> Self {
        let dims = cfg.layer_dims();
        let mut data = Vec::with_capacity(cfg.param_count());
        for (l, &(r, c)) in dims.iter().enumerate() {
            let mut stream = RngStream::new(seed, l as u64);
            data.extend_from_slice(gaussian_matrix(&mut stream, r, c, cfg.init_stddev).data());
        }
        NetworkParams { dims, data }
    }

    pub fn zeros(cfg: &NetConfig) -> Self {
        NetworkParams { dims: cfg.layer_dims(), data: vec![0.0; cfg.param_count()] }
    }

    pub fn from_flat(cfg: &NetConfig, data: Vec<f64>) -> Result<Self, Error> {
        if data.len() != cfg.param_count() {
            return Err(Error::Config(format!(
                "flat parameter vector has length {}, expected {}",
                data.len(),
                cfg.param_count()
            )));
        }
        Ok(NetworkParams { dims: cfg.layer_dims(), data })
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len()
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.dims[..layer].iter().map(|(r, c)| r * c).sum()
    }

    /// (rows, cols, entries) of layer `layer` within the flat vector.
    pub fn layer(&self, layer: usize) -> (usize, usize, &[f64]) {
        let (r, c) = self.dims[layer];
        let off = self.layer_offset(layer);
        (r, c, &self.data[off..off + r * c])
    }

    pub fn layer_matrix(&self, layer: usize) -> Matrix {
        let (r, c, s) = self.layer(layer);
        Matrix::from_vec(r, c, s.to_vec())
    }
}

/// A scalar-output model over a flat parameter vector.
pub trait Model: Sync {
    fn param_count(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Number of hidden layers L; enters the rho^{3L} constants.
    fn hidden_layers(&self) -> usize;

    /// Hidden width m; enters the 1/sqrt(m) constants.
    fn width(&self) -> usize;

    /// Per-sample outputs over the rows of `x`.
    fn batch_forward(&self, w: &[f64], x: &Matrix) -> Vec<f64>;

    /// Outputs plus the coefficient-weighted gradient
    /// `sum_i coeff(i, phi_i) * grad_w Phi(w, x_i)`.
    ///
    /// `coeff` is invoked once per sample in row order; the gradient reduction
    /// order is fixed so batched runs stay bit-reproducible.
    fn batch_forward_backward(
        &self,
        w: &[f64],
        x: &Matrix,
        coeff: &mut dyn FnMut(usize, f64) -> f64,
    ) -> (Vec<f64>, Vec<f64>);
}

fn layer_dims_slices(cfg: &NetConfig) -> Vec<(usize, usize, usize)> {
    // (rows, cols, offset) per layer
    let mut out = Vec::new();
    let mut off = 0;
    for (r, c) in cfg.layer_dims() {
        out.push((r, c, off));
        off += r * c;
    }
    out
}

impl Model for NetConfig {
    fn param_count(&self) -> usize {
        NetConfig::param_count(self)
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn hidden_layers(&self) -> usize {
        self.hidden_layers
    }

    fn width(&self) -> usize {
        self.width
    }

    fn batch_forward(&self, w: &[f64], x: &Matrix) -> Vec<f64> {
        let mut no_grad = |_i: usize, _phi: f64| 0.0;
        // Forward-only callers pay for one rank-1 pass they do not need only
        // if they go through backward; keep a dedicated path instead.
        self.forward_only(w, x, &mut no_grad)
    }

    fn batch_forward_backward(
        &self,
        w: &[f64],
        x: &Matrix,
        coeff: &mut dyn FnMut(usize, f64) -> f64,
    ) -> (Vec<f64>, Vec<f64>) {
        debug_assert!(self.validate().is_ok());
        assert_eq!(w.len(), NetConfig::param_count(self));
        assert_eq!(x.cols(), self.input_dim);
        let n = x.rows();
        let (l, m) = (self.hidden_layers, self.width);
        let layers = layer_dims_slices(self);
        let out_scale = 1.0 / (m as f64).sqrt();

        // Forward: keep activations h_l and scaled derivatives per layer.
        let mut hs: Vec<Matrix> = Vec::with_capacity(l);
        let mut dhs: Vec<Matrix> = Vec::with_capacity(l);
        for layer in 0..l {
            let (r, c, off) = layers[layer];
            let wl = &w[off..off + r * c];
            let prev = if layer == 0 { x.data() } else { hs[layer - 1].data() };
            let prev_cols = c;
            let mut z = Matrix::zeros(n, m);
            gemm_nt_s(n, prev_cols, m, prev, wl, z.data_mut());
            let scale = self.hidden_scale(layer);
            let mut dh = Matrix::zeros(n, m);
            for (zv, dv) in z.data_mut().iter_mut().zip(dh.data_mut()) {
                let (value, d1) = self.activation.value_d1(*zv);
                *zv = scale * value;
                *dv = scale * d1;
            }
            hs.push(z);
            dhs.push(dh);
        }
        let (_r, _c, out_off) = layers[l];
        let w_out = &w[out_off..out_off + m];
        let h_last = &hs[l - 1];
        let mut outputs = Vec::with_capacity(n);
        for j in 0..n {
            outputs.push(out_scale * flat_dot(h_last.row(j), w_out));
        }

        // Backward with per-sample coefficients.
        let coeffs: Vec<f64> = outputs.iter().enumerate().map(|(j, &phi)| coeff(j, phi)).collect();
        let mut grad = vec![0.0; w.len()];

        // Output layer gradient: out_scale * H_L^T c.
        {
            let g_out = &mut grad[out_off..out_off + m];
            for (j, &cj) in coeffs.iter().enumerate() {
                if cj != 0.0 {
                    let row = h_last.row(j);
                    for (gi, &hi) in g_out.iter_mut().zip(row) {
                        *gi += out_scale * cj * hi;
                    }
                }
            }
        }

        // delta_z starts at layer L: dPhi/dH_L = out_scale * w_out (rank one).
        let mut delta = Matrix::zeros(n, m);
        for j in 0..n {
            let cj = coeffs[j];
            let drow = delta.row_mut(j);
            let dhrow = dhs[l - 1].row(j);
            for i in 0..m {
                drow[i] = cj * out_scale * w_out[i] * dhrow[i];
            }
        }

        for layer in (0..l).rev() {
            let (r, c, off) = layers[layer];
            let wl = &w[off..off + r * c];
            let prev = if layer == 0 { x.data() } else { hs[layer - 1].data() };
            // grad W_layer = delta^T * H_{layer-1}
            gemm_tn_s(n, m, c, delta.data(), prev, &mut grad[off..off + r * c]);
            if layer == 0 {
                break;
            }
            // delta_{layer-1} = (delta * W_layer) .* d(h_{layer-1})/d(z_{layer-1})
            let mut back = Matrix::zeros(n, c);
            gemm_nn_s(n, m, c, delta.data(), wl, back.data_mut());
            for (bv, dv) in back.data_mut().iter_mut().zip(dhs[layer - 1].data()) {
                *bv *= dv;
            }
            delta = back;
        }

        (outputs, grad)
    }
}

impl NetConfig {
    fn forward_only(&self, w: &[f64], x: &Matrix, _unused: &mut dyn FnMut(usize, f64) -> f64) -> Vec<f64> {
        debug_assert!(self.validate().is_ok());
        assert_eq!(w.len(), NetConfig::param_count(self));
        assert_eq!(x.cols(), self.input_dim);
        let n = x.rows();
        let (l, m) = (self.hidden_layers, self.width);
        let layers = layer_dims_slices(self);
        let out_scale = 1.0 / (m as f64).sqrt();

        let mut h_prev: Option<Matrix> = None;
        for layer in 0..l {
            let (r, c, off) = layers[layer];
            let wl = &w[off..off + r * c];
            let prev = match &h_prev {
                None => x.data(),
                Some(h) => h.data(),
            };
            let mut z = Matrix::zeros(n, m);
            gemm_nt_s(n, c, m, prev, wl, z.data_mut());
            let scale = self.hidden_scale(layer);
            for zv in z.data_mut().iter_mut() {
                *zv = scale * self.activation.value(*zv);
            }
            h_prev = Some(z);
        }
        let (_r, _c, out_off) = layers[l];
        let w_out = &w[out_off..out_off + m];
        let h_last = h_prev.expect("at least one hidden layer");
        (0..n).map(|j| out_scale * flat_dot(h_last.row(j), w_out)).collect()
    }
}

/// The two-layer quadratic net `Phi(w, x) = (1/2m) sum_i a_i (x^T w_i)^2`.
///
/// The output signs `a_i` are fixed; the trainable parameters are the first
/// layer rows `w_i`, so the flat vector has length m*d.
#[derive(Clone, Debug)]
pub struct QuadNet {
    pub width: usize,
    pub input_dim: usize,
    pub signs: Vec<f64>,
}

impl QuadNet {
    pub fn new(width: usize, input_dim: usize, signs: Vec<f64>) -> Result<Self, Error> {
        if signs.len() != width {
            return Err(Error::Config("signs length must equal width".into()));
        }
        if signs.iter().any(|&a| a != 1.0 && a != -1.0) {
            return Err(Error::Config("signs must be +1 or -1".into()));
        }
        Ok(QuadNet { width, input_dim, signs })
    }

    /// First m/2 neurons +1, rest -1; requires even width so the signs sum to zero.
    pub fn balanced(width: usize, input_dim: usize) -> Result<Self, Error> {
        if width == 0 || width % 2 != 0 {
            return Err(Error::Config("balanced quadratic net needs even positive width".into()));
        }
        let signs = (0..width).map(|i| if i < width / 2 { 1.0 } else { -1.0 }).collect();
        QuadNet::new(width, input_dim, signs)
    }
}

impl Model for QuadNet {
    fn param_count(&self) -> usize {
        self.width * self.input_dim
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn hidden_layers(&self) -> usize {
        1
    }

    fn width(&self) -> usize {
        self.width
    }

    fn batch_forward(&self, w: &[f64], x: &Matrix) -> Vec<f64> {
        assert_eq!(w.len(), self.param_count());
        assert_eq!(x.cols(), self.input_dim);
        let n = x.rows();
        let m = self.width;
        let mut s = Matrix::zeros(n, m);
        gemm_nt_s(n, self.input_dim, m, x.data(), w, s.data_mut());
        let half_inv_m = 0.5 / m as f64;
        (0..n)
            .map(|j| {
                let row = s.row(j);
                let mut acc = 0.0;
                for (si, ai) in row.iter().zip(&self.signs) {
                    acc += ai * si * si;
                }
                half_inv_m * acc
            })
            .collect()
    }

    fn batch_forward_backward(
        &self,
        w: &[f64],
        x: &Matrix,
        coeff: &mut dyn FnMut(usize, f64) -> f64,
    ) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(w.len(), self.param_count());
        assert_eq!(x.cols(), self.input_dim);
        let n = x.rows();
        let (m, d) = (self.width, self.input_dim);
        let mut s = Matrix::zeros(n, m);
        gemm_nt_s(n, d, m, x.data(), w, s.data_mut());
        let half_inv_m = 0.5 / m as f64;
        let outputs: Vec<f64> = (0..n)
            .map(|j| {
                let row = s.row(j);
                let mut acc = 0.0;
                for (si, ai) in row.iter().zip(&self.signs) {
                    acc += ai * si * si;
                }
                half_inv_m * acc
            })
            .collect();

        // dPhi/dw_i = (a_i/m) (x^T w_i) x; weight s_{ji} by c_j and contract.
        let mut weighted = s;
        for j in 0..n {
            let cj = coeff(j, outputs[j]);
            for v in weighted.row_mut(j) {
                *v *= cj;
            }
        }
        let mut grad = vec![0.0; m * d];
        gemm_tn_s(n, m, d, weighted.data(), x.data(), &mut grad);
        let inv_m = 1.0 / m as f64;
        for (i, ai) in self.signs.iter().enumerate() {
            for g in &mut grad[i * d..(i + 1) * d] {
                *g *= ai * inv_m;
            }
        }
        (outputs, grad)
    }
}

/// First-layer weights of the quadratic net together with its fixed signs.
///
/// The signs are immutable across training and sum to zero; only the first
/// layer is ever updated.
#[derive(Clone, Debug)]
pub struct QuadNetParams {
    /// m x d; row i is w_i.
    pub weights: Matrix,
    signs: Vec<f64>,
}

impl QuadNetParams {
    pub fn new(weights: Matrix, signs: Vec<f64>) -> Result<Self, Error> {
        if signs.len() != weights.rows() {
            return Err(Error::Config("signs length must equal the number of neurons".into()));
        }
        if signs.iter().any(|&a| a != 1.0 && a != -1.0) {
            return Err(Error::Config("signs must be +1 or -1".into()));
        }
        if signs.iter().sum::<f64>() != 0.0 {
            return Err(Error::Config("signs must sum to zero".into()));
        }
        Ok(QuadNetParams { weights, signs })
    }

    /// Gaussian init `w_ij ~ N(0, 1/d)` from stream 0 of `seed`, with the
    /// first m/2 signs +1 and the rest -1.
    pub fn init_gaussian(seed: u64, width: usize, input_dim: usize) -> Result<Self, Error> {
        let quad = QuadNet::balanced(width, input_dim)?;
        let mut rng = RngStream::new(seed, 0);
        let stddev = 1.0 / (input_dim as f64).sqrt();
        let weights = gaussian_matrix(&mut rng, width, input_dim, stddev);
        QuadNetParams::new(weights, quad.signs)
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn width(&self) -> usize {
        self.weights.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    /// The model view over these parameters.
    pub fn model(&self) -> QuadNet {
        QuadNet {
            width: self.width(),
            input_dim: self.input_dim(),
            signs: self.signs.clone(),
        }
    }
}

/// Linear model Phi(w, x) = <w, x>: the degenerate depth-0 member of the
/// family. Its objective under any convex loss is convex, which makes it the
/// control case for the quasi-convexity probes.
#[derive(Clone, Copy, Debug)]
pub struct LinearModel {
    pub input_dim: usize,
}

impl Model for LinearModel {
    fn param_count(&self) -> usize {
        self.input_dim
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn hidden_layers(&self) -> usize {
        0
    }

    fn width(&self) -> usize {
        1
    }

    fn batch_forward(&self, w: &[f64], x: &Matrix) -> Vec<f64> {
        assert_eq!(w.len(), self.input_dim);
        assert_eq!(x.cols(), self.input_dim);
        (0..x.rows()).map(|j| flat_dot(x.row(j), w)).collect()
    }

    fn batch_forward_backward(
        &self,
        w: &[f64],
        x: &Matrix,
        coeff: &mut dyn FnMut(usize, f64) -> f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let outputs = self.batch_forward(w, x);
        let mut grad = vec![0.0; self.input_dim];
        for (j, &phi) in outputs.iter().enumerate() {
            let cj = coeff(j, phi);
            if cj != 0.0 {
                for (g, &xi) in grad.iter_mut().zip(x.row(j)) {
                    *g += cj * xi;
                }
            }
        }
        (outputs, grad)
    }
}

/// Phi(w, x) for a single input.
pub fn forward<M: Model + ?Sized>(model: &M, w: &[f64], x: &[f64]) -> f64 {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec());
    model.batch_forward(w, &xm)[0]
}

/// Exact reverse-mode parameter gradient of Phi at a single input.
pub fn grad_model<M: Model + ?Sized>(model: &M, w: &[f64], x: &[f64]) -> Vec<f64> {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec());
    let mut one = |_i: usize, _phi: f64| 1.0;
    model.batch_forward_backward(w, &xm, &mut one).1
}

/// Step used for the central-difference Hessian-vector products.
fn hvp_epsilon(w: &[f64]) -> f64 {
    1e-4 * (1.0 + flat_norm(w))
}

/// grad Phi finite-difference curvature along v:
/// `(g(w + eps v_hat) - g(w - eps v_hat)) * ||v|| / (2 eps)`.
pub fn hessian_vector_product<M: Model + ?Sized>(
    model: &M,
    w: &[f64],
    x: &[f64],
    v: &[f64],
) -> Result<Vec<f64>, Error> {
    let vn = flat_norm(v);
    if vn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let eps = hvp_epsilon(w);
    let mut wp = w.to_vec();
    let mut wm = w.to_vec();
    let s = eps / vn;
    for i in 0..w.len() {
        wp[i] += s * v[i];
        wm[i] -= s * v[i];
    }
    let gp = grad_model(model, &wp, x);
    let gm = grad_model(model, &wm, x);
    let scale = vn / (2.0 * eps);
    Ok(gp.iter().zip(&gm).map(|(a, b)| scale * (a - b)).collect())
}

/// Spectral norm of the model Hessian at (w, x) by power iteration over
/// Hessian-vector products.
pub fn model_hessian_norm<M: Model + ?Sized>(
    model: &M,
    w: &[f64],
    x: &[f64],
    iters: usize,
    tol: f64,
) -> SpectralEstimate {
    assert!(iters >= 1 && tol > 0.0);
    let p = w.len();
    let mut rng = RngStream::new(0x5eed_cafe, 0);
    let mut v: Vec<f64> = (0..p).map(|_| rng.next_gaussian()).collect();
    let nv = flat_norm(&v);
    flat_scale(&mut v, 1.0 / nv);

    let mut estimate = 0.0;
    for it in 1..=iters {
        let hv = hessian_vector_product(model, w, x, &v).expect("unit start vector");
        let norm = flat_norm(&hv);
        if norm == 0.0 {
            return SpectralEstimate { value: 0.0, converged: true, iterations: it };
        }
        let rel = (norm - estimate).abs() / norm.max(f64::MIN_POSITIVE);
        estimate = norm;
        if rel < tol {
            return SpectralEstimate { value: estimate, converged: true, iterations: it };
        }
        v = hv;
        flat_scale(&mut v, 1.0 / norm);
    }
    SpectralEstimate { value: estimate, converged: false, iterations: iters }
}

/// Max gradient norm over a probe set: the measured Lipschitz parameter.
pub fn measured_lipschitz<M: Model + ?Sized>(model: &M, w: &[f64], probes: &Matrix) -> f64 {
    assert!(probes.rows() > 0, "probe set must be nonempty");
    let mut g0: f64 = 0.0;
    for j in 0..probes.rows() {
        g0 = g0.max(flat_norm(&grad_model(model, w, probes.row(j))));
    }
    g0
}

/// Lipschitz estimate of the deep net at initialization.
#[derive(Clone, Copy, Debug)]
pub struct LipschitzAtInit {
    /// max over probes of ||grad Phi(w0, x)||.
    pub g0: f64,
    /// sqrt(L+1) * c0_hat^L, with c0_hat from the measured layer spectral norms.
    pub ceiling: f64,
    /// max over layers of ||W_l||_2 / sqrt(m).
    pub c0_hat: f64,
}

/// Measured Lipschitz parameter of the network at initialization together
/// with its analytic ceiling from the layer spectral norms.
pub fn lipschitz_at_init(cfg: &NetConfig, w0: &NetworkParams, probes: &Matrix) -> LipschitzAtInit {
    let g0 = measured_lipschitz(cfg, w0.flat(), probes);
    let sqrt_m = (cfg.width as f64).sqrt();
    let mut c0_hat: f64 = 0.0;
    for l in 0..w0.num_layers() {
        let est = crate::numerics::spectral_norm(&w0.layer_matrix(l), 500, 1e-9);
        c0_hat = c0_hat.max(est.value / sqrt_m);
    }
    let lcount = cfg.hidden_layers as f64;
    let ceiling = (lcount + 1.0).sqrt() * c0_hat.powf(lcount);
    LipschitzAtInit { g0, ceiling, c0_hat }
}

const CHECKPOINT_MAGIC: &[u8; 5] = b"SNET1";

/// Write a weight checkpoint: magic "SNET1", then little-endian u32 L, m, d,
/// u8 activation tag, then the layer matrices in order as row-major f64.
pub fn write_checkpoint(path: &Path, cfg: &NetConfig, params: &NetworkParams) -> Result<(), Error> {
    let mut buf = Vec::with_capacity(18 + 8 * params.param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(cfg.hidden_layers as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.width as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.input_dim as u32).to_le_bytes());
    buf.push(cfg.activation.tag());
    for v in params.flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub struct Checkpoint {
    pub hidden_layers: usize,
    pub width: usize,
    pub input_dim: usize,
    pub activation: Activation,
    pub params: NetworkParams,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, Error> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 18 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(Error::Config(format!("{} is not a SNET1 checkpoint", path.display())));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (l, m, d) = (u32_at(5), u32_at(9), u32_at(13));
    let activation = Activation::from_tag(bytes[17])?;
    let cfg = NetConfig::deep(l, m, d, activation);
    let dims: Vec<(usize, usize)> = if activation == Activation::Quadratic {
        vec![(m, d)]
    } else {
        cfg.layer_dims()
    };
    let count: usize = dims.iter().map(|(r, c)| r * c).sum();
    if bytes.len() != 18 + 8 * count {
        return Err(Error::Config(format!(
            "checkpoint {} truncated: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            18 + 8 * count
        )));
    }
    let data: Vec<f64> = bytes[18..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Checkpoint { hidden_layers: l, width: m, input_dim: d, activation, params: NetworkParams { dims, data } })
}
