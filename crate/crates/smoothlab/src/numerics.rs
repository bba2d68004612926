//! Dense row-major matrices, counter-based deterministic random streams, and
//! power-iteration spectral-norm estimation.
//!
//! Everything here is 64-bit: the finite-difference gradient and Hessian
//! checks downstream need ~1e-6 relative tolerance headroom, which f32
//! cannot provide.

/// Golden-ratio increment used by the SplitMix64 mixing chain.
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer. Full-avalanche 64-bit mixer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream keyed by `(seed, stream_id)`.
///
/// Draw `k` of a stream is a pure function of `(seed, stream_id, k)`, so
/// identical keys yield bit-identical sequences across runs and the draws of
/// disjoint streams can be produced in parallel without coordination.
#[derive(Clone, Copy, Debug)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        // Decorrelate the key from both inputs before counting starts.
        let key = mix64(mix64(seed ^ GOLDEN).wrapping_add(mix64(stream_id)));
        RngStream { key, counter: 0 }
    }

    /// Raw 64-bit draw at the current counter position.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN).wrapping_add(GOLDEN)));
        self.counter += 1;
        v
    }

    /// Uniform draw in `[0, 1)` (53-bit mantissa).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via Box-Muller on two counter positions.
    ///
    /// Library normal samplers are free to change their algorithm between
    /// releases; Box-Muller over the counter stream keeps draws reproducible.
    #[inline]
    pub fn next_gaussian(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite; u2 in [0, 1).
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Sign draw in `{-1.0, +1.0}`.
    #[inline]
    pub fn next_sign(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Derive a sub-seed for an independent job (e.g. one sweep cell) from the
/// top-level seed and two tags. Pure function: sweeps stay reproducible under
/// any parallel schedule.
pub fn derive_seed(seed: u64, tag_a: u64, tag_b: u64) -> u64 {
    mix64(mix64(seed ^ GOLDEN).wrapping_add(mix64(tag_a)).wrapping_add(mix64(tag_b ^ GOLDEN)))
}

/// Dense row-major matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length must equal rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        self.data.chunks_exact(self.cols).map(|row| flat_dot(row, x)).collect()
    }

    /// y = A^T x
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (row, &xi) in self.data.chunks_exact(self.cols).zip(x) {
            for (yj, &aij) in y.iter_mut().zip(row) {
                *yj += xi * aij;
            }
        }
        y
    }

    pub fn frobenius_norm(&self) -> f64 {
        flat_norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }
}

/// i.i.d. `Normal(0, stddev^2)` matrix, filled row-major from the stream.
///
/// Parameters are validated at config parse; violations here are programmer
/// errors.
pub fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize, stddev: f64) -> Matrix {
    assert!(rows >= 1 && cols >= 1, "gaussian_matrix needs rows, cols >= 1");
    assert!(stddev > 0.0 && stddev.is_finite(), "gaussian_matrix needs stddev > 0");
    let data = (0..rows * cols).map(|_| stddev * rng.next_gaussian()).collect();
    Matrix { rows, cols, data }
}

/// C(m x n) = A(m x k) * B(n x k)^T, all row-major slices.
pub fn gemm_nt_s(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C(m x n) = A(k x m)^T * B(k x n), all row-major slices.
pub fn gemm_tn_s(k: usize, m: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C(m x n) = A(m x k) * B(k x n), all row-major slices.
pub fn gemm_nn_s(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// C = A * B^T with A (m x k), B (n x k), C (m x n); all row-major.
pub fn gemm_nt(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    assert_eq!(a.cols, b.cols);
    assert_eq!((c.rows, c.cols), (a.rows, b.rows));
    gemm_nt_s(a.rows, a.cols, b.rows, &a.data, &b.data, &mut c.data);
}

/// C = A^T * B with A (k x m), B (k x n), C (m x n); all row-major.
pub fn gemm_tn(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    assert_eq!(a.rows, b.rows);
    assert_eq!((c.rows, c.cols), (a.cols, b.cols));
    gemm_tn_s(a.rows, a.cols, b.cols, &a.data, &b.data, &mut c.data);
}

/// C = A * B with A (m x k), B (k x n), C (m x n); all row-major.
pub fn gemm_nn(a: &Matrix, b: &Matrix, c: &mut Matrix) {
    assert_eq!(a.cols, b.rows);
    assert_eq!((c.rows, c.cols), (a.rows, b.cols));
    gemm_nn_s(a.rows, a.cols, b.cols, &a.data, &b.data, &mut c.data);
}

/// Result of an iterative spectral-norm estimate.
#[derive(Clone, Copy, Debug)]
pub struct SpectralEstimate {
    /// Power-iteration estimate; never exceeds the true spectral norm.
    pub value: f64,
    /// False when the relative change was still above `tol` after `iters`.
    pub converged: bool,
    pub iterations: usize,
}

/// Largest singular value of `m` by power iteration on `A^T A`.
///
/// The returned estimate is `||A v||` for a unit vector `v`, hence a lower
/// bound on the true spectral norm. Stops when the relative change drops
/// below `tol`; a non-converged estimate is still returned, flagged.
pub fn spectral_norm(m: &Matrix, iters: usize, tol: f64) -> SpectralEstimate {
    assert!(iters >= 1 && tol > 0.0);
    // Deterministic pseudo-random start vector: avoids adversarial orthogonal
    // starts while keeping runs reproducible.
    let mut rng = RngStream::new(0x5eed_cafe, 0);
    let mut v: Vec<f64> = (0..m.cols()).map(|_| rng.next_gaussian()).collect();
    let nv = flat_norm(&v);
    if nv == 0.0 {
        return SpectralEstimate { value: 0.0, converged: true, iterations: 0 };
    }
    flat_scale(&mut v, 1.0 / nv);

    let mut estimate = 0.0;
    for it in 1..=iters {
        let u = m.matvec(&v);
        let sigma = flat_norm(&u);
        if sigma == 0.0 {
            return SpectralEstimate { value: 0.0, converged: true, iterations: it };
        }
        let rel = (sigma - estimate).abs() / sigma.max(f64::MIN_POSITIVE);
        estimate = sigma;
        if rel < tol {
            return SpectralEstimate { value: estimate, converged: true, iterations: it };
        }
        let mut w = m.matvec_t(&u);
        let nw = flat_norm(&w);
        if nw == 0.0 {
            return SpectralEstimate { value: estimate, converged: true, iterations: it };
        }
        flat_scale(&mut w, 1.0 / nw);
        v = w;
    }
    SpectralEstimate { value: estimate, converged: false, iterations: iters }
}

/// Euclidean inner product. Length mismatch is a programming error.
#[inline]
pub fn flat_dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "flat_dot length mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn flat_norm(a: &[f64]) -> f64 {
    flat_dot(a, a).sqrt()
}

/// y += s * x
#[inline]
pub fn flat_axpy(y: &mut [f64], s: f64, x: &[f64]) {
    assert_eq!(y.len(), x.len(), "flat_axpy length mismatch");
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

#[inline]
pub fn flat_scale(a: &mut [f64], s: f64) {
    for v in a.iter_mut() {
        *v *= s;
    }
}

/// || a - b ||
#[inline]
pub fn flat_dist(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "flat_dist length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
