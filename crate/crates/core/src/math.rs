//! Small dense-math kernels shared by the model, DoLa and the epinet.
//!
//! Matrices are flat row-major `[rows, cols]` slices; `y = W x` takes
//! `W: [out, in]`.

/// y = W x, W row-major [out, in].
pub fn matvec(w: &[f64], x: &[f64], out: usize, inp: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), out * inp);
    debug_assert_eq!(x.len(), inp);
    let mut y = vec![0.0; out];
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * inp..(o + 1) * inp];
        *yo = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    y
}

/// dW += dy ⊗ x (outer product accumulate).
pub fn matvec_grad_w(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let inp = x.len();
    for (o, dyo) in dy.iter().enumerate() {
        let row = &mut dw[o * inp..(o + 1) * inp];
        for (r, xi) in row.iter_mut().zip(x) {
            *r += dyo * xi;
        }
    }
}

/// dx += Wᵀ dy.
pub fn matvec_grad_x(dx: &mut [f64], w: &[f64], dy: &[f64]) {
    let inp = dx.len();
    for (o, dyo) in dy.iter().enumerate() {
        let row = &w[o * inp..(o + 1) * inp];
        for (d, wi) in dx.iter_mut().zip(row) {
            *d += dyo * wi;
        }
    }
}

/// Numerically stable softmax. `-inf` entries map to exactly 0.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// log(Σ exp(x_i)) with the max trick; returns -inf for all--inf input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// RMS normalization with learned gains: y_i = g_i · x_i / rms(x).
/// Returns the normalized vector and the reciprocal rms used (for backward).
pub fn rmsnorm(x: &[f64], gains: &[f64], eps: f64) -> (Vec<f64>, f64) {
    debug_assert_eq!(x.len(), gains.len());
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let ri = 1.0 / (ms + eps).sqrt();
    let y = x.iter().zip(gains).map(|(xi, gi)| gi * xi * ri).collect();
    (y, ri)
}

/// Backward of `rmsnorm`. Accumulates into `dgains` and returns dx.
pub fn rmsnorm_backward(
    dy: &[f64],
    x: &[f64],
    gains: &[f64],
    ri: f64,
    dgains: &mut [f64],
) -> Vec<f64> {
    let n = x.len() as f64;
    // u = dy ⊙ g is the gradient wrt the unscaled normalized vector
    let u: Vec<f64> = dy.iter().zip(gains).map(|(d, g)| d * g).collect();
    for ((dg, d), xi) in dgains.iter_mut().zip(dy).zip(x) {
        *dg += d * xi * ri;
    }
    let dot: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
    u.iter()
        .zip(x)
        .map(|(ui, xi)| ri * ui - (ri * ri * ri / n) * dot * xi)
        .collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_derivative(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}
