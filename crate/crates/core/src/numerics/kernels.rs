//! Slice kernels for the model's forward and backward passes.
//!
//! Activations are `f64`, weights are the stored `f32` values widened on
//! the fly. All matrices are row-major.

/// `y += a * x`
#[inline]
pub(crate) fn axpy_f32(a: f64, x: &[f32], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * f64::from(xi);
    }
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn dot_f32(a: &[f64], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * f64::from(b[i]);
        acc[1] += a[i + 1] * f64::from(b[i + 1]);
        acc[2] += a[i + 2] * f64::from(b[i + 2]);
        acc[3] += a[i + 3] * f64::from(b[i + 3]);
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * f64::from(b[i]);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out = x · w (+ bias)` for `x: rows × inner`, `w: inner × cols`.
pub(crate) fn linear(
    x: &[f64],
    inner: usize,
    w: &[f32],
    bias: Option<&[f32]>,
    cols: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(w.len(), inner * cols);
    let rows = x.len() / inner;
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let orow = &mut out[r * cols..(r + 1) * cols];
        match bias {
            Some(b) => orow.iter_mut().zip(b).for_each(|(o, &b)| *o = f64::from(b)),
            None => orow.iter_mut().for_each(|o| *o = 0.0),
        }
        let xrow = &x[r * inner..(r + 1) * inner];
        for (k, &xv) in xrow.iter().enumerate() {
            if xv != 0.0 {
                axpy_f32(xv, &w[k * cols..(k + 1) * cols], orow);
            }
        }
    }
}

/// `out = dy · wᵀ` for `dy: rows × cols`, `w: inner × cols`; gives `rows × inner`.
pub(crate) fn linear_backward_input(
    dy: &[f64],
    cols: usize,
    w: &[f32],
    inner: usize,
    out: &mut [f64],
) {
    let rows = dy.len() / cols;
    debug_assert_eq!(out.len(), rows * inner);
    for r in 0..rows {
        let dyrow = &dy[r * cols..(r + 1) * cols];
        for k in 0..inner {
            out[r * inner + k] = dot_f32(dyrow, &w[k * cols..(k + 1) * cols]);
        }
    }
}

/// `gw += xᵀ · dy` for `x: rows × inner`, `dy: rows × cols`.
pub(crate) fn linear_backward_weight(
    x: &[f64],
    inner: usize,
    dy: &[f64],
    cols: usize,
    gw: &mut [f64],
) {
    let rows = x.len() / inner;
    for r in 0..rows {
        let dyrow = &dy[r * cols..(r + 1) * cols];
        for k in 0..inner {
            let xv = x[r * inner + k];
            if xv != 0.0 {
                axpy(xv, dyrow, &mut gw[k * cols..(k + 1) * cols]);
            }
        }
    }
}

/// Normalize one row. Writes the normalized-but-unscaled values to `xhat`
/// and returns `1 / sqrt(var + eps)`.
pub(crate) fn layer_norm_row(
    x: &[f64],
    gain: &[f32],
    bias: &[f32],
    xhat: &mut [f64],
    out: &mut [f64],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + super::LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        out[i] = xhat[i] * f64::from(gain[i]) + f64::from(bias[i]);
    }
    inv_std
}

/// Backward through one layer-norm row. Accumulates into `dx`, `dgain`, `dbias`.
pub(crate) fn layer_norm_row_backward(
    dout: &[f64],
    xhat: &[f64],
    inv_std: f64,
    gain: &[f32],
    dx: &mut [f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) {
    let n = dout.len();
    if let Some((dgain, dbias)) = grads {
        for i in 0..n {
            dgain[i] += dout[i] * xhat[i];
            dbias[i] += dout[i];
        }
    }
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..n {
        let dxh = dout[i] * f64::from(gain[i]);
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
    }
    mean_dxhat /= n as f64;
    mean_dxhat_xhat /= n as f64;
    for i in 0..n {
        let dxh = dout[i] * f64::from(gain[i]);
        dx[i] += inv_std * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}
