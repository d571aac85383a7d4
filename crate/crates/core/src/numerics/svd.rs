//! Moore–Penrose pseudoinverse via one-sided (Hestenes) Jacobi SVD.
//!
//! All arithmetic is `f64`; the result is narrowed to `f32` at the end.

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin SVD of a tall matrix held as columns: `a = u · diag(s) · vᵀ`.
struct Svd {
    /// `n` columns of length `m`, unit norm where `s > 0`.
    u_cols: Vec<Vec<f64>>,
    s: Vec<f64>,
    /// `n` columns of length `n`.
    v_cols: Vec<Vec<f64>>,
}

/// `cols` are the `n` columns (each of length `m >= n`) of the input.
fn jacobi_svd(mut cols: Vec<Vec<f64>>) -> Svd {
    let n = cols.len();
    let mut v_cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for i in 0..cp.len() {
                        a += cp[i] * cp[i];
                        b += cq[i] * cq[i];
                        g += cp[i] * cq[i];
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v_cols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut s = Vec::with_capacity(n);
    for col in cols.iter_mut() {
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.iter_mut().for_each(|x| *x /= norm);
        }
        s.push(norm);
    }
    Svd {
        u_cols: cols,
        s,
        v_cols,
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for i in 0..cp.len() {
        let xp = cp[i];
        let xq = cq[i];
        cp[i] = c * xp - s * xq;
        cq[i] = s * xp + c * xq;
    }
}

/// Columns of `m` (or of `mᵀ` when `m` is wide) as 64-bit vectors.
fn tall_columns(m: &Matrix, transpose: bool) -> Vec<Vec<f64>> {
    let (rows, cols) = m.shape();
    if transpose {
        (0..rows)
            .map(|r| m.row(r).iter().map(|&x| f64::from(x)).collect())
            .collect()
    } else {
        (0..cols)
            .map(|c| (0..rows).map(|r| f64::from(m.get(r, c))).collect())
            .collect()
    }
}

fn check_input(m: &Matrix, op: &'static str) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Empty(op));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite(op));
    }
    Ok(())
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    check_input(m, "singular_values")?;
    let svd = jacobi_svd(tall_columns(m, m.rows() < m.cols()));
    let mut s = svd.s;
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Pseudoinverse with the standard numerical-rank cutoff
/// `max(rows, cols) · ε₃₂`.
pub fn pinv_default(m: &Matrix) -> Result<Matrix> {
    pinv(m, m.rows().max(m.cols()) as f64 * f64::from(f32::EPSILON))
}

/// Moore–Penrose pseudoinverse. Singular values below
/// `tolerance · σ_max` are treated as zero.
pub fn pinv(m: &Matrix, tolerance: f64) -> Result<Matrix> {
    check_input(m, "pinv")?;
    if !(tolerance >= 0.0) {
        return Err(Error::Data(format!("pinv tolerance must be >= 0, got {tolerance}")));
    }
    // Work on the tall orientation; pinv(mᵀ) = pinv(m)ᵀ.
    let wide = m.rows() < m.cols();
    let svd = jacobi_svd(tall_columns(m, wide));
    let (tall_rows, tall_cols) = if wide {
        (m.cols(), m.rows())
    } else {
        (m.rows(), m.cols())
    };
    let s_max = svd.s.iter().copied().fold(0.0, f64::max);
    let cutoff = tolerance * s_max;

    // pinv(tall) = V · diag(1/s) · Uᵀ, shape tall_cols × tall_rows.
    let mut out = vec![0.0f64; tall_cols * tall_rows];
    for (j, &sj) in svd.s.iter().enumerate() {
        if sj <= cutoff || sj == 0.0 {
            continue;
        }
        let inv = 1.0 / sj;
        let v = &svd.v_cols[j];
        let u = &svd.u_cols[j];
        for r in 0..tall_cols {
            let scale = v[r] * inv;
            if scale == 0.0 {
                continue;
            }
            let row = &mut out[r * tall_rows..(r + 1) * tall_rows];
            for (o, &uc) in row.iter_mut().zip(u) {
                *o += scale * uc;
            }
        }
    }

    let narrowed: Vec<f32> = out.iter().map(|&x| x as f32).collect();
    let result = Matrix::new(tall_cols, tall_rows, narrowed)?;
    Ok(if wide { result.transpose() } else { result })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn penrose_residuals(a: &Matrix, p: &Matrix) -> [f32; 4] {
        let ap = a.matmul(p).unwrap();
        let pa = p.matmul(a).unwrap();
        [
            ap.matmul(a).unwrap().max_abs_diff(a).unwrap(),
            pa.matmul(p).unwrap().max_abs_diff(p).unwrap(),
            ap.max_abs_diff(&ap.transpose()).unwrap(),
            pa.max_abs_diff(&pa.transpose()).unwrap(),
        ]
    }

    #[test]
    fn identity_is_its_own_pinv() {
        let i3 = Matrix::identity(3);
        assert!(pinv_default(&i3).unwrap().max_abs_diff(&i3).unwrap() < 1e-7);
    }

    #[test]
    fn rank_deficient_diagonal() {
        let m = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 0.0]]).unwrap();
        let want = Matrix::from_rows(&[&[0.5, 0.0], &[0.0, 0.0]]).unwrap();
        assert!(pinv_default(&m).unwrap().max_abs_diff(&want).unwrap() < 1e-7);
    }

    #[test]
    fn wide_random_matrix_satisfies_penrose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = (0..8 * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = Matrix::new(8, 20, data).unwrap();
        let p = pinv_default(&m).unwrap();
        assert_eq!(p.shape(), (20, 8));
        for r in penrose_residuals(&m, &p) {
            assert!(r < 1e-4, "{r}");
        }
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(pinv_default(&Matrix::zeros(0, 3)), Err(Error::Empty(_))));
        assert!(Matrix::new(1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn singular_values_of_diagonal() {
        let m = Matrix::from_rows(&[&[3.0, 0.0, 0.0], &[0.0, -5.0, 0.0]]).unwrap();
        let s = singular_values(&m).unwrap();
        assert!((s[0] - 5.0).abs() < 1e-12 && (s[1] - 3.0).abs() < 1e-12);
    }
}
