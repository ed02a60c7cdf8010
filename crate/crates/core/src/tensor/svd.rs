//! Singular values by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of the working matrix are rotated pairwise until they are
//! mutually orthogonal; the singular values are then the column norms.
//! Every rotation is orthogonal, so the sum of squared singular values stays
//! equal to the squared Frobenius norm of the input up to rounding.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Descending singular values of a 2-D tensor (`min(rows, cols)` of them).
pub fn svd_singular_values<T: Scalar>(m: &Tensor<T>) -> Result<Vec<f64>> {
    let (rows, cols) = match m.shape() {
        [r, c] => (*r, *c),
        other => return Err(Error::shape("svd_singular_values", other, &[0, 0])),
    };
    let data = m.to_f64();
    if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("svd input (flat index {pos})")));
    }
    Ok(singular_values(&data, rows, cols))
}

/// Descending singular values of a row-major `rows x cols` matrix.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(data.len(), rows * cols, "matrix buffer length");
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    // Orthogonalize the shorter side: store each of the `n` vectors
    // contiguously with length `len`.
    let (n, len) = if cols <= rows { (cols, rows) } else { (rows, cols) };
    let mut vecs = vec![0.0f64; n * len];
    if cols <= rows {
        for r in 0..rows {
            for c in 0..cols {
                vecs[c * len + r] = data[r * cols + c];
            }
        }
    } else {
        vecs.copy_from_slice(data);
    }

    let mut norms: Vec<f64> = (0..n).map(|i| dot(col(&vecs, i, len), col(&vecs, i, len))).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(col(&vecs, p, len), col(&vecs, q, len));
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (head, tail) = vecs.split_at_mut(q * len);
                let vp = &mut head[p * len..(p + 1) * len];
                let vq = &mut tail[..len];
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
                norms[p] = dot(vp, vp);
                norms[q] = dot(vq, vq);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = norms.iter().map(|x| x.sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn col(v: &[f64], i: usize, len: usize) -> &[f64] {
    &v[i * len..(i + 1) * len]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
