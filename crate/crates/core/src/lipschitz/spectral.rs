//! Largest singular value of a dense matrix.

use nalgebra::{DMatrix, DVector};

use super::LipschitzError;
use crate::tensor::Tensor;

/// Above this `min(rows, cols)` the norm is found by power iteration.
pub const SVD_LIMIT: usize = 64;
pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERS: usize = 1000;

/// Top singular triplet `J w = sigma u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Singular {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn dims(m: &Tensor) -> (usize, usize) {
    let d = m.shape().dims();
    match d.len() {
        0 => (1, 1),
        1 => (1, d[0]),
        _ => (d[0], m.numel() / d[0]),
    }
}

/// Operator 2-norm. Scalars and vectors are treated as `1 x n` matrices.
pub fn spectral_norm(m: &Tensor) -> Result<f64, LipschitzError> {
    top_singular(m).map(|s| s.sigma)
}

/// Largest singular value with its singular vectors. For a zero matrix the
/// vectors are zero.
pub fn top_singular(m: &Tensor) -> Result<Singular, LipschitzError> {
    if !m.is_finite() {
        return Err(LipschitzError::NonFinite);
    }
    let (r, c) = dims(m);
    let data = m.data();
    if r == 1 || c == 1 {
        let sigma = m.l2_norm();
        let unit: Vec<f64> = if sigma > 0.0 {
            data.iter().map(|x| x / sigma).collect()
        } else {
            vec![0.0; data.len()]
        };
        let one = vec![if sigma > 0.0 { 1.0 } else { 0.0 }];
        return Ok(if r == 1 {
            Singular { sigma, u: one, v: unit }
        } else {
            Singular { sigma, u: unit, v: one }
        });
    }
    let a = DMatrix::from_row_slice(r, c, data);
    if r.min(c) <= SVD_LIMIT {
        let svd = a.svd(true, true);
        let (k, &sigma) = svd
            .singular_values
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .expect("nonempty matrix");
        let u = svd.u.expect("requested u").column(k).iter().copied().collect();
        let v = svd.v_t.expect("requested v").row(k).iter().copied().collect();
        Ok(Singular { sigma, u, v })
    } else {
        Ok(power_iteration(&a))
    }
}

fn power_iteration(a: &DMatrix<f64>) -> Singular {
    let c = a.ncols();
    let mut v = DVector::from_element(c, 1.0 / (c as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = a.tr_mul(&(a * &v));
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        v = w / norm;
        let next = (a * &v).norm();
        let done = (next - sigma).abs() <= POWER_TOLERANCE * next;
        sigma = next;
        if done {
            break;
        }
    }
    let av = a * &v;
    let u = if sigma > 0.0 { av / sigma } else { av };
    Singular {
        sigma,
        u: u.iter().copied().collect(),
        v: v.iter().copied().collect(),
    }
}
