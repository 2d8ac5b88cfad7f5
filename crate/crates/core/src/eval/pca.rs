use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const POWER_ITERATIONS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `[N, 2]` coordinates along the two leading principal axes.
    pub coords: Tensor<f64>,
    /// Variance along each of the two axes.
    pub explained: [f64; 2],
    /// Trace of the covariance.
    pub total_variance: f64,
    /// Unit principal axes.
    pub axes: [Vec<f64>; 2],
}

/// Leading unit eigenvector and eigenvalue of symmetric `c: d×d` by power
/// iteration from the normalized all-ones vector.
fn power_method(c: &[f64], d: usize) -> (Vec<f64>, f64) {
    let mut v = vec![1.0 / libm::sqrt(d as f64); d];
    let mut w = vec![0.0; d];
    for _ in 0..POWER_ITERATIONS {
        mat_vec(c, &v, &mut w);
        let n = libm::sqrt(w.iter().map(|x| x * x).sum::<f64>());
        if n == 0.0 {
            return (v, 0.0);
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / n;
        }
    }
    mat_vec(c, &v, &mut w);
    let lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
    (v, lambda)
}

fn mat_vec(c: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = c[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// Projects mean-centred `features: [N, D]` onto the top two eigenvectors of
/// their covariance (`1/(N-1)` normalization), found by power iteration with
/// deflation.
pub fn pca_project<T: Scalar>(features: &Tensor<T>) -> Result<Projection> {
    if features.rank() != 2 {
        return Err(shape_err(
            "pca_project",
            format!("expected [N,D], got {:?}", features.shape()),
        ));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if n < 3 {
        return Err(invalid(format!("pca_project needs at least 3 points, got {n}")));
    }
    let x: Vec<f64> = features.data().iter().map(|&v| Scalar::to_f64(v)).collect();
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let xc: Vec<f64> = x
        .chunks(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in xc.chunks(d) {
        for i in 0..d {
            let ri = row[i];
            for j in i..d {
                cov[i * d + j] += ri * row[j];
            }
        }
    }
    let scale = 1.0 / (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] * scale;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let (v1, l1) = power_method(&cov, d);
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (v2, l2) = power_method(&cov, d);
    let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
    if !(total > 0.0) || l1 <= tol || l2 <= tol {
        return Err(Error::Degenerate(format!(
            "centred features have rank < 2 (variances {l1:.3e}, {l2:.3e} of total {total:.3e})"
        )));
    }
    let coords: Vec<f64> = xc
        .chunks(d)
        .flat_map(|row| {
            let a: f64 = row.iter().zip(&v1).map(|(x, v)| x * v).sum();
            let b: f64 = row.iter().zip(&v2).map(|(x, v)| x * v).sum();
            [a, b]
        })
        .collect();
    Ok(Projection {
        coords: Tensor::new(&[n, 2], coords)?,
        explained: [l1, l2],
        total_variance: total,
        axes: [v1, v2],
    })
}
