//! Shared math kernels: batch Gaussian moments, diagonal-Gaussian KL,
//! closed-form Gaussian mutual information, central finite differences, and
//! a two-component PCA projection.
//!
//! These are the primitives the loss layer and the evaluation exports build
//! on, so each one is kept small, allocation-light, and pinned by an
//! independent oracle in the tests below.

use crate::mat::Mat;
use crate::{DmiError, Result};

/// Variance floor applied per dimension to keep downstream KL terms finite.
pub const VAR_FLOOR: f64 = 1e-6;

/// Per-dimension mean and variance of a batch, treated as a diagonal
/// Gaussian. Variances are population variances (divide by n) and are
/// floored at [`VAR_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Two-pass batch moments over the rows of `batch`.
///
/// Errors with `BatchTooSmall` when fewer than two rows are supplied, since
/// a single point has no spread to estimate.
pub fn gaussian_moments(batch: &Mat) -> Result<GaussianStats> {
    let n = batch.rows;
    if n < 2 {
        return Err(DmiError::BatchTooSmall(format!(
            "gaussian_moments needs at least 2 rows, got {n}"
        )));
    }
    let m = batch.cols;
    let mut mean = vec![0.0; m];
    for row in batch.iter_rows() {
        for (acc, x) in mean.iter_mut().zip(row) {
            *acc += x;
        }
    }
    for acc in &mut mean {
        *acc /= n as f64;
    }
    let mut var = vec![0.0; m];
    for row in batch.iter_rows() {
        for c in 0..m {
            let d = row[c] - mean[c];
            var[c] += d * d;
        }
    }
    for v in &mut var {
        *v = (*v / n as f64).max(VAR_FLOOR);
    }
    Ok(GaussianStats { mean, var })
}

/// KL divergence KL(a || b) between diagonal Gaussians, summed over
/// dimensions:
///
/// `sum_c 0.5*ln(vb/va) + (va + (mb-ma)^2) / (2*vb) - 0.5`
pub fn kl_diag_gauss(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() || a.var.len() != b.var.len() || a.mean.len() != a.var.len() {
        return Err(DmiError::LengthMismatch(format!(
            "kl_diag_gauss stats have lengths {}/{} vs {}/{}",
            a.mean.len(),
            a.var.len(),
            b.mean.len(),
            b.var.len()
        )));
    }
    let mut kl = 0.0;
    for c in 0..a.mean.len() {
        let dm = b.mean[c] - a.mean[c];
        kl += 0.5 * (b.var[c] / a.var[c]).ln() + (a.var[c] + dm * dm) / (2.0 * b.var[c]) - 0.5;
    }
    Ok(kl)
}

/// Exact mutual information, in nats, between two jointly Gaussian vectors
/// whose coordinates are independently correlated with coefficients `rho`:
///
/// `I = -0.5 * sum_j ln(1 - rho_j^2)`
///
/// Errors with `CorrelationOutOfRange` unless every `|rho_j| < 1`.
pub fn gaussian_mi_true(rho: &[f64]) -> Result<f64> {
    let mut mi = 0.0;
    for (j, r) in rho.iter().enumerate() {
        if !r.is_finite() || r.abs() >= 1.0 {
            return Err(DmiError::CorrelationOutOfRange(format!(
                "rho[{j}] = {r} is not strictly inside (-1, 1)"
            )));
        }
        mi += -0.5 * (1.0 - r * r).ln();
    }
    Ok(mi)
}

/// Central-difference gradient estimate `(f(x+h e_i) - f(x-h e_i)) / (2h)`.
///
/// Errors with `NonFiniteEvaluation` carrying the coordinate index whose
/// perturbed evaluation produced a NaN or infinity.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(DmiError::NonFiniteEvaluation(i));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Output of [`pca2`]: per-point coordinates along the two leading principal
/// axes and the corresponding explained variances (covariance eigenvalues).
#[derive(Debug, Clone)]
pub struct Projection2d {
    /// `n x 2` projected coordinates.
    pub coords: Mat,
    /// Eigenvalues of the covariance matrix for the two kept axes,
    /// descending.
    pub explained: [f64; 2],
    /// The two principal axes as rows (`2 x m`), each with its first
    /// non-negligible loading made positive.
    pub axes: Mat,
}

/// Projects `points` (`n x m`) onto their two leading principal axes.
///
/// Covariance uses the population convention (divide by n). Requires at
/// least 3 points; errors with `DegenerateData` when the input has zero
/// total variance (all points identical).
pub fn pca2(points: &Mat) -> Result<Projection2d> {
    let n = points.rows;
    let m = points.cols;
    if n < 3 {
        return Err(DmiError::DegenerateData(format!(
            "pca2 needs at least 3 points, got {n}"
        )));
    }
    let mut mean = vec![0.0; m];
    for row in points.iter_rows() {
        for (acc, x) in mean.iter_mut().zip(row) {
            *acc += x;
        }
    }
    for acc in &mut mean {
        *acc /= n as f64;
    }
    let mut centered = Mat::zeros(n, m);
    for r in 0..n {
        for c in 0..m {
            centered.set(r, c, points.get(r, c) - mean[c]);
        }
    }
    // Population covariance, m x m.
    let mut cov = Mat::zeros(m, m);
    for row in centered.iter_rows() {
        for i in 0..m {
            let xi = row[i];
            if xi != 0.0 {
                for j in i..m {
                    cov.data[i * m + j] += xi * row[j];
                }
            }
        }
    }
    for i in 0..m {
        for j in i..m {
            let v = cov.get(i, j) / n as f64;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    let total_var: f64 = (0..m).map(|i| cov.get(i, i)).sum();
    if total_var <= 0.0 {
        return Err(DmiError::DegenerateData(
            "pca2 input has zero variance (rank 0)".into(),
        ));
    }
    let (eigvals, eigvecs) = jacobi_eigen(&cov);
    // Order eigenpairs by descending eigenvalue, index as tie-break.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eigvals[b]
            .partial_cmp(&eigvals[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut axes = Mat::zeros(2, m);
    let mut explained = [0.0; 2];
    for slot in 0..2 {
        if slot >= m {
            break; // 1-dim input: second axis stays zero
        }
        let e = order[slot];
        explained[slot] = eigvals[e];
        for c in 0..m {
            axes.set(slot, c, eigvecs.get(c, e));
        }
        fix_axis_sign(axes.row_mut(slot));
    }
    let mut coords = Mat::zeros(n, 2);
    for r in 0..n {
        let row = centered.row(r);
        coords.set(r, 0, crate::mat::dot(row, axes.row(0)));
        coords.set(r, 1, crate::mat::dot(row, axes.row(1)));
    }
    Ok(Projection2d { coords, explained, axes })
}

/// Deterministic sign convention: the first loading whose magnitude exceeds
/// a small relative threshold is made positive.
fn fix_axis_sign(axis: &mut [f64]) {
    let max_abs = axis.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if max_abs == 0.0 {
        return;
    }
    let thresh = 1e-12 * max_abs;
    for x in axis.iter() {
        if x.abs() > thresh {
            if *x < 0.0 {
                for v in axis.iter_mut() {
                    *v = -*v;
                }
            }
            return;
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvector matrix with eigenvectors as columns).
fn jacobi_eigen(sym: &Mat) -> (Vec<f64>, Mat) {
    let m = sym.rows;
    let mut a = sym.clone();
    let mut v = Mat::zeros(m, m);
    for i in 0..m {
        v.set(i, i, 1.0);
    }
    let scale: f64 = sym
        .data
        .iter()
        .fold(0.0f64, |acc, x| acc.max(x.abs()))
        .max(1.0);
    let tol = 1e-30 * scale * scale;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..m {
            for q in (p + 1)..m {
                let apq = a.get(p, q);
                off += apq * apq;
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..m {
            for q in (p + 1)..m {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..m {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, c * aip - s * aiq);
                    a.set(i, q, s * aip + c * aiq);
                }
                for i in 0..m {
                    let api = a.get(p, i);
                    let aqi = a.get(q, i);
                    a.set(p, i, c * api - s * aqi);
                    a.set(q, i, s * api + c * aqi);
                }
                for i in 0..m {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    let eigvals = (0..m).map(|i| a.get(i, i)).collect();
    (eigvals, v)
}
