//! Minimal row-major matrix used throughout the crate.
//!
//! Dimensions here are small (hundreds of rows, a few thousand columns), so
//! a plain `Vec<f64>` with explicit indexing keeps every computation easy to
//! audit and bit-for-bit reproducible.

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds from row slices; panics if rows have unequal lengths.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1))
    }
}

/// Inner product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense affine map `w * x + b` where `w` is row-major `out_dim x in_dim`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(b.len(), out_dim);
    debug_assert_eq!(x.len(), in_dim);
    let mut out = Vec::with_capacity(out_dim);
    for r in 0..out_dim {
        out.push(dot(&w[r * in_dim..(r + 1) * in_dim], x) + b[r]);
    }
    out
}

/// Gradient pieces of an affine map given upstream `dout`:
/// `dw += dout (x) x`, `db += dout`, and optionally `dx += w^T dout`.
pub fn affine_backward(
    w: &[f64],
    x: &[f64],
    dout: &[f64],
    in_dim: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let out_dim = dout.len();
    debug_assert_eq!(dw.len(), out_dim * in_dim);
    debug_assert_eq!(db.len(), out_dim);
    for r in 0..out_dim {
        let g = dout[r];
        if g != 0.0 {
            axpy(g, x, &mut dw[r * in_dim..(r + 1) * in_dim]);
        }
        db[r] += g;
    }
    if let Some(dx) = dx {
        debug_assert_eq!(dx.len(), in_dim);
        for r in 0..out_dim {
            let g = dout[r];
            if g != 0.0 {
                axpy(g, &w[r * in_dim..(r + 1) * in_dim], dx);
            }
        }
    }
}

/// Numerically stable log(sum(exp(x))) with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Stable log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
