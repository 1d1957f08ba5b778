//! Small dense helpers for n×n symmetric positive definite systems.

/// Lower-triangular Cholesky factor of a row-major SPD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Returns `None` when the matrix is not numerically positive definite.
    pub fn factor(a: &[f64], n: usize) -> Option<Cholesky> {
        debug_assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[i * n + j];
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return None;
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        Some(Cholesky { n, l })
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut sum = y[i];
            for k in 0..i {
                sum -= self.l[i * n + k] * y[k];
            }
            y[i] = sum / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= self.l[k * n + i] * y[k];
            }
            y[i] = sum / self.l[i * n + i];
        }
        y
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `m` is rows×cols row-major; returns m·x.
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), cols);
    (0..rows).map(|r| dot(&m[r * cols..(r + 1) * cols], x)).collect()
}

/// Returns mᵀ·y for a rows×cols matrix.
pub fn matvec_t(m: &[f64], rows: usize, cols: usize, y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(y.len(), rows);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let yr = y[r];
        for (o, v) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += yr * v;
        }
    }
    out
}

/// Adds scale·a·bᵀ into the row-major `m`.
pub fn add_outer(m: &mut [f64], a: &[f64], b: &[f64], scale: f64) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        let s = scale * ar;
        for (o, bv) in m[r * cols..(r + 1) * cols].iter_mut().zip(b) {
            *o += s * bv;
        }
    }
}
