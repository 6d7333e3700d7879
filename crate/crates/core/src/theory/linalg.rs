//! Small dense symmetric linear algebra.

/// Square row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        Self {
            n,
            data: (0..n * n).map(|k| f(k / n, k % n)).collect(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        Matrix::from_fn(n, |i, j| (0..n).map(|k| self.get(i, k) * other.get(k, j)).sum())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.n, |i, j| self.get(j, i))
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        Matrix::from_fn(self.n, |i, j| self.get(i, j) - other.get(i, j))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Gauss–Jordan inverse with partial pivoting; `None` when singular.
    pub fn inverse(&self) -> Option<Matrix> {
        let n = self.n;
        let mut a = self.data.clone();
        let mut inv = Matrix::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 }).data;
        for col in 0..n {
            let pivot = (col..n).max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))?;
            if a[pivot * n + col].abs() < 1e-300 {
                return None;
            }
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
                inv.swap(col * n + k, pivot * n + k);
            }
            let d = a[col * n + col];
            for k in 0..n {
                a[col * n + k] /= d;
                inv[col * n + k] /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = a[r * n + col];
                    if f != 0.0 {
                        for k in 0..n {
                            a[r * n + k] -= f * a[col * n + k];
                            inv[r * n + k] -= f * inv[col * n + k];
                        }
                    }
                }
            }
        }
        Some(Matrix { n, data: inv })
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.n;
    let mut a = m.data.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= 1e-30 * diag.max(1e-300) || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// Spectral norm of a symmetric matrix.
pub fn symmetric_norm(m: &Matrix) -> f64 {
    symmetric_eigenvalues(m).iter().fold(0.0, |acc, e| acc.max(e.abs()))
}

/// XᵀX for a row-major n × p design.
pub fn gram(x: &[f64], n: usize, p: usize) -> Matrix {
    Matrix::from_fn(p, |i, j| (0..n).map(|r| x[r * p + i] * x[r * p + j]).sum())
}
