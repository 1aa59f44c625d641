//! Dense Cholesky factorization for the small SPD systems the GP needs.

/// Diagonal jitter ladder tried after a plain factorization fails.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let split = n - n % 4;
    for (ca, cb) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    let tail: f64 = a[split..].iter().zip(&b[split..]).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Lower-triangular factor `L` with `L Lᵀ = A + jitter·I`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Factors a row-major symmetric matrix; `None` if not positive definite.
    pub fn factor(a: &[f64], n: usize) -> Option<Self> {
        Self::factor_shifted(a, n, 0.0)
    }

    fn factor_shifted(a: &[f64], n: usize, shift: f64) -> Option<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                if i == j {
                    s += shift;
                }
                let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
                s -= dot(ri, rj);
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Some(Cholesky {
            n,
            l,
            jitter: shift,
        })
    }

    /// Plain factorization first, then jitter 1e-10, 1e-9, ... up to 1e-4.
    pub fn factor_with_jitter(a: &[f64], n: usize) -> Option<Self> {
        if let Some(c) = Self::factor(a, n) {
            return Some(c);
        }
        let mut jitter = JITTER_START;
        while jitter <= JITTER_MAX * (1.0 + 1e-9) {
            if let Some(c) = Self::factor_shifted(a, n, jitter) {
                return Some(c);
            }
            jitter *= 10.0;
        }
        None
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    #[cfg(test)]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.n + j]
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s = dot(row, &y[..i]);
            y[i] = (y[i] - s) / self.l[i * n + i];
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n)
            .map(|i| self.l[i * self.n + i].ln())
            .sum::<f64>()
    }

    /// Full inverse of `L Lᵀ`, row-major.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        // L⁻¹ row by row, then (L⁻¹)ᵀ L⁻¹; all inner loops run along rows.
        let mut linv = vec![0.0; n * n];
        let mut row = vec![0.0; n];
        for i in 0..n {
            row[..=i].iter_mut().for_each(|v| *v = 0.0);
            row[i] = 1.0;
            for k in 0..i {
                let c = self.l[i * n + k];
                if c != 0.0 {
                    let prev = &linv[k * n..k * n + k + 1];
                    row[..=k]
                        .iter_mut()
                        .zip(prev)
                        .for_each(|(r, p)| *r -= c * p);
                }
            }
            let d = self.l[i * n + i];
            for (dst, v) in linv[i * n..i * n + i + 1].iter_mut().zip(&row[..=i]) {
                *dst = v / d;
            }
        }
        let mut inv = vec![0.0; n * n];
        for k in 0..n {
            let lk = &linv[k * n..k * n + k + 1];
            for i in 0..=k {
                let a = lk[i];
                if a != 0.0 {
                    inv[i * n..i * n + i + 1]
                        .iter_mut()
                        .zip(&lk[..=i])
                        .for_each(|(v, b)| *v += a * b);
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                inv[j * n + i] = inv[i * n + j];
            }
        }
        inv
    }

    /// Factor of the matrix grown by one row/column: `cross` holds the new
    /// off-diagonal entries and `diag` the new diagonal entry (before jitter).
    pub fn append(&self, cross: &[f64], diag: f64) -> Option<Self> {
        let n = self.n;
        let row = self.solve_lower(cross);
        let d2 = diag + self.jitter - row.iter().map(|v| v * v).sum::<f64>();
        if !(d2 > 0.0) {
            return None;
        }
        let m = n + 1;
        let mut l = vec![0.0; m * m];
        for i in 0..n {
            l[i * m..i * m + i + 1].copy_from_slice(&self.l[i * n..i * n + i + 1]);
        }
        l[n * m..n * m + n].copy_from_slice(&row);
        l[n * m + n] = d2.sqrt();
        Some(Cholesky {
            n: m,
            l,
            jitter: self.jitter,
        })
    }
}
