//! Symmetric tridiagonal matrices: products, Sturm counts, bisection,
//! pivoted solves and inverse iteration.

use crate::error::{Error, Result};

/// Symmetric tridiagonal matrix with diagonal `diag` and off-diagonal `off`
/// (`off[i]` couples `i` and `i + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiag {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiag {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Self {
        assert_eq!(off.len() + 1, diag.len(), "off-diagonal must be one shorter");
        SymTridiag { diag, off }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let m = self.len();
        let mut y = vec![0.0; m];
        for i in 0..m {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < m {
                acc += self.off[i] * x[i + 1];
            }
            y[i] = acc;
        }
        y
    }

    /// Number of eigenvalues strictly below `x`.
    pub fn sturm_count(&self, x: f64) -> usize {
        let mut count = 0;
        let mut q = 1.0;
        for i in 0..self.len() {
            let e2 = if i > 0 { self.off[i - 1] * self.off[i - 1] } else { 0.0 };
            q = self.diag[i] - x - if i > 0 { e2 / q } else { 0.0 };
            if q == 0.0 {
                q = -f64::EPSILON * (self.diag[i].abs() + x.abs() + 1.0);
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    /// Gershgorin enclosure of the spectrum.
    pub fn gershgorin(&self) -> (f64, f64) {
        let m = self.len();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..m {
            let mut rad = 0.0;
            if i > 0 {
                rad += self.off[i - 1].abs();
            }
            if i + 1 < m {
                rad += self.off[i].abs();
            }
            lo = lo.min(self.diag[i] - rad);
            hi = hi.max(self.diag[i] + rad);
        }
        (lo, hi)
    }

    /// The `j`-th smallest eigenvalue (zero-based) by Sturm bisection.
    pub fn eigenvalue(&self, j: usize, tol: f64) -> f64 {
        let (mut lo, mut hi) = self.gershgorin();
        while hi - lo > tol * (1.0 + lo.abs().max(hi.abs())) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.sturm_count(mid) > j {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Solves `(T - shift) x = b` by Gaussian elimination with partial pivoting.
    pub fn solve_shifted(&self, shift: f64, b: &[f64]) -> Result<Vec<f64>> {
        let m = self.len();
        if m == 0 {
            return Ok(Vec::new());
        }
        // lower band dl, diagonal d, upper bands du, du2 (fill-in from pivoting)
        let mut dl = self.off.clone();
        let mut d: Vec<f64> = self.diag.iter().map(|v| v - shift).collect();
        let mut du = self.off.clone();
        let mut du2 = vec![0.0; m.saturating_sub(2)];
        let mut x = b.to_vec();
        for i in 0..m - 1 {
            if d[i].abs() >= dl[i].abs() {
                if d[i] == 0.0 {
                    return Err(Error::Eigen("singular tridiagonal system".into()));
                }
                let f = dl[i] / d[i];
                d[i + 1] -= f * du[i];
                x[i + 1] -= f * x[i];
                dl[i] = 0.0;
            } else {
                let f = d[i] / dl[i];
                d[i] = dl[i];
                let tmp = d[i + 1];
                d[i + 1] = du[i] - f * tmp;
                if i + 2 < m {
                    du2[i] = du[i + 1];
                    du[i + 1] = -f * du2[i];
                }
                du[i] = tmp;
                x.swap(i, i + 1);
                x[i + 1] -= f * x[i];
            }
        }
        if d[m - 1] == 0.0 {
            return Err(Error::Eigen("singular tridiagonal system".into()));
        }
        x[m - 1] /= d[m - 1];
        if m > 1 {
            x[m - 2] = (x[m - 2] - du[m - 2] * x[m - 1]) / d[m - 2];
        }
        for i in (0..m.saturating_sub(2)).rev() {
            x[i] = (x[i] - du[i] * x[i + 1] - du2[i] * x[i + 2]) / d[i];
        }
        Ok(x)
    }

    /// Eigenvector for an eigenvalue estimate `lambda` by inverse iteration.
    /// Returns the Rayleigh quotient and the unit (Euclidean) vector.
    pub fn inverse_iteration(&self, lambda: f64, start: &[f64], tol: f64, max_iter: usize) -> Result<(f64, Vec<f64>)> {
        let m = self.len();
        let scale = self.diag.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        // a tiny offset keeps the shifted matrix nonsingular without hurting convergence
        let shift = lambda - 1e-10 * scale;
        let mut v = start.to_vec();
        normalize(&mut v);
        let mut prev = f64::NAN;
        for _ in 0..max_iter {
            let mut y = self.solve_shifted(shift, &v)?;
            normalize(&mut y);
            if y.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
                y.iter_mut().for_each(|a| *a = -*a);
            }
            let ty = self.matvec(&y);
            let rq: f64 = ty.iter().zip(&y).map(|(a, b)| a * b).sum();
            let res: f64 = ty.iter().zip(&y).map(|(a, b)| (a - rq * b).powi(2)).sum::<f64>().sqrt();
            v = y;
            if res <= tol * scale || (rq - prev).abs() <= f64::EPSILON * scale * m as f64 && res <= 1e3 * tol * scale {
                return Ok((rq, v));
            }
            prev = rq;
        }
        Err(Error::Eigen(format!("inverse iteration stalled after {max_iter} sweeps")))
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
}
