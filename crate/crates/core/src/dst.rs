//! Type-I discrete sine transform on the interior nodes of a radial grid.
//!
//! For a grid with `n` nodes the interior has `n - 1` unknowns
//! `x_1 .. x_{n-1}` (the node `n` is the Dirichlet boundary). The transform is
//!
//! ```text
//! S_m = sum_j x_j sin(pi j m / n),        m = 1 .. n-1
//! x_j = (2 / n) sum_m S_m sin(pi j m / n)
//! ```
//!
//! computed through a complex FFT of length `2n` on the odd extension. Two real
//! sequences share one FFT by packing them into the real and imaginary parts.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

fn planned(len: usize) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<Mutex<(FftPlanner<f64>, HashMap<usize, Arc<dyn Fft<f64>>>)>> =
        OnceLock::new();
    let cell = PLANS.get_or_init(|| Mutex::new((FftPlanner::new(), HashMap::new())));
    let mut guard = cell.lock().expect("fft plan cache poisoned");
    let (planner, plans) = &mut *guard;
    plans
        .entry(len)
        .or_insert_with(|| planner.plan_fft_forward(len))
        .clone()
}

/// Sine transform for a fixed node count, with its own scratch buffers.
pub struct SineTransform {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Clone for SineTransform {
    fn clone(&self) -> Self {
        SineTransform::new(self.n)
    }
}

impl std::fmt::Debug for SineTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SineTransform").field("n", &self.n).finish()
    }
}

impl SineTransform {
    /// Transform for `n` grid nodes, i.e. `n - 1` interior unknowns.
    pub fn new(n: usize) -> Self {
        let fft = planned(2 * n);
        let scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        SineTransform {
            n,
            fft,
            buf: vec![Complex64::new(0.0, 0.0); 2 * n],
            scratch,
        }
    }

    pub fn interior_len(&self) -> usize {
        self.n - 1
    }

    fn run(&mut self, x: &[f64], y: Option<&[f64]>) {
        let n = self.n;
        debug_assert_eq!(x.len(), n - 1);
        let buf = &mut self.buf;
        buf[0] = Complex64::new(0.0, 0.0);
        buf[n] = Complex64::new(0.0, 0.0);
        match y {
            Some(y) => {
                for j in 1..n {
                    let z = Complex64::new(x[j - 1], y[j - 1]);
                    buf[j] = z;
                    buf[2 * n - j] = -z;
                }
            }
            None => {
                for j in 1..n {
                    let z = Complex64::new(x[j - 1], 0.0);
                    buf[j] = z;
                    buf[2 * n - j] = -z;
                }
            }
        }
        self.fft.process_with_scratch(buf, &mut self.scratch);
    }

    /// Forward transform of one sequence: `out[m-1] = S_m`.
    pub fn forward(&mut self, x: &[f64], out: &mut [f64]) {
        self.run(x, None);
        for m in 1..self.n {
            out[m - 1] = -0.5 * self.buf[m].im;
        }
    }

    /// Forward transform of two sequences with a single FFT.
    pub fn forward_pair(&mut self, x: &[f64], y: &[f64], sx: &mut [f64], sy: &mut [f64]) {
        self.run(x, Some(y));
        for m in 1..self.n {
            let z = self.buf[m];
            sx[m - 1] = -0.5 * z.im;
            sy[m - 1] = 0.5 * z.re;
        }
    }

    /// Inverse transform of one coefficient sequence.
    pub fn inverse(&mut self, s: &[f64], out: &mut [f64]) {
        self.run(s, None);
        let scale = 2.0 / self.n as f64;
        for j in 1..self.n {
            out[j - 1] = -0.5 * scale * self.buf[j].im;
        }
    }

    /// Inverse transform of two coefficient sequences with a single FFT.
    pub fn inverse_pair(&mut self, sx: &[f64], sy: &[f64], x: &mut [f64], y: &mut [f64]) {
        self.run(sx, Some(sy));
        let scale = 2.0 / self.n as f64;
        for j in 1..self.n {
            let z = self.buf[j];
            x[j - 1] = -0.5 * scale * z.im;
            y[j - 1] = 0.5 * scale * z.re;
        }
    }
}

/// Eigenvalues `kappa_m^2 = 4 sin^2(pi m / 2n) / h^2` of the second-difference
/// operator `-D2` with Dirichlet ends, for `m = 1 .. n-1`.
pub fn dirichlet_eigenvalues(n: usize, h: f64) -> Vec<f64> {
    (1..n)
        .map(|m| {
            let s = (std::f64::consts::PI * m as f64 / (2.0 * n as f64)).sin();
            4.0 * s * s / (h * h)
        })
        .collect()
}
