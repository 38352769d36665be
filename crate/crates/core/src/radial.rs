//! Radial geometry on a finite ball.
//!
//! Fields are sampled at `r_i = i h`, `i = 1..n`, with `h = r_max / n`. The
//! last node carries the Dirichlet condition and is pinned to zero. All
//! differential and spectral work happens on `w = r u`, for which the origin
//! condition `w(0) = 0` is exact; pointwise nonlinear work uses `u`.
//!
//! The discrete Laplacian is `(Delta u)_i = (w_{i-1} - 2 w_i + w_{i+1}) / (h^2 r_i)`
//! and every quadratic quantity is written so that it agrees with this
//! operator under summation by parts. Consequently the semi-discrete
//! Klein-Gordon flow has an exactly conserved discrete energy.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::dst::{dirichlet_eigenvalues, SineTransform};
use crate::error::{Error, Result};

/// Smallest admissible node count.
pub const MIN_NODES: usize = 64;

const FOUR_PI: f64 = 4.0 * PI;

/// Uniform radial grid on `(0, r_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialGrid {
    r_max: f64,
    n: usize,
    h: f64,
}

impl RadialGrid {
    pub fn new(r_max: f64, n: usize) -> Result<Self> {
        if !(r_max.is_finite() && r_max > 0.0) {
            return Err(Error::InvalidGrid(format!("r_max must be positive, got {r_max}")));
        }
        if n < MIN_NODES {
            return Err(Error::InvalidGrid(format!(
                "need at least {MIN_NODES} nodes, got {n}"
            )));
        }
        Ok(RadialGrid { r_max, n, h: r_max / n as f64 })
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Radius of the node with zero-based index `i` (that is, `r_{i+1}`).
    #[inline]
    pub fn r(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.h
    }

    /// Number of unknowns strictly inside the ball.
    pub fn interior(&self) -> usize {
        self.n - 1
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.r(i))
    }

    /// Same ball, `factor` times as many nodes.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        RadialGrid::new(self.r_max, self.n * factor)
    }

    /// Errors unless both grids are identical.
    pub fn check_same(&self, other: &RadialGrid) -> Result<()> {
        self.check(other)
    }

    fn check(&self, other: &RadialGrid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "(r_max {}, n {}) vs (r_max {}, n {})",
                self.r_max, self.n, other.r_max, other.n
            )))
        }
    }
}

/// Samples of a radial function `u(r_i)`. The boundary sample is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialField {
    grid: RadialGrid,
    values: Vec<f64>,
}

impl RadialField {
    pub fn zeros(grid: RadialGrid) -> Self {
        RadialField { grid, values: vec![0.0; grid.n] }
    }

    /// Validates length and finiteness; the boundary sample is pinned to zero.
    pub fn new(grid: RadialGrid, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n {
            return Err(Error::InvalidField(format!(
                "expected {} samples, got {}",
                grid.n,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!("non-finite sample at node {}", i + 1)));
        }
        values[grid.n - 1] = 0.0;
        Ok(RadialField { grid, values })
    }

    pub fn from_fn(grid: RadialGrid, f: impl Fn(f64) -> f64) -> Self {
        let mut values: Vec<f64> = grid.nodes().map(f).collect();
        values[grid.n - 1] = 0.0;
        RadialField { grid, values }
    }

    /// Builds a field from interior `w = r u` samples (length `n - 1`).
    pub fn from_w(grid: RadialGrid, w: &[f64]) -> Self {
        debug_assert_eq!(w.len(), grid.n - 1);
        let mut values = vec![0.0; grid.n];
        for (i, wi) in w.iter().enumerate() {
            values[i] = wi / grid.r(i);
        }
        RadialField { grid, values }
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Interior samples of `w = r u`.
    pub fn w(&self) -> Vec<f64> {
        (0..self.grid.n - 1).map(|i| self.grid.r(i) * self.values[i]).collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, a: f64) -> Self {
        RadialField { grid: self.grid, values: self.values.iter().map(|v| a * v).collect() }
    }

    /// `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &RadialField, b: f64) -> Result<Self> {
        self.grid.check(&other.grid)?;
        Ok(RadialField {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values: Vec<f64> =
            self.values.iter().enumerate().map(|(i, &v)| f(self.grid.r(i), v)).collect();
        values[self.grid.n - 1] = 0.0;
        RadialField { grid: self.grid, values }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl Add for &RadialField {
    type Output = RadialField;
    /// Panics on mismatched grids; use [`RadialField::lin_comb`] for a checked sum.
    fn add(self, rhs: &RadialField) -> RadialField {
        self.lin_comb(1.0, rhs, 1.0).expect("grid mismatch in field addition")
    }
}

impl Sub for &RadialField {
    type Output = RadialField;
    fn sub(self, rhs: &RadialField) -> RadialField {
        self.lin_comb(1.0, rhs, -1.0).expect("grid mismatch in field subtraction")
    }
}

impl Mul<&RadialField> for f64 {
    type Output = RadialField;
    fn mul(self, rhs: &RadialField) -> RadialField {
        rhs.scaled(self)
    }
}

impl Neg for &RadialField {
    type Output = RadialField;
    fn neg(self) -> RadialField {
        self.scaled(-1.0)
    }
}

/// A point `(u, u_t)` of the energy space together with its time stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub u: RadialField,
    pub udot: RadialField,
    pub t: f64,
}

impl State {
    pub fn new(u: RadialField, udot: RadialField, t: f64) -> Result<Self> {
        u.grid.check(&udot.grid)?;
        if !(u.is_finite() && udot.is_finite() && t.is_finite()) {
            return Err(Error::InvalidField("state has non-finite entries".into()));
        }
        Ok(State { u, udot, t })
    }

    pub fn at_rest(u: RadialField) -> Self {
        let udot = RadialField::zeros(u.grid);
        State { u, udot, t: 0.0 }
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.u.grid
    }

    /// `(u, -u_t)`: the initial datum of the time-reversed solution.
    pub fn reversed(&self) -> Self {
        State { u: self.u.clone(), udot: -&self.udot, t: self.t }
    }

    /// Energy-space norm squared `||u||_{H^1}^2 + ||u_t||_{L^2}^2`.
    pub fn h_norm_sq(&self) -> f64 {
        h1_sq(&self.u) + l2_sq(&self.udot)
    }
}

/// `4 pi int_0^{r_max} f g r^2 dr` by the trapezoidal rule on `(r f)(r g)`.
pub fn inner(f: &RadialField, g: &RadialField) -> Result<f64> {
    f.grid.check(&g.grid)?;
    Ok(inner_unchecked(f, g))
}

pub(crate) fn inner_unchecked(f: &RadialField, g: &RadialField) -> f64 {
    let grid = &f.grid;
    let h = grid.h;
    let mut acc = 0.0;
    for i in 0..grid.n - 1 {
        let r = grid.r(i);
        acc += r * r * f.values[i] * g.values[i];
    }
    FOUR_PI * h * acc
}

/// `||f||_{L^2}^2`.
pub fn l2_sq(f: &RadialField) -> f64 {
    inner_unchecked(f, f)
}

/// Discrete Dirichlet form `||grad f||^2 = <-Delta f | f>`.
pub fn grad_sq(f: &RadialField) -> f64 {
    let grid = &f.grid;
    let h = grid.h;
    let mut prev = 0.0;
    let mut acc = 0.0;
    for i in 0..grid.n {
        let w = if i + 1 < grid.n { grid.r(i) * f.values[i] } else { 0.0 };
        let d = w - prev;
        acc += d * d;
        prev = w;
    }
    FOUR_PI * acc / h
}

/// `||f||_{H^1}^2 = ||grad f||^2 + ||f||^2`.
pub fn h1_sq(f: &RadialField) -> f64 {
    grad_sq(f) + l2_sq(f)
}

/// `||f||_{L^4}^4`.
pub fn l4_pow4(f: &RadialField) -> f64 {
    let grid = &f.grid;
    let mut acc = 0.0;
    for i in 0..grid.n - 1 {
        let r = grid.r(i);
        let v = f.values[i];
        acc += r * r * v * v * v * v;
    }
    FOUR_PI * grid.h * acc
}

/// Second difference of `w = r f` divided by `r`, with `w_0 = w_n = 0`.
pub fn laplacian(f: &RadialField) -> RadialField {
    let grid = f.grid;
    let w = f.w();
    let mut out = neg_d2(&w, grid.h);
    for v in &mut out {
        *v = -*v;
    }
    RadialField::from_w(grid, &out)
}

/// `-D2 w` on interior samples with Dirichlet ends.
pub(crate) fn neg_d2(w: &[f64], h: f64) -> Vec<f64> {
    let m = w.len();
    let inv = 1.0 / (h * h);
    (0..m)
        .map(|i| {
            let left = if i > 0 { w[i - 1] } else { 0.0 };
            let right = if i + 1 < m { w[i + 1] } else { 0.0 };
            (2.0 * w[i] - left - right) * inv
        })
        .collect()
}

/// `(-Delta)^{-1} f` with the Dirichlet condition at `r_max`, by division of
/// sine coefficients by the discrete eigenvalues. Exact inverse of
/// `-laplacian` on the grid.
pub fn inverse_laplacian(f: &RadialField) -> RadialField {
    let grid = f.grid;
    let kappa2 = dirichlet_eigenvalues(grid.n, grid.h);
    let mut st = SineTransform::new(grid.n);
    let w = f.w();
    let mut coef = vec![0.0; grid.n - 1];
    st.forward(&w, &mut coef);
    for (c, k2) in coef.iter_mut().zip(&kappa2) {
        *c /= k2;
    }
    let mut out = vec![0.0; grid.n - 1];
    st.inverse(&coef, &mut out);
    RadialField::from_w(grid, &out)
}

/// Exact flow of the free equation `u_tt = Delta u - u` over time `dt`.
pub fn free_propagate(s: &State, dt: f64) -> State {
    let mut flow = FreeFlow::new(*s.grid());
    let (mut a, mut b) = flow.to_spectral(&s.u, &s.udot);
    flow.rotate(&mut a, &mut b, dt);
    let (u, udot) = flow.from_spectral(&a, &b);
    State { u, udot, t: s.t + dt }
}

/// Discrete free energy `(||u_t||^2 + ||grad u||^2 + ||u||^2) / 2`.
pub fn free_energy(s: &State) -> f64 {
    0.5 * (l2_sq(&s.udot) + h1_sq(&s.u))
}

/// Cached cosine/sine factors of a spectral rotation by `dt`.
#[derive(Debug, Clone)]
pub struct Rotation {
    dt: f64,
    cos: Vec<f64>,
    sin_over_omega: Vec<f64>,
    omega_sin: Vec<f64>,
}

impl Rotation {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `(a, b) <- (cos a + sin/omega b, -omega sin a + cos b)` per mode.
    pub fn apply(&self, a: &mut [f64], b: &mut [f64]) {
        for m in 0..a.len() {
            let (x, y) = (a[m], b[m]);
            a[m] = self.cos[m] * x + self.sin_over_omega[m] * y;
            b[m] = -self.omega_sin[m] * x + self.cos[m] * y;
        }
    }
}

/// Sine-spectral representation of the free Klein-Gordon group on a grid.
///
/// Spectral coefficients are those of `w = r u` and `w_t`.
#[derive(Debug, Clone)]
pub struct FreeFlow {
    grid: RadialGrid,
    transform: SineTransform,
    omega: Vec<f64>,
    kappa2: Vec<f64>,
}

impl FreeFlow {
    pub fn new(grid: RadialGrid) -> Self {
        let kappa2 = dirichlet_eigenvalues(grid.n, grid.h);
        let omega = kappa2.iter().map(|k2| (1.0 + k2).sqrt()).collect();
        FreeFlow { grid, transform: SineTransform::new(grid.n), omega, kappa2 }
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn kappa2(&self) -> &[f64] {
        &self.kappa2
    }

    pub fn transform(&mut self) -> &mut SineTransform {
        &mut self.transform
    }

    pub fn rotation(&self, dt: f64) -> Rotation {
        let mut cos = Vec::with_capacity(self.omega.len());
        let mut sin_over_omega = Vec::with_capacity(self.omega.len());
        let mut omega_sin = Vec::with_capacity(self.omega.len());
        for &w in &self.omega {
            let (s, c) = (w * dt).sin_cos();
            cos.push(c);
            sin_over_omega.push(s / w);
            omega_sin.push(w * s);
        }
        Rotation { dt, cos, sin_over_omega, omega_sin }
    }

    pub fn rotate(&self, a: &mut [f64], b: &mut [f64], dt: f64) {
        self.rotation(dt).apply(a, b);
    }

    pub fn to_spectral(&mut self, u: &RadialField, udot: &RadialField) -> (Vec<f64>, Vec<f64>) {
        let m = self.grid.n - 1;
        let (mut a, mut b) = (vec![0.0; m], vec![0.0; m]);
        self.transform.forward_pair(&u.w(), &udot.w(), &mut a, &mut b);
        (a, b)
    }

    pub fn from_spectral(&mut self, a: &[f64], b: &[f64]) -> (RadialField, RadialField) {
        let m = self.grid.n - 1;
        let (mut w, mut wd) = (vec![0.0; m], vec![0.0; m]);
        self.transform.inverse_pair(a, b, &mut w, &mut wd);
        (RadialField::from_w(self.grid, &w), RadialField::from_w(self.grid, &wd))
    }

    /// Parseval weight turning `sum_m a_m b_m` into the `L^2(R^3)` pairing.
    pub fn parseval_weight(&self) -> f64 {
        FOUR_PI * self.grid.h * 2.0 / self.grid.n as f64
    }

    /// `sum_m (omega_m^2 a_m^2 + b_m^2)`, the discrete free energy up to the
    /// factor `parseval_weight / 2`.
    pub fn spectral_energy(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.omega)
            .map(|((x, y), w)| w * w * x * x + y * y)
            .sum()
    }

    /// Energy-space norm squared of a spectral pair.
    pub fn h_norm_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        self.parseval_weight() * self.spectral_energy(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(r_max: f64, n: usize) -> RadialGrid {
        RadialGrid::new(r_max, n).unwrap()
    }

    #[test]
    fn grid_invariants() {
        let g = grid(60.0, 6144);
        assert!((g.h() * g.n() as f64 - g.r_max()).abs() < 1e-12);
        assert!(g.r(0) > 0.0);
        assert!((g.r(g.n() - 1) - 60.0).abs() < 1e-12);
        assert!(RadialGrid::new(10.0, 32).is_err());
        assert!(RadialGrid::new(-1.0, 128).is_err());
    }

    #[test]
    fn inner_of_zero_is_zero() {
        let g = grid(20.0, 256);
        let z = RadialField::zeros(g);
        let f = RadialField::from_fn(g, |r| (-r).exp());
        assert_eq!(inner(&z, &f).unwrap(), 0.0);
    }

    #[test]
    fn inner_single_node() {
        let g = grid(20.0, 256);
        let i = 17;
        let mut v = vec![0.0; g.n()];
        v[i] = 1.0;
        let f = RadialField::new(g, v).unwrap();
        let r = g.r(i);
        let expect = 4.0 * PI * r * r * g.h();
        assert!((inner(&f, &f).unwrap() - expect).abs() < 1e-14 * expect);
    }

    #[test]
    fn inner_gaussian_closed_form() {
        let g = grid(20.0, 4096);
        let f = RadialField::from_fn(g, |r| (-r * r / 2.0).exp());
        let got = inner(&f, &f).unwrap();
        let exact = PI.powf(1.5);
        assert!((got - exact).abs() < 1e-10 * exact, "{got} vs {exact}");
    }

    #[test]
    fn inner_rejects_mismatched_grids() {
        let a = RadialField::zeros(grid(20.0, 256));
        let b = RadialField::zeros(grid(20.0, 512));
        assert!(matches!(inner(&a, &b), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn laplacian_of_constant_vanishes_in_interior() {
        let g = grid(10.0, 128);
        let f = RadialField::from_fn(g, |_| 2.5);
        let lap = laplacian(&f);
        // w = 2.5 r is linear, so only the node next to the boundary sees it.
        for i in 0..g.n() - 2 {
            assert!(lap.values()[i].abs() < 1e-9, "node {i}: {}", lap.values()[i]);
        }
    }

    #[test]
    fn laplacian_sine_mode_eigenvalue() {
        let g = grid(12.0, 300);
        let k = PI / g.r_max();
        let f = RadialField::from_fn(g, |r| (k * r).sin() / r);
        let lap = laplacian(&f);
        let lam = 2.0 * (1.0 - (PI * g.h() / g.r_max()).cos()) / (g.h() * g.h());
        for i in 0..g.n() - 1 {
            let expect = -lam * f.values()[i];
            assert!((lap.values()[i] - expect).abs() < 1e-10 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn laplacian_exponential_second_order() {
        let errs: Vec<f64> = [400usize, 800]
            .iter()
            .map(|&n| {
                let g = grid(20.0, n);
                let f = RadialField::from_fn(g, |r| (-r).exp());
                let lap = laplacian(&f);
                (0..n - 1)
                    .filter(|&i| g.r(i) > 1.0 && g.r(i) < 15.0)
                    .map(|i| {
                        let r = g.r(i);
                        (lap.values()[i] - (1.0 - 2.0 / r) * (-r).exp()).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!(errs[0] < 1e-3);
        let order = (errs[0] / errs[1]).log2();
        assert!(order > 1.9, "order {order}");
    }

    #[test]
    fn inverse_laplacian_round_trip() {
        let g = grid(20.0, 512);
        let f = RadialField::from_fn(g, |r| (1.0 - r * r) * (-r * r).exp());
        let u = inverse_laplacian(&f);
        let back = laplacian(&u).scaled(-1.0);
        let err = (0..g.n() - 1).map(|i| (back.values()[i] - f.values()[i]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
        let z = inverse_laplacian(&RadialField::zeros(g));
        assert_eq!(z.sup_norm(), 0.0);
    }

    #[test]
    fn inverse_laplacian_on_a_mode() {
        let g = grid(8.0, 128);
        let m = 3.0;
        let f = RadialField::from_fn(g, |r| (m * PI * r / 8.0).sin() / r);
        let u = inverse_laplacian(&f);
        let s = (PI * m / (2.0 * g.n() as f64)).sin();
        let k2 = 4.0 * s * s / (g.h() * g.h());
        for i in 0..g.n() - 1 {
            assert!((u.values()[i] - f.values()[i] / k2).abs() < 1e-12);
        }
    }

    #[test]
    fn sine_modes_orthogonal_under_inner() {
        let g = grid(10.0, 256);
        let mode = |m: f64| RadialField::from_fn(g, move |r| (m * PI * r / 10.0).sin() / r);
        let (a, b) = (mode(2.0), mode(5.0));
        let ab = inner(&a, &b).unwrap();
        let aa = inner(&a, &a).unwrap();
        assert!(ab.abs() < 1e-10 * aa);
    }

    #[test]
    fn laplacian_symmetric() {
        let g = grid(15.0, 400);
        let f = RadialField::from_fn(g, |r| (-(r - 3.0).powi(2)).exp());
        let q = RadialField::from_fn(g, |r| r.cos() * (-r / 2.0).exp());
        let lhs = inner(&laplacian(&f), &q).unwrap();
        let rhs = inner(&f, &laplacian(&q)).unwrap();
        let scale = l2_sq(&f).sqrt() * l2_sq(&q).sqrt();
        assert!((lhs - rhs).abs() <= 1e-10 * scale);
        // the Dirichlet form agrees with <-Delta f|f>
        let gsq = grad_sq(&f);
        assert!((gsq + inner(&laplacian(&f), &f).unwrap()).abs() < 1e-10 * gsq);
    }

    #[test]
    fn free_propagate_identity_and_one_mode() {
        let g = grid(10.0, 256);
        let m = 4.0;
        let mode = RadialField::from_fn(g, |r| (m * PI * r / 10.0).sin() / r);
        let s = State::at_rest(mode.clone());
        let same = free_propagate(&s, 0.0);
        for i in 0..g.n() {
            assert!((same.u.values()[i] - s.u.values()[i]).abs() < 1e-13);
        }
        let dt = 0.731;
        let out = free_propagate(&s, dt);
        let sn = (PI * m / (2.0 * g.n() as f64)).sin();
        let omega = (1.0 + 4.0 * sn * sn / (g.h() * g.h())).sqrt();
        let c = (omega * dt).cos();
        for i in 0..g.n() - 1 {
            assert!((out.u.values()[i] - c * mode.values()[i]).abs() < 1e-12 * (1.0 + mode.values()[i].abs()));
        }
        let e0 = free_energy(&s);
        let e1 = free_energy(&out);
        assert!((e0 - e1).abs() < 1e-12 * e0);
        assert!((out.t - dt).abs() < 1e-15);
    }

    #[test]
    fn free_propagate_reversible() {
        let g = grid(20.0, 512);
        let u = RadialField::from_fn(g, |r| (-(r - 2.0).powi(2)).exp());
        let udot = RadialField::from_fn(g, |r| r * (-r * r).exp());
        let s = State::new(u, udot, 0.0).unwrap();
        let back = free_propagate(&free_propagate(&s, 3.3), -3.3);
        let diff = State { u: &back.u - &s.u, udot: &back.udot - &s.udot, t: 0.0 };
        assert!(diff.h_norm_sq().sqrt() < 1e-12 * s.h_norm_sq().sqrt());
    }

    #[test]
    fn spectral_energy_matches_physical() {
        let g = grid(20.0, 512);
        let u = RadialField::from_fn(g, |r| (-(r - 2.0).powi(2)).exp());
        let udot = RadialField::from_fn(g, |r| (-r).exp());
        let s = State::new(u.clone(), udot.clone(), 0.0).unwrap();
        let mut flow = FreeFlow::new(g);
        let (a, b) = flow.to_spectral(&u, &udot);
        let spectral = 0.5 * flow.h_norm_sq(&a, &b);
        let physical = free_energy(&s);
        assert!((spectral - physical).abs() < 1e-12 * physical);
    }
}
