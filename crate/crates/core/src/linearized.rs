//! Linearization about `Q`: the operator `L+ = -Delta + 1 - 3 Q^2`, its
//! negative eigenpair `(-k^2, rho)`, the radial Birman-Schwinger spectrum of
//! `3 Q (-Delta)^{-1} Q`, and the splitting `u = sigma [Q + lambda rho + gamma]`.
//!
//! Everything acts on `w = r u`, where `L+` is a symmetric tridiagonal matrix
//! and the `L^2(R^3)` pairing is `4 pi h` times the Euclidean one.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

use crate::ground_state::{cache_path, lplus_matrix, read_cache, shoot_q, write_cache, CacheEntry, GroundStateData, GS_TOL};
use crate::radial::{h1_sq, inner_unchecked, l2_sq, RadialField, RadialGrid, State};
use crate::tridiag::SymTridiag;

/// Threshold certified by the Birman-Schwinger gap.
pub const BS_GAP: f64 = 0.98;

/// Value reported in the literature for the fifth eigenvalue of the full
/// three-dimensional operator (all angular sectors).
pub const BS_REFERENCE_FIFTH: f64 = 0.97039244;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    pub k: f64,
    pub rho: RadialField,
    /// Number of negative eigenvalues of the discrete radial `L+`.
    pub n_neg: usize,
    /// Leading radial Birman-Schwinger eigenvalues, descending.
    pub bs_top: Vec<f64>,
}

impl SpectralData {
    pub fn grid(&self) -> &RadialGrid {
        self.rho.grid()
    }

    /// Exactly one eigenvalue above 1 and the next one below [`BS_GAP`].
    pub fn bs_gap_ok(&self) -> bool {
        self.bs_top.len() >= 2 && self.bs_top[0] > 1.0 && self.bs_top[1] < BS_GAP
    }
}

/// Discrete `L+` acting on interior `w` samples.
pub fn assemble_lplus(gs: &GroundStateData) -> SymTridiag {
    lplus_matrix(&gs.q.w(), gs.grid())
}

/// `-Delta + 1 - 3 q^2` for an arbitrary profile `q`.
pub fn lplus_about(q: &RadialField) -> SymTridiag {
    lplus_matrix(&q.w(), q.grid())
}

/// `L+ f` as a field.
pub fn apply_lplus(l: &SymTridiag, f: &RadialField) -> RadialField {
    RadialField::from_w(*f.grid(), &l.matvec(&f.w()))
}

/// `<L+ f | f>`.
pub fn lplus_form(l: &SymTridiag, f: &RadialField) -> f64 {
    let w = f.w();
    let lw = l.matvec(&w);
    4.0 * PI * f.grid().h() * w.iter().zip(&lw).map(|(a, b)| a * b).sum::<f64>()
}

/// Lowest eigenpair of `l`: returns `(k, rho, n_neg)` with `-k^2` the
/// eigenvalue, `||rho||_{L^2} = 1` and `rho >= 0`.
pub fn eig_ground(l: &SymTridiag, grid: RadialGrid, tol: f64) -> Result<(f64, RadialField, usize)> {
    let n_neg = l.sturm_count(0.0);
    let lam = l.eigenvalue(0, 1e-15);
    if lam >= 0.0 {
        return Err(Error::Eigen(format!("lowest eigenvalue {lam} is not negative")));
    }
    // start from a decaying positive profile, which overlaps the ground mode
    let start: Vec<f64> = (0..l.len()).map(|i| grid.r(i) * (-grid.r(i)).exp()).collect();
    let (rq, mut v) = l.inverse_iteration(lam, &start, tol, 200)?;
    if rq >= 0.0 {
        return Err(Error::Eigen(format!("Rayleigh quotient {rq} is not negative")));
    }
    let scale = 1.0 / (4.0 * PI * grid.h()).sqrt();
    let sum: f64 = v.iter().sum();
    let sign = if sum < 0.0 { -scale } else { scale };
    v.iter_mut().for_each(|a| *a *= sign);
    Ok(((-rq).sqrt(), RadialField::from_w(grid, &v), n_neg))
}

/// Tridiagonal `-D2` with `w(0) = 0` and a free far end: the inverse of the
/// matrix `h * min(r_i, r_j)`, i.e. of the whole-space radial Green function.
fn green_inverse(m: usize, h: f64) -> SymTridiag {
    let inv = 1.0 / (h * h);
    let mut diag = vec![2.0 * inv; m];
    diag[m - 1] = inv;
    SymTridiag::new(diag, vec![-inv; m - 1])
}

fn bs_support(gs: &GroundStateData) -> usize {
    let q = gs.q.values();
    let cut = q.iter().rposition(|v| v.abs() > 1e-150).map(|i| i + 1).unwrap_or(0);
    cut.min(gs.grid().interior())
}

/// Number of radial Birman-Schwinger eigenvalues strictly above `mu > 0`.
///
/// By congruence this equals the number of negative eigenvalues of
/// `-D2 - 3 Q^2 / mu` with the whole-space condition at the far end.
pub fn bs_count_above(gs: &GroundStateData, mu: f64) -> usize {
    let m = bs_support(gs);
    if m == 0 {
        return 0;
    }
    let mut t = green_inverse(m, gs.grid().h());
    let q = gs.q.values();
    for i in 0..m {
        t.diag[i] -= 3.0 * q[i] * q[i] / mu;
    }
    t.sturm_count(0.0)
}

/// Top `m` eigenvalues of the radial Birman-Schwinger operator
/// `3 Q (-Delta)^{-1} Q`, descending, by bisection on inertia counts.
pub fn birman_schwinger_spectrum(gs: &GroundStateData, m: usize) -> Result<Vec<f64>> {
    if m < 1 {
        return Err(Error::InvalidParams("need at least one eigenvalue".into()));
    }
    if bs_support(gs) == 0 {
        return Ok(vec![0.0; m]);
    }
    // |K| <= 3 ||Q||_inf^2 * sup_r int min(r, r') dr' restricted to the support
    let upper = {
        let q = gs.q.values();
        let h = gs.grid().h();
        let mut acc = 0.0;
        for (i, v) in q.iter().enumerate() {
            acc += 3.0 * v * v * gs.grid().r(i) * h;
        }
        acc.max(1e-300) * 2.0
    };
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        // j-th largest: count_above(mu) > j  <=>  mu below it
        let mut hi = upper;
        let mut lo = upper * 1e-14;
        if bs_count_above(gs, lo) <= j {
            out.push(0.0);
            continue;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if bs_count_above(gs, mid) > j {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        out.push(0.5 * (lo + hi));
    }
    Ok(out)
}

/// Dense matrix of the radial Birman-Schwinger kernel on the first `m`
/// interior nodes: `K_ij = 3 Q_i min(r_i, r_j) Q_j h`.
pub fn bs_kernel_dense(gs: &GroundStateData, m: usize) -> Result<nalgebra::DMatrix<f64>> {
    let grid = gs.grid();
    let q = gs.q.values();
    let h = grid.h();
    let m = m.min(grid.interior());
    let k = nalgebra::DMatrix::from_fn(m, m, |i, j| {
        3.0 * q[i] * grid.r(i.min(j)) * q[j] * h
    });
    let asym = (&k - k.transpose()).abs().max();
    let scale = k.abs().max().max(f64::MIN_POSITIVE);
    if asym > 1e-12 * scale {
        return Err(Error::Asymmetry(asym / scale));
    }
    Ok(k)
}

/// Builds the full spectral record with `bs_count` Birman-Schwinger values.
pub fn spectral_data(gs: &GroundStateData, bs_count: usize) -> Result<SpectralData> {
    let l = assemble_lplus(gs);
    let (k, rho, n_neg) = eig_ground(&l, *gs.grid(), 1e-13)?;
    let bs_top = birman_schwinger_spectrum(gs, bs_count)?;
    Ok(SpectralData { k, rho, n_neg, bs_top })
}

/// Rebuilds spectral data from a cached `(k, rho)` pair.
pub fn spectral_from_cache(gs: &GroundStateData, k: f64, rho: RadialField, bs_count: usize) -> Result<SpectralData> {
    let n_neg = assemble_lplus(gs).sturm_count(0.0);
    let bs_top = birman_schwinger_spectrum(gs, bs_count)?;
    Ok(SpectralData { k, rho, n_neg, bs_top })
}

/// Ground state, its spectral data and the assembled `L+`, shared read-only
/// by everything downstream.
#[derive(Debug, Clone)]
pub struct Background {
    pub gs: GroundStateData,
    pub spec: SpectralData,
    pub lplus: SymTridiag,
}

/// Number of Birman-Schwinger eigenvalues kept in [`SpectralData::bs_top`].
pub const BS_KEEP: usize = 4;

impl Background {
    pub fn new(gs: GroundStateData) -> Result<Self> {
        let spec = spectral_data(&gs, BS_KEEP)?;
        let lplus = assemble_lplus(&gs);
        Ok(Background { gs, spec, lplus })
    }

    /// Solves for `Q` and the spectrum on `grid` without touching disk.
    pub fn compute(grid: RadialGrid) -> Result<Self> {
        Background::new(shoot_q(grid, GS_TOL)?)
    }

    /// Like [`Background::compute`], reusing and refreshing a cache file in `dir`.
    pub fn load_or_compute(grid: RadialGrid, dir: &Path) -> Result<Self> {
        let path = cache_path(dir, &grid);
        if let Ok(entry) = read_cache(&path, &grid) {
            if entry.gs.residual <= GS_TOL * entry.gs.q.sup_norm().max(1.0) {
                if let Some((k, rho)) = entry.spectral {
                    let spec = spectral_from_cache(&entry.gs, k, rho, BS_KEEP)?;
                    let lplus = assemble_lplus(&entry.gs);
                    return Ok(Background { gs: entry.gs, spec, lplus });
                }
            }
        }
        let bg = Background::compute(grid)?;
        let entry = CacheEntry { gs: bg.gs.clone(), spectral: Some((bg.spec.k, bg.spec.rho.clone())) };
        write_cache(&path, &entry)?;
        Ok(bg)
    }

    pub fn grid(&self) -> &RadialGrid {
        self.gs.grid()
    }

    pub fn k(&self) -> f64 {
        self.spec.k
    }
}

/// `u = sigma [Q + lam rho + gamma]`, `u_t = sigma [lamdot rho + gammadot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub sigma: f64,
    pub lam: f64,
    pub lamdot: f64,
    pub gamma: RadialField,
    pub gammadot: RadialField,
}

impl Decomposition {
    pub fn lam_plus(&self, k: f64) -> f64 {
        self.lam + self.lamdot / k
    }

    pub fn lam_minus(&self, k: f64) -> f64 {
        self.lam - self.lamdot / k
    }

    /// The perturbation `v = lam rho + gamma` and its velocity.
    pub fn v(&self, spec: &SpectralData) -> (RadialField, RadialField) {
        let v = spec.rho.lin_comb(self.lam, &self.gamma, 1.0).expect("decomposition grid");
        let vd = spec.rho.lin_comb(self.lamdot, &self.gammadot, 1.0).expect("decomposition grid");
        (v, vd)
    }
}

/// Decomposition about `sigma Q` for a prescribed sign.
pub fn decompose_with_sign(s: &State, sigma: f64, spec: &SpectralData, gs: &GroundStateData) -> Result<Decomposition> {
    let v = s.u.lin_comb(sigma, &gs.q, -1.0)?;
    let vd = s.udot.scaled(sigma);
    let lam = inner_unchecked(&v, &spec.rho);
    let lamdot = inner_unchecked(&vd, &spec.rho);
    let gamma = v.lin_comb(1.0, &spec.rho, -lam)?;
    let gammadot = vd.lin_comb(1.0, &spec.rho, -lamdot)?;
    Ok(Decomposition { sigma, lam, lamdot, gamma, gammadot })
}

/// `||v||_E^2 = [k^2 lam^2 + <L+ gamma|gamma> + ||v_t||^2] / 2` of a decomposition.
pub fn linearized_norm_sq(d: &Decomposition, spec: &SpectralData, l: &SymTridiag) -> f64 {
    let k = spec.k;
    let qf = lplus_form(l, &d.gamma);
    let kin = d.lamdot * d.lamdot + l2_sq(&d.gammadot);
    0.5 * (k * k * d.lam * d.lam + qf + kin)
}

/// Splits `s` about the nearer of `+Q` and `-Q` in the linearized energy
/// norm (ties go to `+Q`). The distance functional refines this choice with
/// its cubic correction.
pub fn decompose(s: &State, spec: &SpectralData, gs: &GroundStateData) -> Result<Decomposition> {
    let l = assemble_lplus(gs);
    let plus = decompose_with_sign(s, 1.0, spec, gs)?;
    let minus = decompose_with_sign(s, -1.0, spec, gs)?;
    if linearized_norm_sq(&minus, spec, &l) < linearized_norm_sq(&plus, spec, &l) {
        Ok(minus)
    } else {
        Ok(plus)
    }
}

/// Inverse of [`decompose`].
pub fn reconstruct(d: &Decomposition, spec: &SpectralData, gs: &GroundStateData, t: f64) -> Result<State> {
    let (v, vd) = d.v(spec);
    let u = gs.q.lin_comb(d.sigma, &v, d.sigma)?;
    let udot = vd.scaled(d.sigma);
    State::new(u, udot, t)
}

/// `<L+ gamma | gamma>` for `gamma` orthogonal to `rho`; a value below
/// `-1e-8 ||gamma||_{H^1}^2` means the orthogonality is broken.
pub fn quadratic_form(l: &SymTridiag, gamma: &RadialField) -> Result<f64> {
    let v = lplus_form(l, gamma);
    let floor = -1e-8 * h1_sq(gamma);
    if v < floor {
        return Err(Error::Orthogonality(v));
    }
    Ok(v)
}

/// `P+ f = f - rho <rho|f>`.
pub fn project_out_rho(f: &RadialField, spec: &SpectralData) -> RadialField {
    let c = inner_unchecked(f, &spec.rho);
    f.lin_comb(1.0, &spec.rho, -c).expect("projector grid")
}
