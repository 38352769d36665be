//! The positive radial ground state `Q` of `-Delta Q + Q = Q^3`.
//!
//! `Q` is located by shooting from the origin in the initial amplitude, then
//! sampled on the grid and polished by Newton's method on the discrete
//! equation so that later spectral work sees an exact discrete stationary
//! point.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::radial::{grad_sq, h1_sq, l2_sq, l4_pow4, neg_d2, RadialField, RadialGrid};
use crate::tridiag::SymTridiag;

/// Largest admissible grid spacing for the ground-state solve.
pub const MAX_SPACING: f64 = 0.05;

/// Default relative residual target of the Newton polish.
pub const GS_TOL: f64 = 1e-10;

/// Shooting step for the amplitude search.
const SHOOT_STEP: f64 = 2e-3;

/// Shots are abandoned past this radius; a trajectory that is still positive
/// and decreasing there is treated as an undershoot.
const SHOOT_LIMIT: f64 = 40.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundStateData {
    pub q: RadialField,
    /// Continuum shooting amplitude `Q(0)`.
    pub q0: f64,
    /// Static energy `J(Q)`.
    pub jq: f64,
    /// `||Q||_4^4`.
    pub l4q: f64,
    /// `||Q||_{H^1}^2`.
    pub h1q: f64,
    /// Sup norm of `-Delta Q + Q - Q^3` on the grid.
    pub residual: f64,
}

impl GroundStateData {
    pub fn grid(&self) -> &RadialGrid {
        self.q.grid()
    }

    fn from_profile(q: RadialField, q0: f64) -> Self {
        let l4q = l4_pow4(&q);
        let h1q = h1_sq(&q);
        let residual = residual_sup(&q);
        GroundStateData { jq: 0.5 * h1q - 0.25 * l4q, l4q, h1q, residual, q, q0 }
    }

    /// `||grad Q||^2`, used by the Derrick identity `K2(Q) = 0`.
    pub fn grad_sq(&self) -> f64 {
        grad_sq(&self.q)
    }

    pub fn l2_sq(&self) -> f64 {
        l2_sq(&self.q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shot {
    Over,
    Under,
}

fn rhs(r: f64, q: f64, p: f64) -> (f64, f64) {
    (p, -2.0 * p / r + q - q * q * q)
}

fn rk4(r: f64, q: f64, p: f64, s: f64) -> (f64, f64) {
    let (k1q, k1p) = rhs(r, q, p);
    let (k2q, k2p) = rhs(r + 0.5 * s, q + 0.5 * s * k1q, p + 0.5 * s * k1p);
    let (k3q, k3p) = rhs(r + 0.5 * s, q + 0.5 * s * k2q, p + 0.5 * s * k2p);
    let (k4q, k4p) = rhs(r + s, q + s * k3q, p + s * k3p);
    (
        q + s / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q),
        p + s / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p),
    )
}

/// Taylor start `Q = a + c2 r^2 + c4 r^4` and its derivative.
fn series(a: f64, r: f64) -> (f64, f64) {
    let c2 = (a - a * a * a) / 6.0;
    let c4 = (1.0 - 3.0 * a * a) * c2 / 20.0;
    let r2 = r * r;
    (a + c2 * r2 + c4 * r2 * r2, 2.0 * c2 * r + 4.0 * c4 * r2 * r)
}

fn shoot(a: f64, s: f64) -> Shot {
    let (mut q, mut p) = series(a, s);
    let mut r = s;
    while r < SHOOT_LIMIT {
        (q, p) = rk4(r, q, p, s);
        r += s;
        if q < 0.0 {
            return Shot::Over;
        }
        if p > 0.0 {
            return Shot::Under;
        }
    }
    Shot::Under
}

/// Bisects the shooting amplitude between an undershoot and an overshoot.
pub fn shooting_amplitude(lo: f64, hi: f64) -> Result<f64> {
    amplitude_with_step(lo, hi, SHOOT_STEP)
}

fn amplitude_with_step(lo: f64, hi: f64, step: f64) -> Result<f64> {
    let (mut lo, mut hi) = (lo, hi);
    if shoot(lo, step) != Shot::Under || shoot(hi, step) != Shot::Over {
        return Err(Error::BracketNotFound(format!(
            "amplitudes {lo} and {hi} do not bracket the ground state"
        )));
    }
    while hi - lo > 4.0 * f64::EPSILON * hi {
        let mid = 0.5 * (lo + hi);
        match shoot(mid, step) {
            Shot::Under => lo = mid,
            Shot::Over => hi = mid,
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Samples the shot profile on the grid, continuing it by the decaying
/// Yukawa tail `A e^{-r} / r` once it becomes small.
fn project(a: f64, grid: &RadialGrid) -> Vec<f64> {
    let h = grid.h();
    let sub = (h / SHOOT_STEP).ceil().max(1.0) as usize;
    let s = h / sub as f64;
    let mut w = vec![0.0; grid.interior()];
    let (mut q, mut p) = series(a, s);
    let mut r = s;
    let mut tail: Option<f64> = None;
    for i in 0..grid.interior() {
        let ri = grid.r(i);
        if let Some(amp) = tail {
            w[i] = amp * (-ri).exp();
            continue;
        }
        let mut j = if i == 0 { 1 } else { 0 };
        while j < sub {
            (q, p) = rk4(r, q, p, s);
            r += s;
            j += 1;
        }
        if q < 1e-5 || p > 0.0 {
            let amp = q.max(0.0) * ri * ri.exp();
            tail = Some(amp);
            w[i] = amp * (-ri).exp();
        } else {
            w[i] = ri * q;
        }
    }
    w
}

/// The continuum profile `(Q, Q')` sampled on the grid, without the discrete
/// polish: fine RK4 from the origin, continued by the decaying Yukawa
/// solution `A e^{-r} / r` once `Q < 1e-4`.
pub fn continuum_profile(grid: RadialGrid) -> Result<(RadialField, RadialField)> {
    let h = grid.h();
    let sub = (h / (0.25 * SHOOT_STEP)).ceil().max(1.0) as usize;
    let s = h / sub as f64;
    let a = amplitude_with_step(1.0, 10.0, s)?;
    let (mut qv, mut pv) = (vec![0.0; grid.n()], vec![0.0; grid.n()]);
    let (mut q, mut p) = series(a, s);
    let mut r = s;
    let mut tail: Option<f64> = None;
    for i in 0..grid.interior() {
        let ri = grid.r(i);
        if tail.is_none() {
            let mut j = if i == 0 { 1 } else { 0 };
            while j < sub {
                (q, p) = rk4(r, q, p, s);
                r += s;
                j += 1;
            }
            if q < 1e-4 {
                // r q = A e^{-r} + B e^{r}, (r q)' = -A e^{-r} + B e^{r}
                tail = Some(0.5 * ri.exp() * (ri * q - (q + ri * p)));
            }
        }
        match tail {
            Some(amp) => {
                let e = amp * (-ri).exp();
                qv[i] = e / ri;
                pv[i] = -e * (1.0 / ri + 1.0 / (ri * ri));
            }
            None => {
                qv[i] = q;
                pv[i] = p;
            }
        }
    }
    Ok((RadialField::new(grid, qv)?, RadialField::new(grid, pv)?))
}

/// Discrete residual `-D2 w + w - w^3 / r^2` on interior nodes.
fn discrete_residual(w: &[f64], grid: &RadialGrid) -> Vec<f64> {
    let mut f = neg_d2(w, grid.h());
    for i in 0..w.len() {
        let r = grid.r(i);
        f[i] += w[i] - w[i] * w[i] * w[i] / (r * r);
    }
    f
}

fn residual_sup(q: &RadialField) -> f64 {
    let grid = *q.grid();
    let f = discrete_residual(&q.w(), &grid);
    f.iter().enumerate().fold(0.0, |m, (i, v)| m.max((v / grid.r(i)).abs()))
}

fn sup_over_r(f: &[f64], grid: &RadialGrid) -> f64 {
    f.iter().enumerate().fold(0.0, |m, (i, v)| m.max((v / grid.r(i)).abs()))
}

/// The linearized operator `-D2 + 1 - 3 Q^2` acting on `w`, with `Q = w / r`.
pub(crate) fn lplus_matrix(w: &[f64], grid: &RadialGrid) -> SymTridiag {
    let h2 = grid.h() * grid.h();
    let diag = (0..w.len())
        .map(|i| {
            let q = w[i] / grid.r(i);
            2.0 / h2 + 1.0 - 3.0 * q * q
        })
        .collect();
    SymTridiag::new(diag, vec![-1.0 / h2; w.len() - 1])
}

fn newton_polish(mut w: Vec<f64>, grid: &RadialGrid, tol: f64) -> Result<Vec<f64>> {
    let scale = w.iter().enumerate().fold(1.0f64, |m, (i, v)| m.max((v / grid.r(i)).abs()));
    let target = tol * scale;
    let mut f = discrete_residual(&w, grid);
    let mut res = sup_over_r(&f, grid);
    let mut stalls = 0;
    for _ in 0..60 {
        if !res.is_finite() {
            break;
        }
        let jac = lplus_matrix(&w, grid);
        let step = jac.solve_shifted(0.0, &f).map_err(|e| Error::NewtonDivergence(e.to_string()))?;
        let mut alpha = 1.0;
        let (trial, tf, tres) = loop {
            let trial: Vec<f64> = w.iter().zip(&step).map(|(a, d)| a - alpha * d).collect();
            let tf = discrete_residual(&trial, grid);
            let tres = sup_over_r(&tf, grid);
            if tres < res || alpha < 1e-4 {
                break (trial, tf, tres);
            }
            alpha *= 0.5;
        };
        if tres >= res {
            // at the roundoff floor a full step no longer helps
            stalls += 1;
            if res <= target || stalls > 2 {
                break;
            }
        }
        let improved = tres < res;
        if improved {
            w = trial;
            f = tf;
            res = tres;
        }
        if res <= target * 1e-3 {
            break;
        }
    }
    if !(res <= target) {
        return Err(Error::NewtonDivergence(format!(
            "residual {res:e} above tolerance {target:e}"
        )));
    }
    Ok(w)
}

/// Computes the ground state on `grid` with relative residual at most `tol`.
pub fn shoot_q(grid: RadialGrid, tol: f64) -> Result<GroundStateData> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParams(format!("tolerance must be positive, got {tol}")));
    }
    if grid.h() > MAX_SPACING {
        return Err(Error::InvalidGrid(format!(
            "spacing {} exceeds {MAX_SPACING}; the decay scale is not resolved",
            grid.h()
        )));
    }
    if grid.r_max() < 12.0 {
        return Err(Error::BracketNotFound(format!(
            "r_max = {} is too small to hold the ground state",
            grid.r_max()
        )));
    }
    let a = shooting_amplitude(1.0, 10.0)?;
    let w = newton_polish(project(a, &grid), &grid, tol)?;
    let q = RadialField::from_w(grid, &w);
    if q.values().iter().any(|v| *v < -1e-12) {
        return Err(Error::NewtonDivergence("polished profile is not positive".into()));
    }
    Ok(GroundStateData::from_profile(q, a))
}

/// Default directory for cached profiles: `$NLKG_CACHE_DIR`, else `./.nlkg-cache`.
pub fn cache_dir() -> PathBuf {
    std::env::var_os("NLKG_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".nlkg-cache"))
}

pub fn cache_path(dir: &Path, grid: &RadialGrid) -> PathBuf {
    dir.join(format!("q_{:.16e}_{}.txt", grid.r_max(), grid.n()))
}

/// Contents of a cache file: the ground state and, when present, the
/// spectral block `(k, rho)`.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub gs: GroundStateData,
    pub spectral: Option<(f64, RadialField)>,
}

fn write_samples(out: &mut String, f: &RadialField) {
    for (i, v) in f.values().iter().enumerate() {
        let _ = writeln!(out, "{:.16e} {:.16e}", f.grid().r(i), v);
    }
}

/// Serializes a cache entry. Decimal samples carry 17 significant digits
/// and therefore round-trip bit-exactly.
pub fn format_cache(entry: &CacheEntry) -> String {
    let grid = entry.gs.grid();
    let mut out = String::new();
    let _ = writeln!(out, "NLKG-Q v1 {:.16e} {}", grid.r_max(), grid.n());
    write_samples(&mut out, &entry.gs.q);
    if let Some((k, rho)) = &entry.spectral {
        let _ = writeln!(out, "NLKG-SPEC v1 {k:.16e}");
        write_samples(&mut out, rho);
    }
    out
}

fn parse_samples<'a>(
    lines: &mut std::iter::Peekable<impl Iterator<Item = &'a str>>,
    grid: &RadialGrid,
) -> Result<RadialField> {
    let mut values = Vec::with_capacity(grid.n());
    while values.len() < grid.n() {
        let line = lines.next().ok_or_else(|| Error::Cache("truncated sample block".into()))?;
        let mut it = line.split_whitespace();
        let (r, v) = match (it.next(), it.next(), it.next()) {
            (Some(r), Some(v), None) => (r, v),
            _ => return Err(Error::Cache(format!("malformed sample line {line:?}"))),
        };
        let r: f64 = r.parse().map_err(|_| Error::Cache(format!("bad radius {r:?}")))?;
        let v: f64 = v.parse().map_err(|_| Error::Cache(format!("bad value {v:?}")))?;
        let expect = grid.r(values.len());
        if (r - expect).abs() > 1e-12 * expect {
            return Err(Error::Cache(format!("node {r} does not match grid ({expect})")));
        }
        values.push(v);
    }
    RadialField::new(*grid, values).map_err(|e| Error::Cache(e.to_string()))
}

/// Parses a cache file for `grid`. The shooting amplitude is not stored; it
/// is recomputed, which costs a few milliseconds.
pub fn parse_cache(text: &str, grid: &RadialGrid) -> Result<CacheEntry> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    let header = lines.next().ok_or_else(|| Error::Cache("empty cache file".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "NLKG-Q" || parts[1] != "v1" {
        return Err(Error::Cache(format!("unrecognized header {header:?}")));
    }
    let r_max: f64 = parts[2].parse().map_err(|_| Error::Cache("bad r_max".into()))?;
    let n: usize = parts[3].parse().map_err(|_| Error::Cache("bad n".into()))?;
    if r_max != grid.r_max() || n != grid.n() {
        return Err(Error::Cache(format!("cache is for (r_max {r_max}, n {n})")));
    }
    let q = parse_samples(&mut lines, grid)?;
    let q0 = shooting_amplitude(1.0, 10.0)?;
    let gs = GroundStateData::from_profile(q, q0);
    let spectral = match lines.next() {
        None => None,
        Some(line) => {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != "NLKG-SPEC" || parts[1] != "v1" {
                return Err(Error::Cache(format!("unrecognized block {line:?}")));
            }
            let k: f64 = parts[2].parse().map_err(|_| Error::Cache("bad k".into()))?;
            Some((k, parse_samples(&mut lines, grid)?))
        }
    };
    Ok(CacheEntry { gs, spectral })
}

pub fn read_cache(path: &Path, grid: &RadialGrid) -> Result<CacheEntry> {
    parse_cache(&fs::read_to_string(path)?, grid)
}

pub fn write_cache(path: &Path, entry: &CacheEntry) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, format_cache(entry))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads `Q` for `grid` from `dir`, computing and storing it on a miss or a
/// stale file. Cached profiles are accepted only if they meet `tol`.
pub fn load_or_compute(grid: RadialGrid, tol: f64, dir: &Path) -> Result<GroundStateData> {
    let path = cache_path(dir, &grid);
    if let Ok(entry) = read_cache(&path, &grid) {
        if entry.gs.residual <= tol * entry.gs.q.sup_norm().max(1.0) {
            return Ok(entry.gs);
        }
    }
    let gs = shoot_q(grid, tol)?;
    write_cache(&path, &CacheEntry { gs: gs.clone(), spectral: None })?;
    Ok(gs)
}
