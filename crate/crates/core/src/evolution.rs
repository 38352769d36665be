//! Time integration of `u_tt = Delta u - u + u^3` by Strang splitting, fate
//! detection (blow-up, scattering, trapping) and trajectory records.
//!
//! The linear part is integrated exactly in the sine basis of `w = r u`; the
//! nonlinear kick `u_t <- u_t + dt u^3` is pointwise. Step sizes are
//! `dt_max / 2^j`, so time is tracked as an integer tick count and sample
//! times are hit exactly.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{diagnostics, inside_ball, DiagnosticsSample, SignValue, ThresholdParams, VirialCutoff};
use crate::ground_state::lplus_matrix;
use crate::linearized::Background;
use crate::radial::{FreeFlow, RadialField, RadialGrid, Rotation, State};

/// Step-size control of the integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorParams {
    pub dt_max: f64,
    /// Blow-up is declared when the amplitude rule asks for a smaller step.
    pub dt_min: f64,
    /// `c` in `dt <= c / ||u||_inf^2`.
    pub dt_amplitude: f64,
}

impl Default for IntegratorParams {
    fn default() -> Self {
        IntegratorParams { dt_max: DEFAULT_DT_MAX, dt_min: 1e-6, dt_amplitude: 1.0 }
    }
}

pub const DEFAULT_DT_MAX: f64 = 1.0 / 1024.0;

/// Deepest halving level allowed regardless of `dt_min`.
const MAX_LEVEL: u32 = 48;

impl IntegratorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("dt_max", self.dt_max), ("dt_min", self.dt_min), ("dt_amplitude", self.dt_amplitude)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.dt_min >= self.dt_max {
            return Err(Error::InvalidParams(format!(
                "dt_min = {} must be below dt_max = {}",
                self.dt_min, self.dt_max
            )));
        }
        if self.levels() > MAX_LEVEL {
            return Err(Error::InvalidParams(format!(
                "dt_max / dt_min = {} needs more than {MAX_LEVEL} halvings",
                self.dt_max / self.dt_min
            )));
        }
        Ok(())
    }

    /// Number of halvings from `dt_max` down to the last step `>= dt_min`.
    fn levels(&self) -> u32 {
        (self.dt_max / self.dt_min).log2().floor().max(0.0) as u32
    }

    /// Halving level the amplitude rule requires at sup norm `u_sup`.
    fn level_for(&self, u_sup: f64) -> Option<u32> {
        let limit = self.dt_amplitude / (u_sup * u_sup);
        if limit >= self.dt_max {
            return Some(0);
        }
        let j = (self.dt_max / limit).log2().ceil().max(0.0) as u32;
        if j > self.levels() {
            None
        } else {
            Some(j)
        }
    }
}

/// Spectral Strang stepper on a fixed grid with cached rotation tables.
#[derive(Debug, Clone)]
pub struct Integrator {
    flow: FreeFlow,
    inv_r2: Vec<f64>,
    params: IntegratorParams,
    dt_max: f64,
    halves: Vec<Option<Rotation>>,
    w: Vec<f64>,
    kick: Vec<f64>,
    kick_hat: Vec<f64>,
}

impl Integrator {
    /// `dt_max` is shrunk, if needed, to divide `sample_every`.
    pub fn new(grid: RadialGrid, params: IntegratorParams, sample_every: f64) -> Result<Self> {
        params.validate()?;
        if !(sample_every.is_finite() && sample_every > 0.0) {
            return Err(Error::InvalidParams(format!("sample_every must be positive, got {sample_every}")));
        }
        let per_sample = (sample_every / params.dt_max * (1.0 - 1e-12)).ceil().max(1.0);
        let dt_max = sample_every / per_sample;
        let m = grid.interior();
        let inv_r2 = (0..m).map(|i| 1.0 / (grid.r(i) * grid.r(i))).collect();
        Ok(Integrator {
            flow: FreeFlow::new(grid),
            inv_r2,
            params,
            dt_max,
            halves: vec![None; params.levels() as usize + 1],
            w: vec![0.0; m],
            kick: vec![0.0; m],
            kick_hat: vec![0.0; m],
        })
    }

    pub fn grid(&self) -> &RadialGrid {
        self.flow.grid()
    }

    pub fn flow(&self) -> &FreeFlow {
        &self.flow
    }

    /// Effective largest step.
    pub fn dt_max(&self) -> f64 {
        self.dt_max
    }

    pub fn params(&self) -> &IntegratorParams {
        &self.params
    }

    pub fn to_spectral(&mut self, s: &State) -> (Vec<f64>, Vec<f64>) {
        self.flow.to_spectral(&s.u, &s.udot)
    }

    pub fn from_spectral(&mut self, a: &[f64], b: &[f64], t: f64) -> State {
        let (u, udot) = self.flow.from_spectral(a, b);
        State { u, udot, t }
    }

    /// One step of size `dt_max / 2^level`; returns `sup |u|` at the kick.
    pub fn step_level(&mut self, a: &mut [f64], b: &mut [f64], level: u32) -> Result<f64> {
        let dt = self.dt_max / (1u64 << level) as f64;
        if self.halves[level as usize].is_none() {
            self.halves[level as usize] = Some(self.flow.rotation(0.5 * dt));
        }
        let rot = self.halves[level as usize].take().expect("rotation cached");
        let res = self.strang(a, b, &rot, dt);
        self.halves[level as usize] = Some(rot);
        res
    }

    /// One step of arbitrary (possibly negative) size.
    pub fn step_dt(&mut self, a: &mut [f64], b: &mut [f64], dt: f64) -> Result<f64> {
        let rot = self.flow.rotation(0.5 * dt);
        self.strang(a, b, &rot, dt)
    }

    fn strang(&mut self, a: &mut [f64], b: &mut [f64], half: &Rotation, dt: f64) -> Result<f64> {
        half.apply(a, b);
        self.flow.transform().inverse(a, &mut self.w);
        let mut sup = 0.0f64;
        for i in 0..self.w.len() {
            let x = self.w[i];
            let u = x * self.inv_r2[i].sqrt();
            sup = sup.max(u.abs());
            self.kick[i] = dt * x * x * x * self.inv_r2[i];
        }
        if !sup.is_finite() {
            return Err(Error::NonFinite(sup));
        }
        self.flow.transform().forward(&self.kick, &mut self.kick_hat);
        for (y, k) in b.iter_mut().zip(&self.kick_hat) {
            *y += k;
        }
        half.apply(a, b);
        Ok(sup)
    }
}

/// Half free flow, kick `u_t += dt u^3`, half free flow.
pub fn step(s: &State, dt: f64) -> Result<State> {
    if dt == 0.0 {
        return Ok(s.clone());
    }
    let params = IntegratorParams { dt_max: dt.abs().max(1e-300), dt_min: dt.abs() * 0.5, dt_amplitude: 1.0 };
    let mut it = Integrator::new(*s.grid(), params, dt.abs())?;
    let (mut a, mut b) = it.to_spectral(s);
    it.step_dt(&mut a, &mut b, dt)?;
    let out = it.from_spectral(&a, &b, s.t + dt);
    if !(out.u.is_finite() && out.udot.is_finite()) {
        return Err(Error::NonFinite(f64::NAN));
    }
    Ok(out)
}

/// Fixed point of the Strang map of step `dt` closest to `(Q, 0)`.
///
/// With `C = cos(omega dt / 2)` the fixed points with `u_t = 0` are
/// `(C^{-1} P, 0)` where `(2 / dt) omega tan(omega dt / 2) P = P^3`; this
/// is solved by Newton iterations preconditioned with the tridiagonal `L+`.
pub fn strang_equilibrium(bg: &Background, dt: f64) -> Result<State> {
    let grid = *bg.grid();
    let mut flow = FreeFlow::new(grid);
    let omega = flow.omega().to_vec();
    if omega.iter().any(|w| w * dt.abs() >= std::f64::consts::PI) {
        return Err(Error::InvalidParams(format!("dt = {dt} too large for a Strang equilibrium on this grid")));
    }
    let symbol: Vec<f64> = omega.iter().map(|w| 2.0 / dt * w * (0.5 * w * dt).tan()).collect();
    let m = grid.interior();
    let mut p = bg.gs.q.w();
    let (mut hat, mut tmp) = (vec![0.0; m], vec![0.0; m]);
    let scale = p.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    // Newton stalls at the roundoff floor of the spectral symbol
    let mut prev = f64::INFINITY;
    let mut converged = false;
    for _ in 0..60 {
        flow.transform().forward(&p, &mut hat);
        for (x, s) in hat.iter_mut().zip(&symbol) {
            *x *= s;
        }
        flow.transform().inverse(&hat, &mut tmp);
        let f: Vec<f64> = (0..m)
            .map(|i| {
                let r = grid.r(i);
                tmp[i] - p[i] * p[i] * p[i] / (r * r)
            })
            .collect();
        let res = f.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        if res <= 1e-9 * scale && res > 0.25 * prev {
            converged = true;
            break;
        }
        prev = res;
        let jac = lplus_matrix(&p, &grid);
        let minus_f: Vec<f64> = f.iter().map(|v| -v).collect();
        let d = jac.solve_shifted(0.0, &minus_f)?;
        for (x, dx) in p.iter_mut().zip(&d) {
            *x += dx;
        }
    }
    if !converged {
        return Err(Error::NewtonDivergence("Strang equilibrium did not converge".into()));
    }
    flow.transform().forward(&p, &mut hat);
    for (x, w) in hat.iter_mut().zip(&omega) {
        *x /= (0.5 * w * dt).cos();
    }
    flow.transform().inverse(&hat, &mut tmp);
    Ok(State::at_rest(RadialField::from_w(grid, &tmp)))
}

/// Largest radius where `|u|` or `|u_t|` exceeds `tol` times the larger sup norm.
pub fn support_radius(s: &State, tol: f64) -> f64 {
    let (u, ud) = (s.u.values(), s.udot.values());
    let scale = s.u.sup_norm().max(s.udot.sup_norm());
    if scale == 0.0 {
        return 0.0;
    }
    let cut = tol * scale;
    let grid = s.grid();
    (0..grid.interior())
        .rev()
        .find(|&i| u[i].abs() > cut || ud[i].abs() > cut)
        .map(|i| grid.r(i))
        .unwrap_or(0.0)
}

/// Relative amplitude below which data count as outside their support.
pub const SUPPORT_TOL: f64 = 1e-10;

/// Margin added to the light cone in the boundary guard.
pub const GUARD_MARGIN: f64 = 2.0;

/// Refuses data whose light cone reaches the wall before `horizon`.
pub fn check_guard(s: &State, horizon: f64) -> Result<()> {
    let support = support_radius(s, SUPPORT_TOL);
    let need = support + horizon.abs() + GUARD_MARGIN;
    if s.grid().r_max() < need {
        return Err(Error::BoundaryGuard(format!(
            "r_max = {} but support {support:.3} + horizon {} + {GUARD_MARGIN} = {need:.3}",
            s.grid().r_max(),
            horizon.abs()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(&self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FateKind {
    ScatterToZero,
    BlowUp,
    TrappedByPlusQ,
    TrappedByMinusQ,
    Undetermined,
}

impl FateKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FateKind::ScatterToZero => "ScatterToZero",
            FateKind::BlowUp => "BlowUp",
            FateKind::TrappedByPlusQ => "TrappedByPlusQ",
            FateKind::TrappedByMinusQ => "TrappedByMinusQ",
            FateKind::Undetermined => "Undetermined",
        }
    }

    pub fn is_trapped(&self) -> bool {
        matches!(self, FateKind::TrappedByPlusQ | FateKind::TrappedByMinusQ)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlowupReason {
    AmplitudeCap,
    StepUnderflow,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupWitness {
    pub reason: BlowupReason,
    pub t_declared: f64,
    pub u_sup: f64,
    /// Fitted blow-up time (signed like the record's times).
    pub t_star: Option<f64>,
    /// Fitted exponent in `||u||_H ~ c |T* - t|^{-alpha}`.
    pub alpha: Option<f64>,
    /// `<u|u_t>` (in the direction of evolution) increased over the final samples.
    pub flux_increasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterWitness {
    pub onset: f64,
    pub t_declared: f64,
    pub max_potential_ratio: f64,
    pub min_dq: f64,
    /// Energy-norm increments of the free profile over the quarters of the window.
    pub profile_increments: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrappedWitness {
    pub sigma: f64,
    /// Largest `d_Q` over the final window.
    pub residual: f64,
    pub window: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fate {
    ScatterToZero(ScatterWitness),
    BlowUp(BlowupWitness),
    TrappedByPlusQ(TrappedWitness),
    TrappedByMinusQ(TrappedWitness),
    Undetermined,
}

impl Fate {
    pub fn kind(&self) -> FateKind {
        match self {
            Fate::ScatterToZero(_) => FateKind::ScatterToZero,
            Fate::BlowUp(_) => FateKind::BlowUp,
            Fate::TrappedByPlusQ(_) => FateKind::TrappedByPlusQ,
            Fate::TrappedByMinusQ(_) => FateKind::TrappedByMinusQ,
            Fate::Undetermined => FateKind::Undetermined,
        }
    }

    pub fn witness_json(&self) -> serde_json::Value {
        let v = match self {
            Fate::ScatterToZero(w) => serde_json::to_value(w),
            Fate::BlowUp(w) => serde_json::to_value(w),
            Fate::TrappedByPlusQ(w) | Fate::TrappedByMinusQ(w) => serde_json::to_value(w),
            Fate::Undetermined => Ok(serde_json::json!({})),
        };
        v.unwrap_or_else(|_| serde_json::json!({}))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    BallEntry,
    BallExit,
    SignFlip,
    BlowupDeclared,
    ScatterDeclared,
    Horizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
}

/// Samples, events and fate of one evolution in one time direction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub direction: Direction,
    pub samples: Vec<DiagnosticsSample>,
    pub events: Vec<Event>,
    pub fate: Fate,
    pub horizon: f64,
    pub steps: u64,
}

impl TrajectoryRecord {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn dq(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.dq).collect()
    }

    pub fn last_time(&self) -> f64 {
        self.samples.last().map(|s| s.t).unwrap_or(0.0)
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = DiagnosticsSample::csv_header();
        out.push('\n');
        for s in &self.samples {
            out.push_str(&s.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "fate": self.fate.kind().as_str(),
            "direction": self.direction.as_str(),
            "horizon": self.horizon,
            "steps": self.steps,
            "events": self.events,
            "witness": self.fate.witness_json(),
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{stem}.csv"));
        let json = dir.join(format!("{stem}.json"));
        fs::write(&csv, self.to_csv())?;
        let mut text = serde_json::to_string_pretty(&self.sidecar())?;
        text.push('\n');
        fs::write(&json, text)?;
        Ok((csv, json))
    }
}

/// Options of [`evolve`] beyond the physical thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveOptions {
    pub integrator: IntegratorParams,
    pub sample_every: f64,
    pub record_virial: bool,
    pub virial_cutoff: Option<VirialCutoff>,
    /// Stop as soon as blow-up or scattering is declared.
    pub stop_at_fate: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            integrator: IntegratorParams::default(),
            sample_every: DEFAULT_SAMPLE_EVERY,
            record_virial: false,
            virial_cutoff: None,
            stop_at_fate: true,
        }
    }
}

pub const DEFAULT_SAMPLE_EVERY: f64 = 1.0 / 16.0;

/// What the scattering detector needs from one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterProbe {
    pub t: f64,
    pub sign: SignValue,
    pub dq: f64,
    pub potential_ratio: f64,
    /// Free profile `S(-t) u(t)` in coordinates whose Euclidean norm is the
    /// energy norm.
    pub profile: Vec<f64>,
}

/// Declares scattering when, over a window of length `T_win` ending at the
/// last probe, the sign is `+1`, `d_Q >= R_*`, the potential ratio is at
/// most `eta_scat`, and the free-profile increments over the window quarters
/// do not increase.
pub fn detect_scatter(window: &[ScatterProbe], p: &ThresholdParams) -> Option<ScatterWitness> {
    let last = window.last()?;
    let t_end = last.t.abs();
    let start = window.iter().position(|s| s.t.abs() >= t_end - p.t_win - 1e-9)?;
    let win = &window[start..];
    if t_end - win[0].t.abs() < p.t_win - 1e-9 || win.len() < 5 {
        return None;
    }
    let mut max_ratio = 0.0f64;
    let mut min_dq = f64::INFINITY;
    for s in win {
        if s.sign != SignValue::Plus || s.dq < p.r_star || s.potential_ratio > p.eta_scat {
            return None;
        }
        max_ratio = max_ratio.max(s.potential_ratio);
        min_dq = min_dq.min(s.dq);
    }
    let t0 = win[0].t.abs();
    let pick = |frac: f64| {
        let target = t0 + frac * p.t_win;
        win.iter()
            .min_by(|x, y| (x.t.abs() - target).abs().total_cmp(&(y.t.abs() - target).abs()))
            .expect("non-empty window")
    };
    let marks: Vec<&ScatterProbe> = (0..=4).map(|j| pick(j as f64 / 4.0)).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(&marks[0].profile);
    let incs: Vec<f64> = marks
        .windows(2)
        .map(|m| norm(&m[1].profile.iter().zip(&m[0].profile).map(|(x, y)| x - y).collect::<Vec<_>>()))
        .collect();
    let tol = 1e-12 * scale;
    if incs.windows(2).any(|d| d[1] > d[0] + tol) {
        return None;
    }
    Some(ScatterWitness {
        onset: win[0].t,
        t_declared: last.t,
        max_potential_ratio: max_ratio,
        min_dq,
        profile_increments: incs,
    })
}

/// Least-squares fit of `log y = log c - alpha log |T* - t|` with `T*`
/// chosen beyond the last time. Times are taken by absolute value.
pub fn fit_blowup_rate(history: &[(f64, f64)]) -> Option<(f64, f64)> {
    if history.len() < 8 {
        return None;
    }
    let ts: Vec<f64> = history.iter().map(|h| h.0.abs()).collect();
    let ys: Vec<f64> = history.iter().map(|h| h.1.ln()).collect();
    let t_last = *ts.last()?;
    let span = t_last - ts[0];
    if !(span > 0.0) {
        return None;
    }
    let residual = |gap: f64| -> (f64, f64) {
        let xs: Vec<f64> = ts.iter().map(|t| (t_last + gap - t).ln()).collect();
        let (slope, _, ss) = linear_fit(&xs, &ys);
        (ss, -slope)
    };
    // golden-section search for the gap on a log scale
    let (mut lo, mut hi) = ((span * 1e-8).ln(), (span * 10.0).ln());
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = residual(x1.exp()).0;
    let mut f2 = residual(x2.exp()).0;
    for _ in 0..100 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = residual(x1.exp()).0;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = residual(x2.exp()).0;
        }
    }
    let gap = (0.5 * (lo + hi)).exp();
    let alpha = residual(gap).1;
    alpha.is_finite().then_some((t_last + gap, alpha))
}

/// Slope, intercept and residual sum of squares of an ordinary least-squares line.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mx;
    let ss = xs.iter().zip(ys).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum();
    (slope, icpt, ss)
}

/// Blow-up verdict from the integrator's state.
///
/// `history` holds `(t, ||u||_H, <u|u_t>)` per step; the rate is fitted on
/// the last decade of norm values.
pub fn detect_blowup(u_sup: f64, level_ok: bool, t: f64, history: &[(f64, f64, f64)], p: &ThresholdParams) -> Option<BlowupWitness> {
    let reason = if !u_sup.is_finite() {
        BlowupReason::NonFinite
    } else if u_sup >= p.u_max {
        BlowupReason::AmplitudeCap
    } else if !level_ok {
        BlowupReason::StepUnderflow
    } else {
        return None;
    };
    let finite: Vec<(f64, f64, f64)> = history.iter().copied().filter(|h| h.1.is_finite()).collect();
    let top = finite.last().map(|h| h.1).unwrap_or(f64::NAN);
    let decade: Vec<(f64, f64)> = finite.iter().filter(|h| h.1 >= 0.1 * top).map(|h| (h.0, h.1)).collect();
    let fit = fit_blowup_rate(&decade);
    let tail = &finite[finite.len().saturating_sub(16)..];
    let flux_increasing = tail.len() >= 2 && tail.windows(2).all(|w| w[1].2 >= w[0].2);
    Some(BlowupWitness {
        reason,
        t_declared: t,
        u_sup,
        t_star: fit.map(|f| f.0.copysign(t)),
        alpha: fit.map(|f| f.1),
        flux_increasing,
    })
}

/// Sign of `Q` the final `T_tail` window stayed within `delta_S` of.
pub fn detect_trapped(samples: &[DiagnosticsSample], p: &ThresholdParams) -> Option<f64> {
    let last = samples.last()?;
    let t_end = last.t.abs();
    if t_end < p.t_tail {
        return None;
    }
    let tail: Vec<&DiagnosticsSample> = samples.iter().filter(|s| s.t.abs() >= t_end - p.t_tail - 1e-9).collect();
    let sigma = tail[0].sigma;
    tail.iter().all(|s| s.dq <= p.delta_s && s.sigma == sigma).then_some(sigma)
}

const HISTORY_CAP: usize = 1 << 14;

/// Evolves `s0` up to `|t| = horizon` in the given direction, sampling every
/// `sample_every` and stopping at a declared fate.
///
/// Backward runs integrate `(u, -u_t)` forward; samples are reported for the
/// actual solution at negative times.
pub fn evolve(
    s0: &State,
    horizon: f64,
    direction: Direction,
    bg: &Background,
    p: &ThresholdParams,
    opts: &EvolveOptions,
) -> Result<TrajectoryRecord> {
    p.validate()?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidParams(format!("horizon must be positive, got {horizon}")));
    }
    bg.grid().check_same(s0.grid())?;
    check_guard(s0, horizon)?;
    let mut it = Integrator::new(*s0.grid(), opts.integrator, opts.sample_every)?;
    let ip = opts.integrator;
    let levels = ip.levels();
    let ticks_per_step0 = 1u64 << levels;
    let per_sample = (opts.sample_every / it.dt_max()).round() as u64 * ticks_per_step0;
    let tick = it.dt_max() / ticks_per_step0 as f64;
    let n_samples = (horizon / opts.sample_every - 1e-9).ceil() as u64;
    let sgn = direction.sign();

    let internal = match direction {
        Direction::Forward => State { t: 0.0, ..s0.clone() },
        Direction::Backward => State { t: 0.0, ..s0.reversed() },
    };
    let (mut a, mut b) = it.to_spectral(&internal);
    let omega: Vec<f64> = it.flow().omega().to_vec();
    let pw = it.flow().parseval_weight();
    let sqrt_pw = pw.sqrt();

    let mut rec = TrajectoryRecord {
        direction,
        samples: Vec::new(),
        events: Vec::new(),
        fate: Fate::Undetermined,
        horizon,
        steps: 0,
    };
    let mut probes: VecDeque<ScatterProbe> = VecDeque::new();
    let mut history: VecDeque<(f64, f64, f64)> = VecDeque::new();
    let mut tracker = EventTracker::default();

    let take_sample = |it: &mut Integrator, a: &[f64], b: &[f64], tau: f64, rec: &mut TrajectoryRecord, probes: &mut VecDeque<ScatterProbe>, tracker: &mut EventTracker| -> Result<()> {
        let st = it.from_spectral(a, b, tau);
        let actual = match direction {
            Direction::Forward => st,
            Direction::Backward => State { t: -tau, ..st.reversed() },
        };
        let ds = diagnostics(&actual, bg, p, opts.virial_cutoff.as_ref(), opts.record_virial)?;
        tracker.observe(&ds, bg.gs.jq, p, &mut rec.events);
        // free profile S(-tau) of the internal state
        let rot = it.flow().rotation(-tau);
        let (mut pa, mut pb) = (a.to_vec(), b.to_vec());
        rot.apply(&mut pa, &mut pb);
        let mut profile = Vec::with_capacity(2 * pa.len());
        profile.extend(pa.iter().zip(&omega).map(|(x, w)| sqrt_pw * w * x));
        profile.extend(pb.iter().map(|y| sqrt_pw * y));
        probes.push_back(ScatterProbe {
            t: ds.t,
            sign: ds.sign_s,
            dq: ds.dq,
            potential_ratio: ds.potential_ratio(),
            profile,
        });
        while probes.front().is_some_and(|f| f.t.abs() < ds.t.abs() - p.t_win - opts.sample_every) {
            probes.pop_front();
        }
        rec.samples.push(ds);
        Ok(())
    };

    take_sample(&mut it, &a, &b, 0.0, &mut rec, &mut probes, &mut tracker)?;
    let mut ticks: u64 = 0;
    let mut level: u32 = 0;
    let mut u_sup = internal.u.sup_norm();
    'outer: for j in 1..=n_samples {
        let target = j * per_sample;
        while ticks < target {
            let needed = ip.level_for(u_sup);
            let tau = ticks as f64 * tick;
            if let Some(w) = detect_blowup(u_sup, needed.is_some(), sgn * tau, history.make_contiguous(), p) {
                rec.events.push(Event { t: sgn * tau, kind: EventKind::BlowupDeclared });
                rec.fate = Fate::BlowUp(w);
                if u_sup.is_finite() && a.iter().chain(b.iter()).all(|x| x.is_finite()) {
                    take_sample(&mut it, &a, &b, tau, &mut rec, &mut probes, &mut tracker)?;
                }
                break 'outer;
            }
            let needed = needed.expect("checked above");
            // coarsen only on ticks aligned with the coarser step
            let mut lv = level.max(needed);
            while lv > needed && ticks % (1u64 << (levels - (lv - 1))) == 0 {
                lv -= 1;
            }
            level = lv;
            match it.step_level(&mut a, &mut b, level) {
                Ok(s) => u_sup = s,
                Err(_) => u_sup = f64::INFINITY,
            }
            ticks += 1u64 << (levels - level);
            rec.steps += 1;
            let norm = (pw * it.flow().spectral_energy(&a, &b)).sqrt();
            let flux = pw * a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
            history.push_back((sgn * ticks as f64 * tick, norm, flux));
            if history.len() > HISTORY_CAP {
                history.pop_front();
            }
        }
        let tau = ticks as f64 * tick;
        if !u_sup.is_finite() {
            continue;
        }
        take_sample(&mut it, &a, &b, tau, &mut rec, &mut probes, &mut tracker)?;
        if let Some(w) = detect_scatter(probes.make_contiguous(), p) {
            if !matches!(rec.fate, Fate::ScatterToZero(_)) {
                rec.events.push(Event { t: sgn * tau, kind: EventKind::ScatterDeclared });
                rec.fate = Fate::ScatterToZero(w);
            }
            if opts.stop_at_fate {
                break;
            }
        }
    }
    if matches!(rec.fate, Fate::Undetermined) {
        let t_end = rec.last_time();
        rec.events.push(Event { t: t_end, kind: EventKind::Horizon });
        if let Some(sigma) = detect_trapped(&rec.samples, p) {
            let residual = rec
                .samples
                .iter()
                .filter(|s| s.t.abs() >= t_end.abs() - p.t_tail - 1e-9)
                .fold(0.0f64, |m, s| m.max(s.dq));
            let w = TrappedWitness { sigma, residual, window: p.t_tail };
            rec.fate = if sigma > 0.0 { Fate::TrappedByPlusQ(w) } else { Fate::TrappedByMinusQ(w) };
        }
    }
    Ok(rec)
}

/// Emits ball and sign events from consecutive samples.
#[derive(Debug, Default)]
struct EventTracker {
    inside_r: Option<bool>,
    last_sign: Option<SignValue>,
}

impl EventTracker {
    fn observe(&mut self, s: &DiagnosticsSample, jq: f64, p: &ThresholdParams, events: &mut Vec<Event>) {
        let inside = s.dq <= p.r_star;
        match self.inside_r {
            None if inside => events.push(Event { t: s.t, kind: EventKind::BallEntry }),
            Some(false) if inside => events.push(Event { t: s.t, kind: EventKind::BallEntry }),
            Some(true) if !inside => events.push(Event { t: s.t, kind: EventKind::BallExit }),
            _ => {}
        }
        self.inside_r = Some(inside);
        if inside_ball(s.dq, s.e, jq) {
            self.last_sign = None;
        } else {
            if let Some(prev) = self.last_sign {
                if prev != s.sign_s {
                    events.push(Event { t: s.t, kind: EventKind::SignFlip });
                }
            }
            self.last_sign = Some(s.sign_s);
        }
    }
}

/// Forward and backward records of one datum.
pub fn evolve_both(s0: &State, horizon: f64, bg: &Background, p: &ThresholdParams, opts: &EvolveOptions) -> Result<(TrajectoryRecord, TrajectoryRecord)> {
    let fwd = evolve(s0, horizon, Direction::Forward, bg, p, opts)?;
    let bwd = evolve(s0, horizon, Direction::Backward, bg, p, opts)?;
    Ok((bwd, fwd))
}
