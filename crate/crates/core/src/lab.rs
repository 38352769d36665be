//! Experiments built on the evolution: nine-set classification, one-pass and
//! ejection audits, separatrix bisection, threshold solutions, phase
//! portraits and the calibration of `delta_E`.
//!
//! Data near `Q` are described by the coordinates `(lambda, lambdot)` of the
//! ground mode `rho`, optionally with a component `gamma` orthogonal to it.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{detect_trapped, evolve, linear_fit, Direction, EvolveOptions, Event, EventKind, Fate, FateKind, TrajectoryRecord, TrappedWitness};
use crate::functionals::{cubic_correction, energy, inside_ball, SignValue, ThresholdParams};
use crate::linearized::{linearized_norm_sq, project_out_rho, Background, Decomposition};
use crate::radial::{RadialField, State};

/// Default `theta` of the near-`Q` constructions.
pub const DEFAULT_THETA: f64 = 0.1;

/// Default horizon of the experiments.
pub const DEFAULT_HORIZON: f64 = 40.0;

/// Default `|s|` of the threshold data `(Q + s rho, c rho)`.
pub const DEFAULT_W_AMPLITUDE: f64 = 4e-3;

/// Default side of the phase-portrait grid.
pub const DEFAULT_PORTRAIT_SIDE: usize = 41;

/// Bisection stops once the bracket is this narrow.
pub const BISECTION_WINDOW: f64 = 1e-12;

/// Fate pair to the index of the nine-set list (1-based).
pub fn set_index(backward: FateKind, forward: FateKind) -> Option<u8> {
    use FateKind::*;
    let b = match backward {
        ScatterToZero => 0,
        BlowUp => 1,
        TrappedByPlusQ | TrappedByMinusQ => 2,
        Undetermined => return None,
    };
    let f = match forward {
        ScatterToZero => 0,
        BlowUp => 1,
        TrappedByPlusQ | TrappedByMinusQ => 2,
        Undetermined => return None,
    };
    // rows: backward S, B, T; columns: forward S, B, T
    const TABLE: [[u8; 3]; 3] = [[1, 4, 5], [3, 2, 7], [6, 8, 9]];
    Some(TABLE[b][f])
}

/// Plain-language description of a set.
pub fn set_description(index: u8) -> &'static str {
    match index {
        1 => "scattering to 0 as t -> +-inf",
        2 => "finite time blow-up in both directions",
        3 => "scattering to 0 as t -> +inf, blow-up in t < 0",
        4 => "blow-up in t > 0, scattering to 0 as t -> -inf",
        5 => "trapped by +-Q as t -> +inf, scattering to 0 as t -> -inf",
        6 => "scattering to 0 as t -> +inf, trapped by +-Q as t -> -inf",
        7 => "trapped by +-Q as t -> +inf, blow-up in t < 0",
        8 => "blow-up in t > 0, trapped by +-Q as t -> -inf",
        9 => "trapped by +-Q as t -> +-inf",
        _ => "unclassified",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NineSetResult {
    pub backward: FateKind,
    pub forward: FateKind,
    pub set_index: Option<u8>,
    pub descriptor: String,
    /// `E - J(Q)`.
    pub energy_excess: f64,
    /// The datum lies above `J(Q) + eps_star^2`.
    pub energy_warning: bool,
    /// Last time of each record (negative for the backward one).
    pub t_backward: f64,
    pub t_forward: f64,
}

/// Shared read-only state of the experiments.
#[derive(Debug, Clone)]
pub struct Lab {
    pub bg: Background,
    pub p: ThresholdParams,
    pub opts: EvolveOptions,
    pub horizon: f64,
}

/// `(Q + lam rho + gamma, lamdot rho + gammadot)`.
pub fn modal_datum(bg: &Background, lam: f64, lamdot: f64, gamma: Option<(&RadialField, &RadialField)>) -> Result<State> {
    let rho = &bg.spec.rho;
    let mut u = bg.gs.q.lin_comb(1.0, rho, lam)?;
    let mut ud = rho.scaled(lamdot);
    if let Some((g, gd)) = gamma {
        u = u.lin_comb(1.0, g, 1.0)?;
        ud = ud.lin_comb(1.0, gd, 1.0)?;
    }
    State::new(u, ud, 0.0)
}

/// Time of the first sample with `d_Q > delta_S`, or the last time if none.
pub fn shadow_time(rec: &TrajectoryRecord, delta_s: f64) -> f64 {
    rec.samples
        .iter()
        .find(|s| s.dq > delta_s)
        .map(|s| s.t.abs())
        .unwrap_or_else(|| rec.last_time().abs())
}

/// The record as it would have been produced with horizon `t_end` (by
/// absolute value): later samples and events are dropped and the fate is
/// re-evaluated at the new horizon.
pub fn truncate_record(rec: &TrajectoryRecord, t_end: f64, p: &ThresholdParams) -> TrajectoryRecord {
    let t_end = t_end.abs();
    let samples: Vec<_> = rec.samples.iter().filter(|s| s.t.abs() <= t_end + 1e-12).cloned().collect();
    let mut events: Vec<Event> = rec
        .events
        .iter()
        .filter(|e| e.t.abs() <= t_end + 1e-12 && !matches!(e.kind, EventKind::Horizon | EventKind::BlowupDeclared | EventKind::ScatterDeclared))
        .copied()
        .collect();
    let last = samples.last().map(|s| s.t).unwrap_or(0.0);
    let keep_fate = match &rec.fate {
        Fate::BlowUp(w) => w.t_declared.abs() <= t_end + 1e-12,
        Fate::ScatterToZero(w) => w.t_declared.abs() <= t_end + 1e-12,
        _ => false,
    };
    let fate = if keep_fate {
        rec.fate.clone()
    } else {
        events.push(Event { t: last, kind: EventKind::Horizon });
        match detect_trapped(&samples, p) {
            Some(sigma) => {
                let residual = samples
                    .iter()
                    .filter(|s| s.t.abs() >= last.abs() - p.t_tail - 1e-9)
                    .fold(0.0f64, |m, s| m.max(s.dq));
                let w = TrappedWitness { sigma, residual, window: p.t_tail };
                if sigma > 0.0 {
                    Fate::TrappedByPlusQ(w)
                } else {
                    Fate::TrappedByMinusQ(w)
                }
            }
            None => Fate::Undetermined,
        }
    };
    if keep_fate {
        events = rec.events.iter().filter(|e| e.t.abs() <= t_end + 1e-12).copied().collect();
    }
    TrajectoryRecord { direction: rec.direction, samples, events, fate, horizon: t_end, steps: rec.steps }
}

/// Horizon-limited trapping: when the record starts with a stay of at least
/// `T_tail` within `delta_S` of `+-Q`, the record is cut where that stay ends,
/// so that the fate reports the trapped episode.
pub fn trapped_episode(rec: &TrajectoryRecord, p: &ThresholdParams) -> Option<TrajectoryRecord> {
    let first = rec.samples.first()?;
    if first.dq > p.delta_s {
        return None;
    }
    let stay = rec.samples.iter().take_while(|s| s.dq <= p.delta_s).last()?;
    if stay.t.abs() < p.t_tail {
        return None;
    }
    Some(truncate_record(rec, stay.t, p))
}

impl Lab {
    pub fn new(bg: Background, p: ThresholdParams, opts: EvolveOptions, horizon: f64) -> Result<Self> {
        p.validate()?;
        opts.integrator.validate()?;
        Ok(Lab { bg, p, opts, horizon })
    }

    pub fn k(&self) -> f64 {
        self.bg.spec.k
    }

    /// `eps = eps_star / 2`.
    pub fn default_eps(&self) -> f64 {
        0.5 * self.p.eps_star
    }

    /// Portrait extents `(|lambda|, |lambdot|)`: `4 theta eps` and four times that.
    pub fn default_portrait_extents(&self) -> (f64, f64) {
        let e = 4.0 * DEFAULT_THETA * self.default_eps();
        (e, 4.0 * e)
    }

    pub fn evolve(&self, s0: &State, direction: Direction) -> Result<TrajectoryRecord> {
        evolve(s0, self.horizon, direction, &self.bg, &self.p, &self.opts)
    }

    fn result(&self, s0: &State, bwd: &TrajectoryRecord, fwd: &TrajectoryRecord, descriptor: &str) -> NineSetResult {
        let excess = energy(s0) - self.bg.gs.jq;
        NineSetResult {
            backward: bwd.fate.kind(),
            forward: fwd.fate.kind(),
            set_index: set_index(bwd.fate.kind(), fwd.fate.kind()),
            descriptor: descriptor.to_string(),
            energy_excess: excess,
            energy_warning: excess >= self.p.eps_star * self.p.eps_star,
            t_backward: bwd.last_time(),
            t_forward: fwd.last_time(),
        }
    }

    /// Fates in both directions and the resulting set index. Data above
    /// `J(Q) + eps_star^2` are classified all the same, with a warning flag.
    pub fn classify_nine(&self, s0: &State, descriptor: &str) -> Result<(NineSetResult, TrajectoryRecord, TrajectoryRecord)> {
        let fwd = self.evolve(s0, Direction::Forward)?;
        let bwd = self.evolve(s0, Direction::Backward)?;
        Ok((self.result(s0, &bwd, &fwd, descriptor), bwd, fwd))
    }

    /// As [`Lab::classify_nine`], reporting horizon-limited trapping (see
    /// [`trapped_episode`]) in the listed directions.
    pub fn classify_with_trapping(&self, s0: &State, descriptor: &str, trapped: &[Direction]) -> Result<(NineSetResult, TrajectoryRecord, TrajectoryRecord)> {
        let mut fwd = self.evolve(s0, Direction::Forward)?;
        let mut bwd = self.evolve(s0, Direction::Backward)?;
        for d in trapped {
            let rec = match d {
                Direction::Forward => &mut fwd,
                Direction::Backward => &mut bwd,
            };
            if let Some(cut) = trapped_episode(rec, &self.p) {
                *rec = cut;
            }
        }
        Ok((self.result(s0, &bwd, &fwd, descriptor), bwd, fwd))
    }

    /// Bisection on `a` between data with different fates in `direction`.
    pub fn bisect_separatrix(
        &self,
        family: &(dyn Fn(f64) -> Result<State> + Sync),
        a_lo: f64,
        a_hi: f64,
        direction: Direction,
        window: f64,
    ) -> Result<Separatrix> {
        let fate_at = |a: f64| -> Result<(FateKind, TrajectoryRecord)> {
            let rec = self.evolve(&family(a)?, direction)?;
            Ok((rec.fate.kind(), rec))
        };
        let (f_lo, _) = fate_at(a_lo)?;
        let (f_hi, _) = fate_at(a_hi)?;
        let decisive = |f: FateKind| matches!(f, FateKind::ScatterToZero | FateKind::BlowUp);
        if f_lo == f_hi || !decisive(f_lo) || !decisive(f_hi) {
            return Err(Error::Bisection(format!(
                "fates at the ends must be ScatterToZero and BlowUp, got {} at {a_lo} and {} at {a_hi}",
                f_lo.as_str(),
                f_hi.as_str()
            )));
        }
        let (mut lo, mut hi) = (a_lo, a_hi);
        let mut history = Vec::new();
        let mut last = None;
        while (hi - lo).abs() > window {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            let (f, rec) = fate_at(mid)?;
            history.push(BisectionStep { a: mid, window: (hi - lo).abs(), fate: f, shadow_time: shadow_time(&rec, self.p.delta_s) });
            if f == f_lo {
                lo = mid;
            } else if f == f_hi {
                hi = mid;
            } else {
                // the machine limit: an undecided trajectory is the best manifold point
                last = Some((mid, rec));
                break;
            }
            last = Some((mid, rec));
        }
        let a_star = 0.5 * (lo + hi);
        let rec = match last {
            Some((a, rec)) if a == a_star => rec,
            _ => self.evolve(&family(a_star)?, direction)?,
        };
        let rec = trapped_episode(&rec, &self.p).unwrap_or(rec);
        Ok(Separatrix { a_star, window: (hi - lo).abs(), fate_lo: f_lo, fate_hi: f_hi, record: rec, history })
    }

    /// One datum per set of the classification, from the modal constructions
    /// near `Q`: the four corners directly, the remaining five by bisection
    /// along segments joining them.
    pub fn nine_set_witnesses(&self, theta: f64, eps: f64) -> Result<Vec<Witness>> {
        let k = self.k();
        let a = theta * eps;
        let corner = |set: u8| -> (f64, f64) {
            match set {
                1 => (-a, 0.0),
                2 => (a, 0.0),
                3 => (0.0, -k * a),
                4 => (0.0, k * a),
                _ => unreachable!(),
            }
        };
        let mut out = Vec::with_capacity(9);
        for set in 1..=4u8 {
            let (lam, lamdot) = corner(set);
            out.push(WitnessDatum { set, lam, lamdot, trapped: Vec::new(), bisection: None });
        }
        // set, start corner, end corner, bisection direction, trapped directions
        let segments: [(u8, u8, u8, Direction, &[Direction]); 5] = [
            (5, 1, 4, Direction::Forward, &[Direction::Forward]),
            (6, 1, 3, Direction::Backward, &[Direction::Backward]),
            (7, 3, 2, Direction::Forward, &[Direction::Forward]),
            (8, 4, 2, Direction::Backward, &[Direction::Backward]),
            (9, 1, 2, Direction::Forward, &[Direction::Forward, Direction::Backward]),
        ];
        let found: Vec<Result<WitnessDatum>> = segments
            .par_iter()
            .map(|&(set, c0, c1, dir, trapped)| {
                let (p0, p1) = (corner(c0), corner(c1));
                let point = |s: f64| (p0.0 + s * (p1.0 - p0.0), p0.1 + s * (p1.1 - p0.1));
                let family = |s: f64| {
                    let (l, ld) = point(s);
                    modal_datum(&self.bg, l, ld, None)
                };
                let sep = self.bisect_separatrix(&family, 0.0, 1.0, dir, BISECTION_WINDOW)?;
                let (lam, lamdot) = point(sep.a_star);
                Ok(WitnessDatum {
                    set,
                    lam,
                    lamdot,
                    trapped: trapped.to_vec(),
                    bisection: Some(BisectionSummary { a_star: sep.a_star, window: sep.window, steps: sep.history.len(), direction: dir }),
                })
            })
            .collect();
        for f in found {
            out.push(f?);
        }
        out.iter().map(|d| self.verify_witness(d)).collect()
    }

    /// Rebuilds a witness datum on this lab's grid and classifies it.
    pub fn verify_witness(&self, d: &WitnessDatum) -> Result<Witness> {
        let s0 = modal_datum(&self.bg, d.lam, d.lamdot, None)?;
        let descriptor = format!("lambda = {:.17e}, lambdot = {:.17e}, gamma = 0", d.lam, d.lamdot);
        let (result, bwd, fwd) = self.classify_with_trapping(&s0, &descriptor, &d.trapped)?;
        Ok(Witness {
            datum: d.clone(),
            result,
            shadow_backward: shadow_time(&bwd, self.p.delta_s),
            shadow_forward: shadow_time(&fwd, self.p.delta_s),
        })
    }

    /// Threshold solution `W+` (`sign > 0`) or `W-`: data `(Q + s rho, c rho)`
    /// with `E = J(Q)` and `c` of the sign of `s`, so that the stable
    /// coordinate `lambda - lambdot / k` nearly vanishes.
    pub fn construct_threshold_w(&self, sign: f64, s_mag: f64) -> Result<ThresholdW> {
        let s = s_mag.abs().copysign(sign);
        let base = modal_datum(&self.bg, s, 0.0, None)?;
        let deficit = self.bg.gs.jq - energy(&base);
        if !(deficit > 0.0) {
            return Err(Error::RootFind(format!("J(Q + s rho) = {} is not below J(Q) for s = {s}", energy(&base))));
        }
        // E(Q + s rho, c rho) = J(Q + s rho) + c^2 / 2 with ||rho|| = 1
        let c = (2.0 * deficit).sqrt().copysign(s);
        let s0 = modal_datum(&self.bg, s, c, None)?;
        let fwd = self.evolve(&s0, Direction::Forward)?;
        let bwd = self.evolve(&s0, Direction::Backward)?;
        let (rate, span) = decay_rate(&bwd).ok_or_else(|| Error::Threshold("no backward decay of d_Q".into()))?;
        let k = self.k();
        let rel_err = (rate - k).abs() / k;
        Ok(ThresholdW {
            sign: sign.signum(),
            s,
            c,
            energy_excess: energy(&s0) - self.bg.gs.jq,
            forward_fate: fwd.fate.kind(),
            backward_rate: rate,
            rate_rel_err: rel_err,
            fit_span: span,
            forward: fwd,
            backward: bwd,
        })
    }

    /// Forward fates on an `n x n` grid over `|lambda0| <= lam_extent`,
    /// `|lambdot0| <= lamdot_extent` with `gamma = 0`. Backward fates follow
    /// from the reflection `lambdot -> -lambdot`.
    pub fn phase_portrait(&self, lam_extent: f64, lamdot_extent: f64, n: usize) -> Result<Portrait> {
        if n < 3 || n % 2 == 0 {
            return Err(Error::InvalidParams(format!("portrait side must be odd and at least 3, got {n}")));
        }
        let bound = self.p.delta_e;
        if !(lam_extent > 0.0 && lam_extent <= bound && lamdot_extent > 0.0 && lamdot_extent / self.k() <= bound) {
            return Err(Error::InvalidParams(format!(
                "portrait extents ({lam_extent}, {lamdot_extent}) must be positive with |lambda|, |lambdot / k| <= delta_E = {bound}"
            )));
        }
        let axis = |e: f64| -> Vec<f64> { (0..n).map(|i| e * (2.0 * i as f64 / (n - 1) as f64 - 1.0)).collect() };
        let (lam, lamdot) = (axis(lam_extent), axis(lamdot_extent));
        let nodes: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        let fates: Vec<Result<FateKind>> = nodes
            .par_iter()
            .map(|&(i, j)| {
                let s0 = modal_datum(&self.bg, lam[i], lamdot[j], None)?;
                Ok(self.evolve(&s0, Direction::Forward)?.fate.kind())
            })
            .collect();
        let mut forward = Vec::with_capacity(n * n);
        for f in fates {
            forward.push(f?);
        }
        Ok(Portrait::new(lam, lamdot, forward, self.k()))
    }

    /// Random data near `+Q` or `-Q` below `J(Q) + eps_star^2`, starting inside
    /// the `R_*`-ball. Batches of `count` data are evolved forward and audited
    /// until `count` of them have exited the ball (at most `max_batches`).
    pub fn one_pass_ensemble(&self, count: usize, seed: u64, max_batches: usize) -> Result<EnsembleReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = self.p.eps_star * self.p.eps_star;
        let mut reports = Vec::new();
        let mut exits = 0;
        for _ in 0..max_batches {
            let mut batch = Vec::with_capacity(count);
            let mut tries = 0;
            while batch.len() < count {
                tries += 1;
                if tries > 1000 * count.max(1) {
                    return Err(Error::InvalidParams("no random data below J(Q) + eps_star^2 found".into()));
                }
                let radius = self.p.r_star * rng.random_range(0.05..0.9);
                let sigma = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let (v, vd, _) = random_perturbation(&self.bg, &mut rng, radius, true)?;
                let s0 = State::new(self.bg.gs.q.lin_comb(sigma, &v, sigma)?, vd.scaled(sigma), 0.0)?;
                if energy(&s0) - self.bg.gs.jq < limit {
                    batch.push(s0);
                }
            }
            let recs: Vec<Result<(TrajectoryRecord, f64)>> = batch
                .par_iter()
                .map(|s0| Ok((self.evolve(s0, Direction::Forward)?, energy(s0) - self.bg.gs.jq)))
                .collect();
            for r in recs {
                let (rec, excess) = r?;
                let mut rep = one_pass_audit(&rec, self.p.r_star, excess, self.bg.gs.jq, &self.p);
                if rep.exited {
                    rep.ejection = ejection_audit(&rec, self.p.r_star, &self.p, self.k()).ok();
                }
                exits += rep.exited as usize;
                reports.push(rep);
            }
            if exits >= count {
                break;
            }
        }
        let audited: Vec<&OnePassReport> = reports.iter().filter(|r| r.exited).collect();
        let returns = audited.iter().filter(|r| !r.returns.is_empty()).count();
        let sign_failures = audited.iter().filter(|r| !r.sign_constant || !r.fate_sign_consistent).count();
        Ok(EnsembleReport {
            seed,
            generated: reports.len(),
            exited: exits,
            returns,
            sign_failures,
            pass: exits >= count && returns == 0 && sign_failures == 0,
            reports,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BisectionStep {
    pub a: f64,
    pub window: f64,
    pub fate: FateKind,
    pub shadow_time: f64,
}

#[derive(Debug, Clone)]
pub struct Separatrix {
    pub a_star: f64,
    pub window: f64,
    pub fate_lo: FateKind,
    pub fate_hi: FateKind,
    /// Trajectory from the final midpoint.
    pub record: TrajectoryRecord,
    pub history: Vec<BisectionStep>,
}

/// Fit of the shadowing time against `log(1 / window)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

impl Separatrix {
    /// Least squares `tau = slope log(1/w) + c` over the bisection steps;
    /// the hyperbolic prediction is `slope = 1/k`.
    pub fn shadow_fit(&self) -> Option<ShadowFit> {
        let xs: Vec<f64> = self.history.iter().map(|h| (1.0 / h.window).ln()).collect();
        let ys: Vec<f64> = self.history.iter().map(|h| h.shadow_time).collect();
        if xs.len() < 3 {
            return None;
        }
        let (slope, intercept, ss) = linear_fit(&xs, &ys);
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let st: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let r2 = if st > 0.0 { 1.0 - ss / st } else { 0.0 };
        Some(ShadowFit { slope, intercept, r2, points: xs.len() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BisectionSummary {
    pub a_star: f64,
    pub window: f64,
    pub steps: usize,
    pub direction: Direction,
}

/// Modal description of a witness, transferable between grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessDatum {
    pub set: u8,
    pub lam: f64,
    pub lamdot: f64,
    /// Directions in which trapping is reported horizon-limited.
    pub trapped: Vec<Direction>,
    pub bisection: Option<BisectionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub datum: WitnessDatum,
    pub result: NineSetResult,
    pub shadow_backward: f64,
    pub shadow_forward: f64,
}

impl Witness {
    pub fn realized(&self) -> bool {
        self.result.set_index == Some(self.datum.set)
    }
}

/// Summary JSON of a witness suite.
pub fn witness_summary(witnesses: &[Witness]) -> serde_json::Value {
    serde_json::json!({
        "witnesses": witnesses,
        "realized": witnesses.iter().filter(|w| w.realized()).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnePassReport {
    pub r: f64,
    /// `R` exceeds twice the square root of the energy excess.
    pub hypothesis_ok: bool,
    pub exited: bool,
    pub exit_time: Option<f64>,
    /// `(t, entered)` for every crossing of the level `R`.
    pub crossings: Vec<(f64, bool)>,
    /// Times of samples with `d_Q <= R` after the first exit.
    pub returns: Vec<f64>,
    /// Decreases of `d_Q` between the exit and the first time `d_Q >= delta_X`.
    pub monotonicity_violations: usize,
    /// Sign values outside `B(+-Q)` after the exit, with the time they started.
    pub sign_history: Vec<(f64, SignValue)>,
    pub sign_constant: bool,
    pub fate: FateKind,
    /// Scattering ends with sign `+1` and blow-up with `-1` outside `B(+-Q)`.
    pub fate_sign_consistent: bool,
    pub pass: bool,
    /// Growth fit of the exit episode; filled in by the ensemble, not part of `pass`.
    pub ejection: Option<EjectionFit>,
}

/// Scans `d_Q` for the first exit from the `R`-ball (a sample at or below `R`
/// followed by one above it) and fails if any later sample is back at or
/// below `R`, or if the sign functional changes outside `B(+-Q)`.
pub fn one_pass_audit(rec: &TrajectoryRecord, r: f64, energy_excess: f64, jq: f64, p: &ThresholdParams) -> OnePassReport {
    let s = &rec.samples;
    let mut crossings = Vec::new();
    for i in 1..s.len() {
        if s[i - 1].dq <= r && s[i].dq > r {
            crossings.push((s[i].t, false));
        } else if s[i - 1].dq > r && s[i].dq <= r {
            crossings.push((s[i].t, true));
        }
    }
    let exit = (1..s.len()).find(|&i| s[i - 1].dq <= r && s[i].dq > r);
    let mut report = OnePassReport {
        r,
        hypothesis_ok: r > 2.0 * energy_excess.max(0.0).sqrt() && r <= p.r_star,
        exited: exit.is_some(),
        exit_time: exit.map(|i| s[i].t),
        crossings,
        returns: Vec::new(),
        monotonicity_violations: 0,
        sign_history: Vec::new(),
        sign_constant: true,
        fate: rec.fate.kind(),
        fate_sign_consistent: true,
        pass: true,
        ejection: None,
    };
    let final_sign = s.iter().rev().find(|x| !inside_ball(x.dq, x.e, jq)).map(|x| x.sign_s);
    report.fate_sign_consistent = match (report.fate, final_sign) {
        (FateKind::ScatterToZero, Some(v)) => v == SignValue::Plus,
        (FateKind::BlowUp, Some(v)) => v == SignValue::Minus,
        _ => true,
    };
    let Some(e) = exit else {
        return report;
    };
    report.returns = s[e..].iter().filter(|x| x.dq <= r).map(|x| x.t).collect();
    let mut reached = false;
    for i in e + 1..s.len() {
        if reached {
            break;
        }
        if s[i].dq < s[i - 1].dq {
            report.monotonicity_violations += 1;
        }
        reached = s[i].dq >= p.delta_x;
    }
    for x in &s[e..] {
        if inside_ball(x.dq, x.e, jq) {
            continue;
        }
        if report.sign_history.last().map(|h| h.1) != Some(x.sign_s) {
            report.sign_history.push((x.t, x.sign_s));
        }
    }
    report.sign_constant = report.sign_history.len() <= 1;
    report.pass = report.returns.is_empty() && report.sign_constant && report.fate_sign_consistent;
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub seed: u64,
    pub generated: usize,
    pub exited: usize,
    pub returns: usize,
    pub sign_failures: usize,
    pub pass: bool,
    pub reports: Vec<OnePassReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EjectionFit {
    pub t_a: f64,
    pub t_b: f64,
    pub samples: usize,
    pub rate: f64,
    pub k: f64,
    pub rel_err: f64,
    pub rate_ok: bool,
    /// Sign functional after the exit.
    pub sign: f64,
    /// `-sign * lambda > 0` throughout the episode.
    pub sign_consistent: bool,
    /// `min sign K_s / (d_Q - C_* d_Q(t_a))` over the episode for `s = 0, 2`,
    /// where the denominator is positive.
    pub k_bound: [f64; 2],
}

/// Fits the exponential growth of `d_Q` over the first episode from `R` to
/// `delta_X`.
pub fn ejection_audit(rec: &TrajectoryRecord, r: f64, p: &ThresholdParams, k: f64) -> Result<EjectionFit> {
    let s = &rec.samples;
    let end = (0..s.len())
        .find(|&i| s[i].dq >= p.delta_x)
        .ok_or_else(|| Error::NoEpisode(format!("d_Q never reaches delta_X = {}", p.delta_x)))?;
    // the episode starts after the last minimum before `delta_X`, at level `R`
    let low = (0..=end).min_by(|&i, &j| s[i].dq.total_cmp(&s[j].dq)).unwrap_or(0);
    if s[low].dq > r {
        return Err(Error::NoEpisode(format!("d_Q stays above R = {r} before reaching delta_X")));
    }
    let start = (low..=end).find(|&i| s[i].dq >= r).unwrap_or(end);
    if end < start + 2 {
        return Err(Error::NoEpisode(format!("episode from R = {r} to delta_X has fewer than three samples")));
    }
    let ep = &s[start..=end];
    let xs: Vec<f64> = ep.iter().map(|x| x.t.abs()).collect();
    let ys: Vec<f64> = ep.iter().map(|x| x.dq.ln()).collect();
    let (rate, _, _) = linear_fit(&xs, &ys);
    let rel_err = (rate - k).abs() / k;
    let sign = match ep.last().map(|x| x.sign_s) {
        Some(SignValue::Minus) => -1.0,
        _ => 1.0,
    };
    let sign_consistent = ep.iter().all(|x| -sign * x.lam > 0.0);
    let d0 = ep[0].dq;
    let mut k_bound = [f64::INFINITY; 2];
    for x in ep {
        let den = x.dq - p.c_star * d0;
        if den > 0.0 {
            k_bound[0] = k_bound[0].min(sign * x.k0 / den);
            k_bound[1] = k_bound[1].min(sign * x.k2 / den);
        }
    }
    Ok(EjectionFit {
        t_a: ep[0].t,
        t_b: ep[ep.len() - 1].t,
        samples: ep.len(),
        rate,
        k,
        rel_err,
        rate_ok: rel_err <= 0.1,
        sign,
        sign_consistent,
        k_bound,
    })
}

/// Exponential decay rate of `d_Q` from the start of the record down to the
/// geometric mean of its initial value and its first local minimum; returns
/// the rate and the fitted time span.
pub fn decay_rate(rec: &TrajectoryRecord) -> Option<(f64, f64)> {
    let s = &rec.samples;
    let min_i = (1..s.len()).find(|&i| i + 1 == s.len() || s[i + 1].dq > s[i].dq)?;
    if min_i < 2 {
        return None;
    }
    let floor = (s[0].dq * s[min_i].dq).sqrt();
    let end = (0..=min_i).find(|&i| s[i].dq <= floor).unwrap_or(min_i).max(2);
    let xs: Vec<f64> = s[..=end].iter().map(|x| x.t.abs()).collect();
    let ys: Vec<f64> = s[..=end].iter().map(|x| x.dq.ln()).collect();
    let (slope, _, _) = linear_fit(&xs, &ys);
    Some((-slope, xs[end] - xs[0]))
}

#[derive(Debug, Clone)]
pub struct ThresholdW {
    pub sign: f64,
    pub s: f64,
    pub c: f64,
    pub energy_excess: f64,
    pub forward_fate: FateKind,
    pub backward_rate: f64,
    pub rate_rel_err: f64,
    pub fit_span: f64,
    pub forward: TrajectoryRecord,
    pub backward: TrajectoryRecord,
}

/// Forward fates on a square grid and the derived boundary fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Portrait {
    pub lam: Vec<f64>,
    pub lamdot: Vec<f64>,
    /// Row-major in `(lam index, lamdot index)`.
    pub forward: Vec<FateKind>,
    pub k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
    /// `|slope + k| / k`.
    pub rel_err: f64,
}

impl Portrait {
    pub fn new(lam: Vec<f64>, lamdot: Vec<f64>, forward: Vec<FateKind>, k: f64) -> Self {
        Portrait { lam, lamdot, forward, k }
    }

    pub fn side(&self) -> usize {
        self.lam.len()
    }

    pub fn forward_at(&self, i: usize, j: usize) -> FateKind {
        self.forward[i * self.side() + j]
    }

    /// Backward fate of node `(i, j)`: the forward fate of `(i, n-1-j)`.
    pub fn backward_at(&self, i: usize, j: usize) -> FateKind {
        self.forward_at(i, self.side() - 1 - j)
    }

    /// For each `lambda` column, the midpoint of the first scatter-to-blow-up
    /// transition in increasing `lambdot`.
    pub fn boundary_points(&self) -> Vec<(f64, f64)> {
        let n = self.side();
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 1..n {
                if self.forward_at(i, j - 1) == FateKind::ScatterToZero && self.forward_at(i, j) == FateKind::BlowUp {
                    pts.push((self.lam[i], 0.5 * (self.lamdot[j - 1] + self.lamdot[j])));
                    break;
                }
            }
        }
        pts
    }

    /// Least-squares line through the boundary points.
    pub fn boundary_fit(&self) -> Option<BoundaryFit> {
        let pts = self.boundary_points();
        if pts.len() < 3 {
            return None;
        }
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let (slope, intercept, ss) = linear_fit(&xs, &ys);
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let st: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        Some(BoundaryFit {
            slope,
            intercept,
            r2: if st > 0.0 { 1.0 - ss / st } else { 0.0 },
            points: pts.len(),
            rel_err: (slope + self.k).abs() / self.k,
        })
    }

    /// Rows `lambda lamdot fate_fwd fate_bwd set_index`.
    pub fn to_text(&self) -> String {
        let n = self.side();
        let mut out = String::from("lambda lamdot fate_fwd fate_bwd set_index\n");
        for i in 0..n {
            for j in 0..n {
                let (f, b) = (self.forward_at(i, j), self.backward_at(i, j));
                let idx = set_index(b, f).map(|x| x.to_string()).unwrap_or_else(|| "0".into());
                out.push_str(&format!("{:.16e} {:.16e} {} {} {}\n", self.lam[i], self.lamdot[j], f.as_str(), b.as_str(), idx));
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Smooth radial bump used to build random perturbations.
fn bump(rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    (rng.random_range(-1.0..1.0), rng.random_range(0.0..6.0), rng.random_range(0.4..2.0))
}

fn random_profile(bg: &Background, rng: &mut ChaCha8Rng) -> RadialField {
    let bumps: Vec<(f64, f64, f64)> = (0..3).map(|_| bump(rng)).collect();
    let f = RadialField::from_fn(*bg.grid(), |r| {
        bumps.iter().map(|&(c, r0, s)| c * (-((r - r0) / s).powi(2)).exp()).sum()
    });
    project_out_rho(&f, &bg.spec)
}

/// Random `(v, v_t)` about `+Q` with linearized energy norm `radius`.
///
/// The ground-mode coordinates and two orthogonal bump profiles get random
/// weights; with `velocity = false` the time derivative vanishes.
pub fn random_perturbation(bg: &Background, rng: &mut ChaCha8Rng, radius: f64, velocity: bool) -> Result<(RadialField, RadialField, Decomposition)> {
    let lam = rng.random_range(-1.0..1.0);
    let lamdot = if velocity { rng.random_range(-1.0..1.0) * bg.spec.k } else { 0.0 };
    let wg = rng.random_range(0.0..1.0f64);
    let gamma = random_profile(bg, rng).scaled(wg);
    let gammadot = if velocity { random_profile(bg, rng).scaled(rng.random_range(0.0..1.0)) } else { RadialField::zeros(*bg.grid()) };
    let mut d = Decomposition { sigma: 1.0, lam, lamdot, gamma, gammadot };
    let n2 = linearized_norm_sq(&d, &bg.spec, &bg.lplus);
    if !(n2 > 0.0) {
        return Err(Error::InvalidField("degenerate random perturbation".into()));
    }
    let f = radius / n2.sqrt();
    d.lam *= f;
    d.lamdot *= f;
    d.gamma = d.gamma.scaled(f);
    d.gammadot = d.gammadot.scaled(f);
    let (v, vd) = d.v(&bg.spec);
    Ok((v, vd, d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCalibration {
    pub delta_e: f64,
    /// `(delta, max |C(v)| / ||v||_E^2)` for each dyadic candidate tried.
    pub tried: Vec<(f64, f64)>,
    pub samples: usize,
    pub seed: u64,
}

/// Largest dyadic `delta` such that `|C(v)| <= ||v||_E^2 / 2` for `samples`
/// random perturbations with `||v||_E` uniform in `[0, 4 delta]`.
pub fn calibrate_delta_e(bg: &Background, samples: usize, seed: u64) -> Result<DeltaCalibration> {
    let mut tried = Vec::new();
    for j in (-12..=2).rev() {
        let delta = 2f64.powi(j);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (j as i64 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let radius = 4.0 * delta * rng.random_range(0.0..1.0f64);
            if radius == 0.0 {
                continue;
            }
            let velocity = rng.random_bool(0.5);
            let (v, _, d) = random_perturbation(bg, &mut rng, radius, velocity)?;
            let n2 = linearized_norm_sq(&d, &bg.spec, &bg.lplus);
            worst = worst.max(cubic_correction(&v, &bg.gs.q).abs() / n2);
        }
        tried.push((delta, worst));
        if worst <= 0.5 {
            return Ok(DeltaCalibration { delta_e: delta, tried, samples, seed });
        }
    }
    Err(Error::InvalidParams("no dyadic delta_E down to 2^-12 passes the calibration".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::DiagnosticsSample;

    fn sample(t: f64, dq: f64, sign: SignValue, lam: f64) -> DiagnosticsSample {
        DiagnosticsSample {
            t, e: 0.0, j_u: 0.0, k0: 1.0, k2: 1.0, dq, sigma: 1.0, sign_s: sign,
            anomaly: false, lam, lamdot: 0.0, lam_plus: 0.0, lam_minus: 0.0,
            h1_norm: 0.0, l4_norm: 0.0, kin_norm: 0.0, grad_sq: 0.0, u_sup: 0.0, vw: None,
        }
    }

    fn record(dq: &[f64]) -> TrajectoryRecord {
        TrajectoryRecord {
            direction: Direction::Forward,
            samples: dq.iter().enumerate().map(|(i, &d)| sample(0.1 * i as f64, d, SignValue::Plus, -1.0)).collect(),
            events: Vec::new(),
            fate: Fate::Undetermined,
            horizon: 1.0,
            steps: 0,
        }
    }

    #[test]
    fn set_table_matches_the_list() {
        use FateKind::*;
        assert_eq!(set_index(ScatterToZero, ScatterToZero), Some(1));
        assert_eq!(set_index(BlowUp, BlowUp), Some(2));
        assert_eq!(set_index(BlowUp, ScatterToZero), Some(3));
        assert_eq!(set_index(ScatterToZero, BlowUp), Some(4));
        assert_eq!(set_index(ScatterToZero, TrappedByPlusQ), Some(5));
        assert_eq!(set_index(TrappedByMinusQ, ScatterToZero), Some(6));
        assert_eq!(set_index(BlowUp, TrappedByPlusQ), Some(7));
        assert_eq!(set_index(TrappedByPlusQ, BlowUp), Some(8));
        assert_eq!(set_index(TrappedByPlusQ, TrappedByMinusQ), Some(9));
        assert_eq!(set_index(Undetermined, BlowUp), None);
    }

    #[test]
    fn audit_flags_artificial_return() {
        let p = ThresholdParams::default();
        let r = p.r_star;
        let clean = record(&[0.5 * r, 0.8 * r, 1.5 * r, 3.0 * r, 6.0 * r, 10.0 * r]);
        let rep = one_pass_audit(&clean, r, 0.0, 0.0, &p);
        assert!(rep.exited && rep.pass);
        assert_eq!(rep.monotonicity_violations, 0);
        let back = record(&[0.5 * r, 1.5 * r, 3.0 * r, 0.9 * r, 2.0 * r]);
        let rep = one_pass_audit(&back, r, 0.0, 0.0, &p);
        assert!(!rep.pass);
        assert_eq!(rep.returns.len(), 1);
        let never = record(&[2.0 * r, 3.0 * r]);
        let rep = one_pass_audit(&never, r, 0.0, 0.0, &p);
        assert!(!rep.exited && rep.pass);
    }

    #[test]
    fn audit_flags_sign_flip() {
        let p = ThresholdParams::default();
        let r = p.r_star;
        let mut rec = record(&[0.5 * r, 2.0 * r, 4.0 * r, 8.0 * r]);
        rec.samples[3].sign_s = SignValue::Minus;
        let rep = one_pass_audit(&rec, r, 0.0, 0.0, &p);
        assert!(!rep.sign_constant && !rep.pass);
    }

    #[test]
    fn ejection_fit_on_exponential() {
        let p = ThresholdParams::default();
        let k = 3.9;
        let dq: Vec<f64> = (0..40).map(|i| 0.01 * (k * 0.1 * i as f64).exp()).collect();
        let mut rec = record(&dq);
        for s in rec.samples.iter_mut() {
            s.lam = -s.dq / k;
        }
        let fit = ejection_audit(&rec, p.r_star, &p, k).unwrap();
        assert!(fit.rel_err < 1e-10 && fit.rate_ok && fit.sign_consistent);
        assert!(ejection_audit(&record(&[0.5, 0.4]), p.r_star, &p, k).is_err());
    }

    #[test]
    fn truncation_reports_trapping() {
        let p = ThresholdParams::default();
        let mut dq = vec![1e-3; 40];
        dq.extend([0.4, 0.8, 2.0, 5.0]);
        let rec = record(&dq);
        let cut = trapped_episode(&rec, &p).unwrap();
        assert_eq!(cut.fate.kind(), FateKind::TrappedByPlusQ);
        assert!(cut.samples.iter().all(|s| s.dq <= p.delta_s));
        let short = record(&[1e-3, 1e-3, 2.0, 5.0]);
        assert!(trapped_episode(&short, &p).is_none());
    }

    #[test]
    fn portrait_boundary_fit() {
        let n = 21;
        let k = 2.0;
        let lam: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        let lamdot: Vec<f64> = lam.iter().map(|x| 2.3 * x).collect();
        let mut fwd = Vec::new();
        for i in 0..n {
            for j in 0..n {
                fwd.push(if lam[i] + lamdot[j] / k > 1e-9 { FateKind::BlowUp } else { FateKind::ScatterToZero });
            }
        }
        let p = Portrait::new(lam, lamdot, fwd, k);
        let fit = p.boundary_fit().unwrap();
        assert!(fit.rel_err < 0.05, "{fit:?}");
        assert_eq!(p.backward_at(0, 0), p.forward_at(0, n - 1));
        assert!(p.to_text().starts_with("lambda lamdot fate_fwd fate_bwd set_index\n"));
    }
}
