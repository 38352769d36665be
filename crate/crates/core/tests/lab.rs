//! Small-grid runs of the experiments. The grid is coarse enough for the
//! whole file to finish in well under a minute in release mode.

use std::sync::OnceLock;

use nlkg::evolution::{strang_equilibrium, Direction, EvolveOptions, FateKind, IntegratorParams};
use nlkg::functionals::ThresholdParams;
use nlkg::lab::{ejection_audit, modal_datum, set_index, Lab, DEFAULT_THETA};
use nlkg::linearized::Background;
use nlkg::{Error, RadialGrid, State};

const DT: f64 = 1.0 / 512.0;
const HORIZON: f64 = 12.0;

fn lab() -> &'static Lab {
    static LAB: OnceLock<Lab> = OnceLock::new();
    LAB.get_or_init(|| {
        let bg = Background::compute(RadialGrid::new(40.0, 1024).unwrap()).unwrap();
        let opts = EvolveOptions { integrator: IntegratorParams { dt_max: DT, ..Default::default() }, ..Default::default() };
        Lab::new(bg, ThresholdParams::default(), opts, HORIZON).unwrap()
    })
}

fn scaled_q(a: f64) -> State {
    State::at_rest(lab().bg.gs.q.scaled(a))
}

fn set_of(s: &State) -> Option<u8> {
    lab().classify_nine(s, "test").unwrap().0.set_index
}

#[test]
fn scaled_ground_states_land_in_the_diagonal_sets() {
    assert_eq!(set_of(&scaled_q(0.8)), Some(1));
    assert_eq!(set_of(&scaled_q(1.2)), Some(2));
    assert_eq!(set_of(&scaled_q(1.5)), Some(2));
}

#[test]
fn velocity_kicks_cross_the_diagonal() {
    let l = lab();
    let a = l.k() * DEFAULT_THETA * l.default_eps();
    assert_eq!(set_of(&modal_datum(&l.bg, 0.0, a, None).unwrap()), Some(4));
    assert_eq!(set_of(&modal_datum(&l.bg, 0.0, -a, None).unwrap()), Some(3));
}

#[test]
fn table_is_a_bijection() {
    use FateKind::*;
    let kinds = [ScatterToZero, BlowUp, TrappedByPlusQ];
    let mut seen: Vec<u8> = kinds.iter().flat_map(|b| kinds.iter().map(move |f| set_index(*b, *f).unwrap())).collect();
    seen.sort();
    assert_eq!(seen, (1..=9).collect::<Vec<_>>());
    assert_eq!(set_index(Undetermined, BlowUp), None);
}

#[test]
fn scaling_threshold_is_near_one() {
    let sep = lab().bisect_separatrix(&|a| Ok(scaled_q(a)), 0.9, 1.1, Direction::Forward, 1e-6).unwrap();
    assert!((sep.a_star - 1.0).abs() < 1e-3, "a* = {}", sep.a_star);
    assert_eq!(sep.fate_lo, FateKind::ScatterToZero);
    assert_eq!(sep.fate_hi, FateKind::BlowUp);
}

#[test]
fn bisection_rejects_same_fate_bracket() {
    let err = lab().bisect_separatrix(&|a| Ok(scaled_q(a)), 0.6, 0.8, Direction::Forward, 1e-3).unwrap_err();
    assert!(matches!(err, Error::Bisection(_)), "{err}");
}

#[test]
fn equilibrium_stays_close() {
    let l = lab();
    let s = strang_equilibrium(&l.bg, DT).unwrap();
    let rec = l.evolve(&s, Direction::Forward).unwrap();
    // the discrete fixed point sits O(dt^2) from Q; it must not drift
    let d0 = rec.samples[0].dq;
    let drift = rec.samples.iter().filter(|x| x.t <= 3.0).map(|x| (x.dq - d0).abs()).fold(0.0, f64::max);
    assert!(d0 < 1e-3 && drift < 1e-3 * d0, "d_Q(0) = {d0}, drift {drift}");
}

#[test]
fn unstable_mode_ejects_at_rate_k() {
    let l = lab();
    let k = l.k();
    for lam in [4e-3, -4e-3] {
        let s0 = modal_datum(&l.bg, lam, k * lam, None).unwrap();
        let rec = l.evolve(&s0, Direction::Forward).unwrap();
        let fit = ejection_audit(&rec, l.p.r_star, &l.p, k).unwrap();
        assert!(fit.rel_err < 0.1, "rate {} vs {k}", fit.rate);
        let want = if lam > 0.0 { FateKind::BlowUp } else { FateKind::ScatterToZero };
        assert_eq!(rec.fate.kind(), want, "lam = {lam}");
    }
}

#[test]
fn stable_mode_decays_before_ejecting() {
    // pure stable data: d_Q first falls like e^{-kt}, then roundoff and the
    // nonlinearity push it out
    let l = lab();
    let k = l.k();
    let lam = 2e-2;
    let s0 = modal_datum(&l.bg, lam, -k * lam, None).unwrap();
    let rec = l.evolve(&s0, Direction::Forward).unwrap();
    let d = rec.dq();
    let t = rec.times();
    let i = d.iter().position(|x| *x < 0.25 * d[0]).expect("decay");
    let rate = (d[0] / d[i]).ln() / t[i];
    assert!((rate - k).abs() < 0.1 * k, "decay rate {rate} vs {k}");
}

#[test]
fn threshold_solutions_degenerate_to_q() {
    let l = lab();
    let k = l.k();
    let small = l.construct_threshold_w(1.0, 1e-3).unwrap();
    let smaller = l.construct_threshold_w(1.0, 5e-4).unwrap();
    assert!(small.energy_excess.abs() < 1e-10);
    // c / s tends to k as s -> 0
    let r1 = (small.c / small.s - k).abs();
    let r2 = (smaller.c / smaller.s - k).abs();
    assert!(r2 < r1 && r2 < 1e-2 * k, "{r1} {r2}");
    let minus = l.construct_threshold_w(-1.0, 1e-3).unwrap();
    assert!(minus.c < 0.0 && minus.s < 0.0);
    assert_ne!(small.forward_fate, minus.forward_fate);
}

#[test]
fn small_ensemble_is_one_pass() {
    let rep = lab().one_pass_ensemble(6, 11, 3).unwrap();
    assert!(rep.exited >= 6, "{} exits", rep.exited);
    assert_eq!(rep.returns, 0);
    assert_eq!(rep.sign_failures, 0);
    assert!(rep.pass);
}

#[test]
fn guard_rejects_long_horizons() {
    let l = lab();
    let err = nlkg::evolution::evolve(&scaled_q(0.8), 30.0, Direction::Forward, &l.bg, &l.p, &l.opts).unwrap_err();
    assert!(err.is_validation(), "{err}");
}
