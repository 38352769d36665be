//! Scalar functionals: energy, the scaling derivatives `K0`, `K2`, the
//! nonlinear distance `d_Q` to `{+Q, -Q}`, the sign functional, the
//! localized virial and exterior energies.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearized::{decompose_with_sign, linearized_norm_sq, Background, Decomposition};
use crate::radial::{grad_sq, h1_sq, inner_unchecked, l2_sq, l4_pow4, RadialField, State};

/// `E = int (u_t^2 + |grad u|^2 + u^2)/2 - u^4/4`.
pub fn energy(s: &State) -> f64 {
    0.5 * (l2_sq(&s.udot) + h1_sq(&s.u)) - 0.25 * l4_pow4(&s.u)
}

/// Static energy `J(u) = ||u||_{H^1}^2 / 2 - ||u||_4^4 / 4`.
pub fn static_energy(u: &RadialField) -> f64 {
    0.5 * h1_sq(u) - 0.25 * l4_pow4(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KValues {
    pub k0: f64,
    pub k2: f64,
    pub g0: f64,
    pub g2: f64,
}

pub fn k_functionals(u: &RadialField) -> KValues {
    let g = grad_sq(u);
    let m = l2_sq(u);
    let p = l4_pow4(u);
    KValues {
        k0: g + m - p,
        k2: g - 0.75 * p,
        g0: 0.25 * (g + m),
        g2: g / 6.0 + 0.5 * m,
    }
}

/// `4E - K0 - (||u||_{H^1}^2 + 2 ||u_t||^2)`, which vanishes identically.
pub fn energy_identity_defect(s: &State) -> f64 {
    4.0 * energy(s) - k_functionals(&s.u).k0 - (h1_sq(&s.u) + 2.0 * l2_sq(&s.udot))
}

/// `(J, K0, K2)` of `a Q`.
pub fn scaled_q_identities(a: f64, bg: &Background) -> (f64, f64, f64) {
    let u = bg.gs.q.scaled(a);
    let k = k_functionals(&u);
    (static_energy(&u), k.k0, k.k2)
}

/// C^2 cutoff: 1 on `[0, 1]`, 0 on `[2, inf)`, quintic smoothstep between.
pub fn chi(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.0
    } else if x >= 2.0 {
        0.0
    } else {
        let t = 2.0 - x;
        t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    }
}

/// Higher-order energy remainder `C(v) = <Q|v^3> + ||v||_4^4 / 4`.
pub fn cubic_correction(v: &RadialField, q: &RadialField) -> f64 {
    let grid = v.grid();
    let (vv, qq) = (v.values(), q.values());
    let mut acc = 0.0;
    for i in 0..grid.interior() {
        let r = grid.r(i);
        let x = vv[i];
        acc += r * r * x * x * x * (qq[i] + 0.25 * x);
    }
    4.0 * PI * grid.h() * acc
}

/// Detector and threshold constants. Relations between them are checked by
/// [`ThresholdParams::validate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdParams {
    pub delta_e: f64,
    pub delta_x: f64,
    pub delta_s: f64,
    pub delta_star: f64,
    pub eps_star: f64,
    pub r_star: f64,
    pub c_star: f64,
    pub eta_scat: f64,
    pub u_max: f64,
    pub t_win: f64,
    pub t_tail: f64,
    pub mu: f64,
}

/// Calibrated radius of validity of the quadratic energy expansion.
pub const DEFAULT_DELTA_E: f64 = 0.25;

impl ThresholdParams {
    /// The chain of defaults derived from `delta_e`.
    pub fn from_delta_e(delta_e: f64) -> Self {
        let c_star = 1.0;
        let delta_x = delta_e;
        let delta_s = delta_x / (2.0 * c_star);
        let delta_star = delta_s / 2.0;
        let r_star = delta_s / 4.0;
        ThresholdParams {
            delta_e,
            delta_x,
            delta_s,
            delta_star,
            eps_star: r_star / 4.0,
            r_star,
            c_star,
            eta_scat: 0.05,
            u_max: 1e6,
            t_win: 4.0,
            t_tail: 2.0,
            mu: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("delta_e", self.delta_e),
            ("delta_x", self.delta_x),
            ("delta_s", self.delta_s),
            ("delta_star", self.delta_star),
            ("eps_star", self.eps_star),
            ("r_star", self.r_star),
            ("c_star", self.c_star),
            ("eta_scat", self.eta_scat),
            ("u_max", self.u_max),
            ("t_win", self.t_win),
            ("t_tail", self.t_tail),
            ("mu", self.mu),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be positive and finite, got {v}")));
            }
        }
        let lhs = 2.0 * self.c_star * self.delta_s;
        if (lhs - self.delta_x).abs() > 1e-12 * self.delta_x || self.delta_x > self.delta_e {
            return Err(Error::InvalidParams(format!(
                "relation 2*c_star*delta_s = delta_x <= delta_e violated: 2*c_star*delta_s = {lhs}, delta_x = {}, delta_e = {}",
                self.delta_x, self.delta_e
            )));
        }
        if self.c_star < 1.0 {
            return Err(Error::InvalidParams(format!("c_star must be at least 1, got {}", self.c_star)));
        }
        if !(self.eps_star < self.r_star / 2.0 && self.r_star / 2.0 < self.delta_s) {
            return Err(Error::InvalidParams(format!(
                "ordering eps_star < r_star/2 < delta_s violated: {} , {} , {}",
                self.eps_star,
                self.r_star / 2.0,
                self.delta_s
            )));
        }
        if !(self.delta_star <= self.delta_s && self.r_star < self.delta_star) {
            return Err(Error::InvalidParams(format!(
                "ordering r_star < delta_star <= delta_s violated: {} , {} , {}",
                self.r_star, self.delta_star, self.delta_s
            )));
        }
        if self.eta_scat >= 1.0 {
            return Err(Error::InvalidParams(format!("eta_scat must be below 1, got {}", self.eta_scat)));
        }
        Ok(())
    }
}

impl Default for ThresholdParams {
    fn default() -> Self {
        ThresholdParams::from_delta_e(DEFAULT_DELTA_E)
    }
}

/// `d_sigma` for one sign together with its ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct Distance {
    pub dq: f64,
    pub sigma: f64,
    /// `C(v)` at the minimizing sign.
    pub c_v: f64,
    /// Linearized norm `||v||_E` at the minimizing sign.
    pub norm_e: f64,
    pub decomposition: Decomposition,
}

fn d_sigma(s: &State, sigma: f64, bg: &Background, delta_e: f64) -> Result<Distance> {
    let d = decompose_with_sign(s, sigma, &bg.spec, &bg.gs)?;
    let n2 = linearized_norm_sq(&d, &bg.spec, &bg.lplus).max(0.0);
    let norm_e = n2.sqrt();
    let (v, _) = d.v(&bg.spec);
    let c_v = cubic_correction(&v, &bg.gs.q);
    let d2 = n2 - chi(norm_e / (2.0 * delta_e)) * c_v;
    Ok(Distance { dq: d2.max(0.0).sqrt(), sigma, c_v, norm_e, decomposition: d })
}

/// `d_Q = min over sigma of d_sigma`; ties resolve to `+Q`.
pub fn distance_dq(s: &State, bg: &Background, p: &ThresholdParams) -> Result<Distance> {
    let plus = d_sigma(s, 1.0, bg, p.delta_e)?;
    let minus = d_sigma(s, -1.0, bg, p.delta_e)?;
    Ok(if minus.dq < plus.dq { minus } else { plus })
}

/// `B(+-Q)`: `d_Q^2 <= 2 (E - J(Q))`.
pub fn inside_ball(dq: f64, e: f64, jq: f64) -> bool {
    dq * dq <= 2.0 * (e - jq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignValue {
    Plus,
    Minus,
    InsideBall,
}

impl SignValue {
    pub fn from_sign(x: f64) -> Self {
        if x >= 0.0 {
            SignValue::Plus
        } else {
            SignValue::Minus
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SignValue::Plus => "+1",
            SignValue::Minus => "-1",
            SignValue::InsideBall => "ball",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignReport {
    pub value: SignValue,
    /// Both branches were evaluated and disagreed.
    pub anomaly: bool,
}

/// The sign functional. Near `+-Q` it is `-sign lambda`, far away
/// `sign K0`; in the overlap both are computed and compared.
pub fn sign_functional(dist: &Distance, e: f64, k0: f64, jq: f64, p: &ThresholdParams) -> SignReport {
    if inside_ball(dist.dq, e, jq) {
        return SignReport { value: SignValue::InsideBall, anomaly: false };
    }
    let near = SignValue::from_sign(-dist.decomposition.lam);
    let far = SignValue::from_sign(k0);
    if dist.dq <= p.delta_e {
        let anomaly = dist.dq >= p.delta_s && near != far;
        SignReport { value: near, anomaly }
    } else {
        SignReport { value: far, anomaly: false }
    }
}

/// Two-cone cutoff of the localized virial: radius `t - t1 + shift` before
/// the midpoint of `[t1, t2]` and `t2 - t + shift` after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirialCutoff {
    pub t1: f64,
    pub t2: f64,
    pub shift: f64,
}

impl VirialCutoff {
    pub fn radius(&self, t: f64) -> f64 {
        if t < 0.5 * (self.t1 + self.t2) {
            t - self.t1 + self.shift
        } else {
            self.t2 - t + self.shift
        }
    }
}

/// Default shift `S = 3 |log R|`.
pub fn default_virial_shift(r: f64) -> f64 {
    3.0 * r.ln().abs()
}

/// Localized virial `V_w = <w u_t | D2 u>` with `D2 = (x.grad + grad.x) / 2`,
/// normalized so that `dV/dt = -K2` for `w = 1`.
///
/// In `w = r u` form `D2 u` becomes `r w' + w / 2`; the discretization
/// `r_i (w_{i+1} - w_{i-1}) / 2h + (w_{i+1} + w_{i-1}) / 4` is exactly
/// antisymmetric, so the kinetic contribution to `dV/dt` cancels on the grid.
pub fn virial(s: &State, cutoff: Option<&VirialCutoff>) -> f64 {
    let grid = s.grid();
    let h = grid.h();
    let w = s.u.w();
    let wd = s.udot.w();
    let m = w.len();
    let radius = cutoff.map(|c| c.radius(s.t));
    let mut acc = 0.0;
    for i in 0..m {
        let left = if i > 0 { w[i - 1] } else { 0.0 };
        let right = if i + 1 < m { w[i + 1] } else { 0.0 };
        let r = grid.r(i);
        let aw = r * (right - left) / (2.0 * h) + 0.25 * (right + left);
        let weight = match radius {
            Some(rad) if rad > 0.0 => chi(r / rad),
            Some(_) => 0.0,
            None => 1.0,
        };
        acc += weight * wd[i] * aw;
    }
    4.0 * PI * h * acc
}

/// Free and nonlinear energies outside `radius`: integrals of
/// `e0 = (u_t^2 + |grad u|^2 + u^2) / 2` and of `e0 - u^4 / 4` over `r > radius`.
pub fn exterior_energy(s: &State, radius: f64) -> Result<(f64, f64)> {
    let grid = s.grid();
    if !(radius < grid.r_max()) {
        return Err(Error::InvalidParams(format!(
            "exterior radius {radius} must be below r_max = {}",
            grid.r_max()
        )));
    }
    let h = grid.h();
    let w = s.u.w();
    let wd = s.udot.w();
    let m = w.len();
    let wat = |j: usize| if j == 0 || j > m { 0.0 } else { w[j - 1] };
    // node j sits at r = j h; j0 is the first node at or beyond the radius
    let j0 = if radius <= 0.0 { 0 } else { (radius / h - 1e-9).ceil() as usize };
    let mut grad = 0.0;
    for j in j0..=m {
        let d = wat(j + 1) - wat(j);
        grad += d * d / h;
    }
    if j0 > 0 {
        grad += wat(j0) * wat(j0) / (j0 as f64 * h);
    }
    let (mut mass, mut kin, mut quart) = (0.0, 0.0, 0.0);
    for j in j0.max(1)..=m {
        let wt = if j == j0 { 0.5 * h } else { h };
        let r = j as f64 * h;
        let x = wat(j);
        let xd = wd[j - 1];
        mass += wt * x * x;
        kin += wt * xd * xd;
        quart += wt * x * x * x * x / (r * r);
    }
    let free = 2.0 * PI * (kin + grad + mass);
    Ok((free, free - PI * quart))
}

/// Low-kinetic scattering certificate: the time integral of `||grad u||^2`
/// over the sampled window (trapezoidal in time) is at most `mu^2`.
pub fn low_kinetic_check(times: &[f64], grad_sq_values: &[f64], mu: f64) -> bool {
    let mut acc = 0.0;
    for i in 1..times.len().min(grad_sq_values.len()) {
        acc += 0.5 * (times[i] - times[i - 1]) * (grad_sq_values[i] + grad_sq_values[i - 1]);
    }
    acc <= mu * mu
}

/// Column names of [`DiagnosticsSample`] in CSV order.
pub const DIAGNOSTICS_COLUMNS: [&str; 19] = [
    "t", "E", "J_u", "K0", "K2", "dQ", "sigma", "sign_S", "anomaly", "lam", "lamdot", "lam_plus",
    "lam_minus", "h1_norm", "l4_norm", "kin_norm", "grad_sq", "u_sup", "Vw",
];

/// Version of the column layout; bumped whenever [`DIAGNOSTICS_COLUMNS`] changes.
pub const DIAGNOSTICS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSample {
    pub t: f64,
    pub e: f64,
    pub j_u: f64,
    pub k0: f64,
    pub k2: f64,
    pub dq: f64,
    /// Which of `+Q` / `-Q` is nearer.
    pub sigma: f64,
    pub sign_s: SignValue,
    pub anomaly: bool,
    pub lam: f64,
    pub lamdot: f64,
    pub lam_plus: f64,
    pub lam_minus: f64,
    pub h1_norm: f64,
    pub l4_norm: f64,
    pub kin_norm: f64,
    pub grad_sq: f64,
    pub u_sup: f64,
    pub vw: Option<f64>,
}

impl DiagnosticsSample {
    /// `||u||_4^4 / (||u||_{H^1}^2 + ||u_t||^2)`.
    pub fn potential_ratio(&self) -> f64 {
        let den = self.h1_norm * self.h1_norm + self.kin_norm * self.kin_norm;
        if den > 0.0 {
            self.l4_norm.powi(4) / den
        } else {
            0.0
        }
    }

    pub fn csv_header() -> String {
        DIAGNOSTICS_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let f = |x: f64| format!("{x:.16e}");
        let vw = self.vw.map(f).unwrap_or_default();
        [
            f(self.t),
            f(self.e),
            f(self.j_u),
            f(self.k0),
            f(self.k2),
            f(self.dq),
            f(self.sigma),
            self.sign_s.as_str().to_string(),
            (self.anomaly as u8).to_string(),
            f(self.lam),
            f(self.lamdot),
            f(self.lam_plus),
            f(self.lam_minus),
            f(self.h1_norm),
            f(self.l4_norm),
            f(self.kin_norm),
            f(self.grad_sq),
            f(self.u_sup),
            vw,
        ]
        .join(",")
    }
}

/// Full diagnostic snapshot of a state.
pub fn diagnostics(s: &State, bg: &Background, p: &ThresholdParams, virial_cutoff: Option<&VirialCutoff>, with_virial: bool) -> Result<DiagnosticsSample> {
    let g = grad_sq(&s.u);
    let m = l2_sq(&s.u);
    let q4 = l4_pow4(&s.u);
    let kin = l2_sq(&s.udot);
    let e = 0.5 * (kin + g + m) - 0.25 * q4;
    let k0 = g + m - q4;
    let dist = distance_dq(s, bg, p)?;
    let sign = sign_functional(&dist, e, k0, bg.gs.jq, p);
    let k = bg.spec.k;
    let d = &dist.decomposition;
    Ok(DiagnosticsSample {
        t: s.t,
        e,
        j_u: 0.5 * (g + m) - 0.25 * q4,
        k0,
        k2: g - 0.75 * q4,
        dq: dist.dq,
        sigma: dist.sigma,
        sign_s: sign.value,
        anomaly: sign.anomaly,
        lam: d.lam,
        lamdot: d.lamdot,
        lam_plus: d.lam_plus(k),
        lam_minus: d.lam_minus(k),
        h1_norm: (g + m).sqrt(),
        l4_norm: q4.sqrt().sqrt(),
        kin_norm: kin.sqrt(),
        grad_sq: g,
        u_sup: s.u.sup_norm(),
        vw: if with_virial { Some(virial(s, virial_cutoff)) } else { None },
    })
}

/// Pairing used by several audits: `<u | u_t>`.
pub fn mass_flux(s: &State) -> f64 {
    inner_unchecked(&s.u, &s.udot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radial::RadialGrid;

    #[test]
    fn chi_shape() {
        assert_eq!(chi(0.5), 1.0);
        assert_eq!(chi(1.0), 1.0);
        assert_eq!(chi(2.0), 0.0);
        assert_eq!(chi(3.0), 0.0);
        assert!((chi(1.5) - 0.5).abs() < 1e-15);
        // C^1 and C^2 matching at the joints
        let e = 1e-4;
        assert!(((chi(1.0 + e) - 1.0) / e).abs() < 1e-6);
        assert!((chi(2.0 - e) / e).abs() < 1e-6);
        let mut prev = 1.0;
        for i in 0..=100 {
            let v = chi(1.0 + i as f64 / 100.0);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn default_params_are_consistent() {
        ThresholdParams::default().validate().unwrap();
        let mut p = ThresholdParams::default();
        p.delta_x *= 1.1;
        let err = p.validate().unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("2*c_star*delta_s = delta_x"));
        let mut p = ThresholdParams::default();
        p.eps_star = p.r_star;
        assert!(p.validate().is_err());
        let mut p = ThresholdParams::default();
        p.mu = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn zero_state() {
        let g = RadialGrid::new(20.0, 256).unwrap();
        let s = State::at_rest(RadialField::zeros(g));
        assert_eq!(energy(&s), 0.0);
        let k = k_functionals(&s.u);
        assert_eq!((k.k0, k.k2, k.g0, k.g2), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(virial(&s, None), 0.0);
        assert_eq!(exterior_energy(&s, 0.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn exterior_energy_full_space_and_rejects_outer_radius() {
        let g = RadialGrid::new(20.0, 1024).unwrap();
        let u = RadialField::from_fn(g, |r| (-r * r).exp());
        let ud = RadialField::from_fn(g, |r| r * (-r * r).exp());
        let s = State::new(u, ud, 0.0).unwrap();
        let (free, nl) = exterior_energy(&s, 0.0).unwrap();
        let e0 = crate::radial::free_energy(&s);
        assert!((free - e0).abs() < 1e-12 * e0);
        assert!((nl - energy(&s)).abs() < 1e-12 * e0);
        let (far, _) = exterior_energy(&s, 15.0).unwrap();
        assert!(far < 1e-60);
        assert!(exterior_energy(&s, 20.0).is_err());
    }

    #[test]
    fn energy_identity_holds() {
        let g = RadialGrid::new(20.0, 512).unwrap();
        let u = RadialField::from_fn(g, |r| 2.0 * (-r * r / 3.0).exp());
        let ud = RadialField::from_fn(g, |r| (r - 1.0) * (-r).exp());
        let s = State::new(u, ud, 0.0).unwrap();
        let scale = h1_sq(&s.u) + l2_sq(&s.udot);
        assert!(energy_identity_defect(&s).abs() < 1e-12 * scale);
    }

    #[test]
    fn virial_vanishes_for_udot_equal_u() {
        // <u | D2 u> = 0 by antisymmetry of D2
        let g = RadialGrid::new(20.0, 2048).unwrap();
        let u = RadialField::from_fn(g, |r| (-(r - 1.0).powi(2)).exp());
        let s = State::new(u.clone(), u.clone(), 0.0).unwrap();
        assert!(virial(&s, None).abs() < 1e-12 * l2_sq(&u));
    }

    #[test]
    fn low_kinetic() {
        assert!(low_kinetic_check(&[0.0, 1.0, 2.0], &[0.0, 0.0, 0.0], 0.1));
        assert!(!low_kinetic_check(&[0.0, 2.0], &[1.0, 1.0], 1.0));
    }

    #[test]
    fn csv_row_matches_header() {
        let s = DiagnosticsSample {
            t: 0.0,
            e: 1.0,
            j_u: 1.0,
            k0: 0.0,
            k2: 0.0,
            dq: 0.0,
            sigma: 1.0,
            sign_s: SignValue::InsideBall,
            anomaly: false,
            lam: 0.0,
            lamdot: 0.0,
            lam_plus: 0.0,
            lam_minus: 0.0,
            h1_norm: 1.0,
            l4_norm: 1.0,
            kin_norm: 0.0,
            grad_sq: 0.5,
            u_sup: 1.0,
            vw: None,
        };
        assert_eq!(s.csv_row().split(',').count(), DiagnosticsSample::csv_header().split(',').count());
        assert_eq!(s.potential_ratio(), 1.0);
    }
}
