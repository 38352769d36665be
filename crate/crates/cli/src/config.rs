use std::fs;
use std::path::{Path, PathBuf};

use nlkg::evolution::{Direction, EvolveOptions, IntegratorParams, DEFAULT_SAMPLE_EVERY};
use nlkg::functionals::ThresholdParams;
use nlkg::lab::{modal_datum, DEFAULT_HORIZON, DEFAULT_PORTRAIT_SIDE, DEFAULT_THETA, DEFAULT_W_AMPLITUDE};
use nlkg::linearized::Background;
use nlkg::{RadialField, RadialGrid, State};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CACHE_ENV: &str = "NLKG_CACHE_DIR";
pub const RESOLVED_NAME: &str = "resolved-config.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub r_max: f64,
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { r_max: 64.0, n: 4096 }
    }
}

/// Initial datum of `evolve` and `classify`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Datum {
    /// `(a Q, 0)`.
    ScaledQ { a: f64 },
    /// `(Q + lam rho, lamdot rho)`.
    Modal { lam: f64, lamdot: f64 },
    /// `(amp exp(-((r - center) / width)^2), 0)`.
    Gaussian { amp: f64, center: f64, width: f64 },
}

impl Default for Datum {
    fn default() -> Self {
        Datum::ScaledQ { a: 1.2 }
    }
}

impl Datum {
    pub fn build(&self, bg: &Background) -> nlkg::Result<State> {
        match *self {
            Datum::ScaledQ { a } => Ok(State::at_rest(bg.gs.q.scaled(a))),
            Datum::Modal { lam, lamdot } => modal_datum(bg, lam, lamdot, None),
            Datum::Gaussian { amp, center, width } => {
                Ok(State::at_rest(RadialField::from_fn(*bg.grid(), |r| amp * (-((r - center) / width).powi(2)).exp())))
            }
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Datum::ScaledQ { a } => format!("({a} Q, 0)"),
            Datum::Modal { lam, lamdot } => format!("modal lambda = {lam}, lambdot = {lamdot}"),
            Datum::Gaussian { amp, center, width } => format!("gaussian amp = {amp}, center = {center}, width = {width}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Directions {
    Forward,
    Backward,
    Both,
}

impl Directions {
    pub fn list(&self) -> Vec<Direction> {
        match self {
            Directions::Forward => vec![Direction::Forward],
            Directions::Backward => vec![Direction::Backward],
            Directions::Both => vec![Direction::Backward, Direction::Forward],
        }
    }
}

/// Parameters of the individual subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub datum: Datum,
    pub direction: Directions,
    pub theta: f64,
    /// Defaults to `eps_star / 2` when absent.
    pub eps: Option<f64>,
    pub portrait_side: usize,
    /// `(lambda, lambdot)` half-widths; defaults to `(4, 16) theta eps`.
    pub portrait_extents: Option<[f64; 2]>,
    pub w_amplitude: f64,
    pub ensemble_size: usize,
    pub max_batches: usize,
    /// `|lambda(0)|` of the pure unstable data in `audit`.
    pub ejection_lambda: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            datum: Datum::default(),
            direction: Directions::Both,
            theta: DEFAULT_THETA,
            eps: None,
            portrait_side: DEFAULT_PORTRAIT_SIDE,
            portrait_extents: None,
            w_amplitude: DEFAULT_W_AMPLITUDE,
            ensemble_size: 100,
            max_batches: 4,
            ejection_lambda: 5e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub integrator: IntegratorParams,
    pub thresholds: ThresholdParams,
    pub horizon: f64,
    pub sample_every: f64,
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: GridConfig::default(),
            integrator: IntegratorParams::default(),
            thresholds: ThresholdParams::default(),
            horizon: DEFAULT_HORIZON,
            sample_every: DEFAULT_SAMPLE_EVERY,
            experiment: ExperimentConfig::default(),
            output_dir: PathBuf::from("nlkg-out"),
            cache_dir: PathBuf::from(".nlkg-cache"),
            seed: 2024,
            threads: None,
        }
    }
}

impl RunConfig {
    /// Parses JSON text. Missing fields take defaults; a `thresholds.delta_e`
    /// given without the quantities derived from it re-derives them.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let inner = e.inner();
            CliError::Validation(format!("config field `{}`: {inner}", e.path()))
        })?;
        de.end().map_err(|e| CliError::Validation(format!("config: {e}")))?;
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if let Some(th) = raw.get("thresholds").and_then(|v| v.as_object()) {
            if let Some(de) = th.get("delta_e").and_then(|v| v.as_f64()) {
                let mut merged = serde_json::to_value(ThresholdParams::from_delta_e(de)).expect("thresholds serialize");
                for (k, v) in th {
                    merged[k] = v.clone();
                }
                cfg.thresholds = serde_json::from_value(merged).map_err(|e| CliError::Validation(format!("config field `thresholds`: {e}")))?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// `NLKG_CACHE_DIR` wins over the config file.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(CACHE_ENV) {
            if !dir.is_empty() {
                self.cache_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |m: String| Err(CliError::Validation(m));
        RadialGrid::new(self.grid.r_max, self.grid.n)?;
        self.integrator.validate()?;
        self.thresholds.validate()?;
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return v(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.sample_every.is_finite() && self.sample_every > 0.0) {
            return v(format!("sample_every must be positive, got {}", self.sample_every));
        }
        let e = &self.experiment;
        if !(e.theta > 0.0 && e.theta <= 1.0) {
            return v(format!("experiment.theta must lie in (0, 1], got {}", e.theta));
        }
        if let Some(eps) = e.eps {
            if !(eps > 0.0 && eps <= self.thresholds.eps_star) {
                return v(format!("experiment.eps must lie in (0, eps_star = {}], got {eps}", self.thresholds.eps_star));
            }
        }
        if e.portrait_side < 3 || e.portrait_side % 2 == 0 {
            return v(format!("experiment.portrait_side must be odd and at least 3, got {}", e.portrait_side));
        }
        if !(e.w_amplitude > 0.0 && e.w_amplitude < self.thresholds.delta_s) {
            return v(format!("experiment.w_amplitude must lie in (0, delta_s), got {}", e.w_amplitude));
        }
        if e.ensemble_size == 0 || e.max_batches == 0 {
            return v("experiment.ensemble_size and experiment.max_batches must be positive".into());
        }
        if !(e.ejection_lambda > 0.0 && e.ejection_lambda < self.thresholds.r_star) {
            return v(format!("experiment.ejection_lambda must lie in (0, r_star), got {}", e.ejection_lambda));
        }
        if let Datum::Gaussian { width, .. } = e.datum {
            if !(width > 0.0) {
                return v(format!("gaussian width must be positive, got {width}"));
            }
        }
        if self.threads == Some(0) {
            return v("threads must be at least 1".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<RadialGrid, CliError> {
        Ok(RadialGrid::new(self.grid.r_max, self.grid.n)?)
    }

    pub fn evolve_options(&self) -> EvolveOptions {
        EvolveOptions { integrator: self.integrator, sample_every: self.sample_every, ..Default::default() }
    }

    /// Writes the resolved configuration next to the outputs.
    pub fn write_resolved(&self) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.output_dir)?;
        let path = self.output_dir.join(RESOLVED_NAME);
        fs::write(&path, self.to_json())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_config_reloads_identically() {
        let mut cfg = RunConfig::default();
        cfg.experiment.datum = Datum::Modal { lam: 1e-3, lamdot: -2e-3 };
        cfg.experiment.eps = Some(3e-3);
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), cfg.to_json());
    }

    #[test]
    fn unknown_field_names_its_path() {
        let err = RunConfig::from_json(r#"{"thresholds": {"delta_q": 1.0}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("thresholds") && msg.contains("delta_q"), "{msg}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = RunConfig::from_json("{\n  \"horizon\": 4,\n  oops\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn delta_e_alone_rederives_the_chain() {
        let cfg = RunConfig::from_json(r#"{"thresholds": {"delta_e": 0.5}}"#).unwrap();
        assert_eq!(cfg.thresholds, ThresholdParams::from_delta_e(0.5));
        cfg.validate().unwrap();
    }

    #[test]
    fn broken_relation_is_a_validation_error() {
        let cfg = RunConfig::from_json(r#"{"thresholds": {"delta_s": 0.1}}"#).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        assert!(err.to_string().contains("2*c_star*delta_s = delta_x"), "{err}");
    }
}
