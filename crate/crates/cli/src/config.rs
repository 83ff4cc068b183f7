//! Experiment configuration. Every section rejects unknown keys; omitted keys
//! take the defaults documented on each field.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; `--seed` overrides it.
    pub seed: Option<u64>,
    /// Output directory; `--out` overrides it.
    pub out: Option<PathBuf>,
    pub lift: Option<LiftConfig>,
    pub sew: Option<SewConfig>,
    pub solve: Option<SolveConfig>,
    pub stability: Option<StabilityConfig>,
    pub regularity: Option<RegularityConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn validate(&self) -> Result<(), CliError> {
        if let Some(l) = &self.lift {
            positive("lift.horizon", l.horizon)?;
            at_least("lift.steps", l.steps, 1)?;
            at_least("lift.samples", l.samples, 1)?;
            at_least("lift.dim_e", l.dim_e, 1)?;
            at_least("lift.fine_factor", l.fine_factor, 1)?;
            at_least("lift.ks_samples", l.ks_samples, 2)?;
            if !(l.hurst > 1.0 / 3.0 && l.hurst <= 0.5) {
                return config_err("lift.hurst must lie in (1/3, 1/2]");
            }
            if !(l.alpha > 1.0 / 3.0 && l.alpha < 0.5) {
                return config_err("lift.alpha must lie in (1/3, 1/2)");
            }
        }
        if let Some(s) = &self.sew {
            if !(1..=16).contains(&s.max_level) {
                return config_err("sew.max_level must lie in 1..=16");
            }
            at_least("sew.samples", s.samples, 2)?;
            if s.m < 2.0 {
                return config_err("sew.m must be at least 2");
            }
            if s.germs.is_empty() {
                return config_err("sew.germs must name at least one germ");
            }
        }
        if let Some(s) = &self.solve {
            check_thetas("solve.thetas", &s.thetas)?;
            if let Some(t) = s.tol {
                positive("solve.tol", t)?;
            }
        }
        if let Some(s) = &self.stability {
            if s.eps.is_empty() || s.eps.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
                return config_err("stability.eps must be a nonempty list of finite values >= 0");
            }
        }
        if let Some(r) = &self.regularity {
            check_thetas("regularity.thetas", &r.thetas)?;
            at_least("regularity.trunc_k", r.trunc_k, 1)?;
            at_least("regularity.steps", r.steps, 2)?;
            positive("regularity.step_size", r.step_size)?;
            positive("regularity.kappa", r.kappa)?;
        }
        Ok(())
    }
}

fn config_err<T>(msg: &str) -> Result<T, CliError> {
    Err(CliError::Config(msg.to_string()))
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {v}")))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<(), CliError> {
    if v >= min {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be at least {min}, got {v}")))
    }
}

fn check_thetas(name: &str, thetas: &[f64]) -> Result<(), CliError> {
    if thetas.is_empty() || thetas.iter().any(|t| !(*t >= 0.0 && *t < 0.5)) {
        return Err(CliError::Config(format!("{name} must be a nonempty list in [0, 1/2)")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LiftFamily {
    Smooth,
    Brownian,
    Fbm,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Ito,
    Strat,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LiftConfig {
    pub kind: LiftFamily,
    /// Brownian enhancement; ignored for other kinds.
    pub mode: ModeName,
    pub dim_e: usize,
    pub horizon: f64,
    pub steps: usize,
    pub samples: usize,
    pub fine_factor: usize,
    pub hurst: f64,
    pub refine_level: u32,
    /// Hölder exponent of the reported norms.
    pub alpha: f64,
    /// Angular frequency of the smooth path `x_a(t) = sin(ω(a+1)t)`.
    pub frequency: f64,
    /// Compare fBm with `H = 1/2` against the Brownian Stratonovich lift.
    pub distribution_check: bool,
    pub ks_samples: usize,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            kind: LiftFamily::Brownian,
            mode: ModeName::Strat,
            dim_e: 2,
            horizon: 1.0,
            steps: 64,
            samples: 64,
            fine_factor: 4,
            hurst: 0.5,
            refine_level: 2,
            alpha: 0.45,
            frequency: 6.0,
            distribution_check: true,
            ks_samples: 400,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SewConfig {
    /// Any of `additive`, `riemann`, `young_smooth`, `ito`.
    pub germs: Vec<String>,
    pub max_level: u32,
    pub samples: usize,
    pub m: f64,
}

impl Default for SewConfig {
    fn default() -> Self {
        Self {
            germs: ["additive", "riemann", "young_smooth", "ito"].map(String::from).to_vec(),
            max_level: 12,
            samples: 400,
            m: 2.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub preset: String,
    pub samples: Option<usize>,
    pub steps: Option<usize>,
    pub tol: Option<f64>,
    /// Fixed subinterval length; omitted selects it automatically.
    pub epsilon: Option<f64>,
    /// Replace the initial datum and forcing by zero.
    pub zero_data: bool,
    pub thetas: Vec<f64>,
    pub write_archive: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            preset: "heat_linear".to_string(),
            samples: None,
            steps: None,
            tol: None,
            epsilon: None,
            zero_data: false,
            thetas: vec![0.1, 0.25, 0.4],
            write_archive: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// `ξ + ε·δξ`.
    Xi,
    /// `(1+ε)` dilation of the lift.
    Lift,
    /// Rough convolution of `Y` against `Y + ε·δY`.
    Convolution,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub preset: String,
    pub perturbation: Perturbation,
    pub eps: Vec<f64>,
    pub steps: Option<usize>,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            preset: "heat_linear".to_string(),
            perturbation: Perturbation::Xi,
            eps: vec![0.0, 0.2, 0.1, 0.05, 0.025],
            steps: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RegularityMode {
    /// `u_t = S_{0,t}ξ` for a datum with equal energy per dyadic shell.
    Propagation,
    /// A full preset solve.
    Preset,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RegularityConfig {
    pub mode: RegularityMode,
    pub preset: String,
    pub thetas: Vec<f64>,
    pub trunc_k: usize,
    pub steps: usize,
    pub step_size: f64,
    pub kappa: f64,
}

impl Default for RegularityConfig {
    fn default() -> Self {
        Self {
            mode: RegularityMode::Propagation,
            preset: "heat_linear".to_string(),
            thetas: vec![0.1, 0.25, 0.4],
            trunc_k: 256,
            steps: 1024,
            step_size: 2f64.powi(-16),
            kappa: 0.25,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_omitted_keys() {
        let cfg = ExperimentConfig::from_toml("seed = 3\n[solve]\npreset = \"gbm_mode\"\n").unwrap();
        assert_eq!(cfg.seed, Some(3));
        let s = cfg.solve.unwrap();
        assert_eq!(s.preset, "gbm_mode");
        assert_eq!(s.thetas, vec![0.1, 0.25, 0.4]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("sede = 3"), Err(CliError::Config(_))));
        assert!(ExperimentConfig::from_toml("[lift]\nkind = \"brownian\"\nhurts = 0.5\n").is_err());
        assert!(ExperimentConfig::from_toml("[lift]\nkind = \"levy\"\n").is_err());
    }

    #[test]
    fn values_are_range_checked() {
        assert!(ExperimentConfig::from_toml("[lift]\nhurst = 0.7\n").is_err());
        assert!(ExperimentConfig::from_toml("[solve]\nthetas = [0.6]\n").is_err());
        assert!(ExperimentConfig::from_toml("[stability]\neps = []\n").is_err());
        assert!(ExperimentConfig::from_toml("[sew]\nmax_level = 0\n").is_err());
    }
}
