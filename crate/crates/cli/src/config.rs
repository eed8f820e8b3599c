//! Run configuration: a strict TOML schema plus semantic validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vibro::fixtures::from_name;
use vibro::{IntegratorOptions, OrbitOptions, SystemDefinition};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grazing: Option<GrazingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chaos: Option<ChaosConfig>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

/// Overrides of the integrator and Newton tolerances.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
    pub tol_event: Option<f64>,
    pub graze_tol: Option<f64>,
    pub v_stick: Option<f64>,
    pub max_step: Option<f64>,
    pub newton_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub t_span: [f64; 2],
    pub initial_state: Vec<f64>,
    #[serde(default)]
    pub mu: f64,
    /// Dense-output samples written inside each accepted step.
    #[serde(default)]
    pub interior: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub mu_start: f64,
    pub mu_end: f64,
    /// Section offset; defaults to a quarter period.
    pub theta: Option<f64>,
    /// Starting guess, settled by `settle_periods` map iterations before the
    /// first Newton solve.
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    #[serde(default = "default_settle")]
    pub settle_periods: usize,
    pub max_mu_step: Option<f64>,
    pub y0_stop: Option<f64>,
}

fn default_settle() -> usize {
    300
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GrazingConfig {
    pub theta_seq: Option<Vec<f64>>,
    pub robustness_trials: Option<usize>,
    pub seed: Option<u64>,
    pub y1_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosConfig {
    /// Parameter of the saddle; its orbit is continued from `family.mu_start`.
    pub mu: f64,
    #[serde(default = "default_m_max")]
    pub m_max: usize,
    /// Periods averaged by the Lyapunov estimate.
    #[serde(default = "default_n_iter")]
    pub n_iter: usize,
    /// Periodic-point seeds per state dimension.
    #[serde(default = "default_seed_grid")]
    pub seed_grid: usize,
    /// Powers of the map searched for periodic points.
    #[serde(default = "default_periods")]
    pub periods: Vec<usize>,
    pub max_gap: Option<f64>,
    pub depth: Option<usize>,
}

fn default_m_max() -> usize {
    6
}

fn default_n_iter() -> usize {
    2000
}

fn default_seed_grid() -> usize {
    5
}

fn default_periods() -> Vec<usize> {
    vec![1, 2, 3]
}

fn config_err(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn positive(key: &str, v: Option<f64>) -> Result<(), CliError> {
    match v {
        Some(x) if !(x.is_finite() && x > 0.0) => Err(config_err(key, format!("must be positive, got {x}"))),
        _ => Ok(()),
    }
}

fn in_range(sys: &SystemDefinition, key: &str, mu: f64) -> Result<(), CliError> {
    sys.check_mu(mu).map_err(|e| config_err(key, e))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn system(&self) -> Result<SystemDefinition, CliError> {
        from_name(&self.system.name, &self.system.params).map_err(|e| config_err("system", e))
    }

    pub fn integrator(&self) -> IntegratorOptions {
        let t = &self.tolerances;
        let d = IntegratorOptions::default();
        IntegratorOptions {
            rel_tol: t.rel_tol.unwrap_or(d.rel_tol),
            abs_tol: t.abs_tol.unwrap_or(d.abs_tol),
            tol_event: t.tol_event.unwrap_or(d.tol_event),
            graze_tol: t.graze_tol.unwrap_or(d.graze_tol),
            v_stick: t.v_stick.unwrap_or(d.v_stick),
            max_step: t.max_step.unwrap_or(d.max_step),
            ..d
        }
    }

    pub fn orbit(&self) -> OrbitOptions {
        let d = OrbitOptions::default();
        let fam = self.family.as_ref();
        OrbitOptions {
            integrator: self.integrator(),
            newton_tol: self.tolerances.newton_tol.unwrap_or(d.newton_tol),
            max_mu_step: fam.and_then(|f| f.max_mu_step).unwrap_or(d.max_mu_step),
            y0_stop: fam.and_then(|f| f.y0_stop).unwrap_or(d.y0_stop),
            ..d
        }
    }

    /// Checks everything the schema cannot: positive tolerances, parameter
    /// values inside the system's range, state dimensions.
    pub fn validate(&self) -> Result<SystemDefinition, CliError> {
        let t = &self.tolerances;
        for (key, v) in [
            ("tolerances.rel_tol", t.rel_tol),
            ("tolerances.abs_tol", t.abs_tol),
            ("tolerances.tol_event", t.tol_event),
            ("tolerances.graze_tol", t.graze_tol),
            ("tolerances.v_stick", t.v_stick),
            ("tolerances.max_step", t.max_step),
            ("tolerances.newton_tol", t.newton_tol),
        ] {
            positive(key, v)?;
        }
        self.integrator().validate().map_err(|e| config_err("tolerances", e))?;
        let sys = self.system()?;
        let dim = sys.dim();
        if let Some(s) = &self.simulate {
            if !(s.t_span[0].is_finite() && s.t_span[1].is_finite() && s.t_span[1] >= s.t_span[0]) {
                return Err(config_err("simulate.t_span", format!("need t0 <= t1, got {:?}", s.t_span)));
            }
            if s.initial_state.len() != dim {
                return Err(config_err("simulate.initial_state", format!("expected {dim} values")));
            }
            in_range(&sys, "simulate.mu", s.mu)?;
        }
        if let Some(f) = &self.family {
            in_range(&sys, "family.mu_start", f.mu_start)?;
            in_range(&sys, "family.mu_end", f.mu_end)?;
            positive("family.theta", f.theta)?;
            positive("family.max_mu_step", f.max_mu_step)?;
            positive("family.y0_stop", f.y0_stop)?;
            if f.initial_state.as_ref().is_some_and(|z| z.len() != dim) {
                return Err(config_err("family.initial_state", format!("expected {dim} values")));
            }
        }
        if let Some(g) = &self.grazing {
            for &th in g.theta_seq.iter().flatten() {
                positive("grazing.theta_seq", Some(th))?;
            }
            positive("grazing.y1_max", g.y1_max)?;
        }
        if let Some(c) = &self.chaos {
            in_range(&sys, "chaos.mu", c.mu)?;
            if c.m_max == 0 {
                return Err(config_err("chaos.m_max", "must be at least 1"));
            }
            if c.n_iter < 2 {
                return Err(config_err("chaos.n_iter", "must be at least 2"));
            }
            if c.seed_grid == 0 {
                return Err(config_err("chaos.seed_grid", "must be at least 1"));
            }
            if c.periods.is_empty() || c.periods.contains(&0) {
                return Err(config_err("chaos.periods", "need positive map powers"));
            }
            positive("chaos.max_gap", c.max_gap)?;
        }
        Ok(sys)
    }

    pub fn section(&self, key: &str) -> CliError {
        config_err(key, "section missing")
    }
}
