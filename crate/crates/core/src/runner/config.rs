//! Run configuration in TOML with strict key checking.
//!
//! ```toml
//! scenario = "recursive-utility"
//! out_dir = "runs/consumption"   # optional
//! export_paths = 100             # optional
//!
//! [params]                       # scenario parameters
//! horizon = 1.0
//! steps = 64
//!
//! [params.solver]
//! paths = 10000
//! seed = 7
//!
//! [checks]                       # optional tolerances
//! foc = 0.02
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scenarios::{OracleMiniScenario, PredictiveToyScenario, SyntheticBsdeScenario};
use crate::apps::insider::InsiderScenario;
use crate::apps::recursive_utility::RecursiveUtilityScenario;
use crate::apps::SolverSettings;
use crate::error::{Error, Result};

/// Tolerances and sample counts of the acceptance checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSettings {
    /// Relative tolerance of the consumption first-order identities.
    pub foc: f64,
    /// Relative tolerance of the wealth exponential identity.
    pub wealth: f64,
    /// Fraction of steps at which criticality must hold.
    pub criticality_fraction: f64,
    /// Number of perturbed or random competitors in dominance checks.
    pub comparisons: usize,
    /// Relative size of the perturbations of `c*`.
    pub perturbation: f64,
    /// Sample count of the sampled concavity test.
    pub sufficiency_samples: usize,
    /// Absolute tolerance of exact tree comparisons.
    pub tree: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            foc: 0.02,
            wealth: 0.05,
            criticality_fraction: 0.9,
            comparisons: 10,
            perturbation: 0.1,
            sufficiency_samples: 64,
            tree: 1e-12,
        }
    }
}

impl CheckSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("checks.foc", self.foc),
            ("checks.wealth", self.wealth),
            ("checks.perturbation", self.perturbation),
            ("checks.tree", self.tree),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} = {v} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.criticality_fraction) {
            return Err(Error::Config(format!(
                "checks.criticality_fraction = {} must lie in [0, 1]",
                self.criticality_fraction
            )));
        }
        Ok(())
    }
}

/// Scenario with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    SyntheticBsde(SyntheticBsdeScenario),
    PredictiveToy(PredictiveToyScenario),
    Insider(InsiderScenario),
    RecursiveUtility(RecursiveUtilityScenario),
    OracleMini(OracleMiniScenario),
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::SyntheticBsde(_) => "synthetic-bsde",
            Scenario::PredictiveToy(_) => "predictive-toy",
            Scenario::Insider(_) => "insider",
            Scenario::RecursiveUtility(_) => "recursive-utility",
            Scenario::OracleMini(_) => "oracle-mini",
        }
    }

    /// Monte Carlo settings; the tree scenario has none.
    pub fn solver(&self) -> Option<&SolverSettings> {
        match self {
            Scenario::SyntheticBsde(s) => Some(&s.solver),
            Scenario::PredictiveToy(s) => Some(&s.solver),
            Scenario::Insider(s) => Some(&s.solver),
            Scenario::RecursiveUtility(s) => Some(&s.solver),
            Scenario::OracleMini(_) => None,
        }
    }

    pub fn solver_mut(&mut self) -> Option<&mut SolverSettings> {
        match self {
            Scenario::SyntheticBsde(s) => Some(&mut s.solver),
            Scenario::PredictiveToy(s) => Some(&mut s.solver),
            Scenario::Insider(s) => Some(&mut s.solver),
            Scenario::RecursiveUtility(s) => Some(&mut s.solver),
            Scenario::OracleMini(_) => None,
        }
    }

    fn from_params(name: &str, params: toml::Table) -> Result<Self> {
        fn parse<T: serde::de::DeserializeOwned>(name: &str, params: toml::Table) -> Result<T> {
            params.try_into().map_err(|e: toml::de::Error| {
                Error::Config(format!("[params] of `{name}`: {}", e.message()))
            })
        }
        Ok(match name {
            "synthetic-bsde" => Scenario::SyntheticBsde(parse(name, params)?),
            "predictive-toy" => Scenario::PredictiveToy(parse(name, params)?),
            "insider" => Scenario::Insider(parse(name, params)?),
            "recursive-utility" => Scenario::RecursiveUtility(parse(name, params)?),
            "oracle-mini" => Scenario::OracleMini(parse(name, params)?),
            other => return Err(Error::UnknownScenario(other.into())),
        })
    }

    fn to_params(&self) -> Result<toml::Table> {
        let value = match self {
            Scenario::SyntheticBsde(s) => toml::Table::try_from(s),
            Scenario::PredictiveToy(s) => toml::Table::try_from(s),
            Scenario::Insider(s) => toml::Table::try_from(s),
            Scenario::RecursiveUtility(s) => toml::Table::try_from(s),
            Scenario::OracleMini(s) => toml::Table::try_from(s),
        };
        value.map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Scenario::SyntheticBsde(s) => s.validate(),
            Scenario::PredictiveToy(s) => s.validate(),
            Scenario::Insider(s) => s.validate(),
            Scenario::RecursiveUtility(s) => s.validate(),
            Scenario::OracleMini(s) => s.validate(),
        }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub out_dir: Option<String>,
    /// Paths written to per-path solution tables.
    pub export_paths: usize,
    pub checks: CheckSettings,
}

const DEFAULT_EXPORT_PATHS: usize = 100;

/// On-disk layout of [`ScenarioConfig`].
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_dir: Option<String>,
    #[serde(default = "default_export_paths")]
    export_paths: usize,
    params: toml::Table,
    #[serde(default)]
    checks: CheckSettings,
}

fn default_export_paths() -> usize {
    DEFAULT_EXPORT_PATHS
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            out_dir: None,
            export_paths: DEFAULT_EXPORT_PATHS,
            checks: CheckSettings::default(),
        }
    }

    /// Parses and validates a TOML document.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let config = Self {
            scenario: Scenario::from_params(&raw.scenario, raw.params)?,
            out_dir: raw.out_dir,
            export_paths: raw.export_paths,
            checks: raw.checks,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Canonical TOML form; `parse(emit(c)) == c`.
    pub fn emit(&self) -> Result<String> {
        let raw = RawConfig {
            scenario: self.scenario.name().into(),
            out_dir: self.out_dir.clone(),
            export_paths: self.export_paths,
            params: self.scenario.to_params()?,
            checks: self.checks.clone(),
        };
        toml::to_string(&raw).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.emit()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.checks.validate()?;
        self.scenario
            .validate()
            .map_err(|e| Error::Config(format!("scenario `{}`: {e}", self.scenario.name())))
    }

    /// Applies command-line overrides of the seed and path count.
    pub fn override_solver(&mut self, seed: Option<u64>, paths: Option<usize>) -> Result<()> {
        if seed.is_none() && paths.is_none() {
            return Ok(());
        }
        let name = self.scenario.name();
        let solver = self.scenario.solver_mut().ok_or_else(|| {
            Error::Config(format!("scenario `{name}` takes no seed or path count"))
        })?;
        if let Some(s) = seed {
            solver.seed = s;
        }
        if let Some(p) = paths {
            solver.paths = p;
        }
        self.validate()
    }
}
