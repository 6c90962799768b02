//! Scenario registry and reproducible runs: configuration in, CSV tables
//! and a JSON report out.

pub mod config;
pub mod report;
pub mod scenarios;

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

pub use config::{CheckSettings, Scenario, ScenarioConfig};
pub use report::RunReport;
pub use scenarios::ScenarioOutcome;

use crate::apps::insider::InsiderScenario;
use crate::apps::recursive_utility::RecursiveUtilityScenario;
use crate::error::{Error, Result};
use scenarios::{OracleMiniScenario, PredictiveToyScenario, SyntheticBsdeScenario};

/// Finished run: the report plus the tables it names.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub tables: Vec<(String, Vec<u8>)>,
}

impl RunOutput {
    /// Writes every table and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.tables {
            std::fs::write(dir.join(name), bytes)?;
        }
        let json = serde_json::to_string_pretty(&self.report)?;
        std::fs::write(dir.join("report.json"), json + "\n")?;
        Ok(())
    }
}

/// Executes the configured scenario end to end.
pub fn run(config: &ScenarioConfig) -> Result<RunOutput> {
    config.validate()?;
    let start = Instant::now();
    let checks = &config.checks;
    let outcome = match &config.scenario {
        Scenario::SyntheticBsde(s) => s.execute(config.export_paths)?,
        Scenario::PredictiveToy(s) => s.execute(config.export_paths)?,
        Scenario::Insider(s) => scenarios::execute_insider(s, checks)?,
        Scenario::RecursiveUtility(s) => scenarios::execute_recursive_utility(s, checks)?,
        Scenario::OracleMini(s) => s.execute(checks)?,
    };
    let solver = config.scenario.solver();
    let passed = outcome.checks.iter().all(|c| c.pass);
    let report = RunReport {
        scenario: config.scenario.name().into(),
        config_sha256: config.hash()?,
        seed: solver.map(|s| s.seed),
        paths: solver.map(|s| s.paths),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        values: outcome.values,
        checks: outcome.checks,
        informational: outcome.informational,
        tables: outcome.tables.iter().map(|(n, _)| n.clone()).collect(),
        passed,
    };
    Ok(RunOutput {
        report,
        tables: outcome.tables,
    })
}

/// Documented configuration key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterDoc {
    pub key: &'static str,
    pub kind: &'static str,
    pub doc: &'static str,
}

/// Registry entry with a parameter schema and a runnable default.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioInfo {
    pub name: &'static str,
    pub summary: &'static str,
    pub parameters: Vec<ParameterDoc>,
}

impl ScenarioInfo {
    /// Default configuration for this scenario.
    pub fn default_config(&self) -> ScenarioConfig {
        ScenarioConfig::new(match self.name {
            "synthetic-bsde" => Scenario::SyntheticBsde(SyntheticBsdeScenario::default()),
            "predictive-toy" => Scenario::PredictiveToy(PredictiveToyScenario::default()),
            "insider" => Scenario::Insider(InsiderScenario::default()),
            "recursive-utility" => Scenario::RecursiveUtility(RecursiveUtilityScenario::default()),
            _ => Scenario::OracleMini(OracleMiniScenario::default()),
        })
    }
}

const fn p(key: &'static str, kind: &'static str, doc: &'static str) -> ParameterDoc {
    ParameterDoc { key, kind, doc }
}

const GRID: [ParameterDoc; 3] = [
    p("horizon", "float > 0", "time horizon T"),
    p("steps", "integer >= 1", "number of time steps N"),
    p(
        "delay",
        "float >= 0",
        "anticipation delta, a whole number of steps, at most T",
    ),
];

const SOLVER: [ParameterDoc; 4] = [
    p("solver.paths", "integer >= 2", "Monte Carlo paths M"),
    p("solver.seed", "integer", "seed of the noise streams"),
    p(
        "solver.degree",
        "integer, default 3",
        "polynomial degree of the regression basis",
    ),
    p(
        "solver.regressors",
        "list, optional",
        "regression variables: \"state\", \"inverse-state\", \"brownian-level\", {jump-count = j}",
    ),
];

const CURVE: &str = "float or {times = [...], values = [...]} (piecewise constant from 0)";

fn with_common(mut own: Vec<ParameterDoc>, solver: bool) -> Vec<ParameterDoc> {
    let mut all = GRID.to_vec();
    all.append(&mut own);
    if solver {
        all.extend(SOLVER);
    }
    all
}

/// All registered scenarios in a stable order.
pub fn list_scenarios() -> Vec<ScenarioInfo> {
    let terminal = p(
        "terminal",
        "float or {level, slope}",
        "terminal datum L = level + slope B(T)",
    );
    vec![
        ScenarioInfo {
            name: "synthetic-bsde",
            summary: "linear predictive BSDE dY = -(rho Y + kappa A) dt + Z dB + K dN; mean checked against the delay ODE",
            parameters: with_common(
                vec![
                    p("rho", "float, default 0", "coefficient of Y in the driver"),
                    p("kappa", "float, default 0", "coefficient of A in the driver"),
                    terminal.clone(),
                    p("atoms", "list of {mark, intensity}, default []", "jump atoms of the Levy measure"),
                ],
                true,
            ),
        },
        ScenarioInfo {
            name: "predictive-toy",
            summary: "dY = -kappa A dt + Z dB against its closed-form mean; classical limit when delay = T",
            parameters: with_common(
                vec![p("kappa", "float, default 1", "coefficient of A in the driver"), terminal.clone()],
                true,
            ),
        },
        ScenarioInfo {
            name: "insider",
            summary: "optimal portfolio in a market moved by an insider (martingale method)",
            parameters: with_common(
                vec![
                    p("mu", CURVE, "drift factor mu(t) of the price"),
                    terminal,
                    p("utility", "{kind = \"log\"} or {kind = \"crra\", rho}", "utility selector {log, crra}"),
                    p("x0", "float > 0", "initial wealth"),
                ],
                true,
            ),
        },
        ScenarioInfo {
            name: "recursive-utility",
            summary: "optimal relative consumption under predictive recursive utility",
            parameters: with_common(
                vec![
                    p("x0", "float > 0", "initial wealth"),
                    p("mu", CURVE, "wealth drift"),
                    p("sigma", CURVE, "wealth volatility"),
                    p("gamma", CURVE, "relative jump size per unit mark"),
                    p("atoms", "list of {mark, intensity}, default []", "jump atoms"),
                    p("alpha", CURVE, "weight of the anticipated utility"),
                    p("c_max", "float, default 1000", "cap on the consumption rate near T"),
                ],
                true,
            ),
        },
        ScenarioInfo {
            name: "oracle-mini",
            summary: "consumption problem on a binary tree: exact grid optimum against the maximum-principle candidate",
            parameters: with_common(
                vec![
                    p("x0", "float > 0", "initial wealth"),
                    p("mu", CURVE, "wealth drift"),
                    p("sigma", CURVE, "wealth volatility"),
                    p("alpha", CURVE, "weight of the anticipated utility"),
                    p("controls", "{lo, hi, count}", "control grid searched by the oracle"),
                ],
                false,
            ),
        },
    ]
}

/// Registry lookup by name.
pub fn scenario_info(name: &str) -> Result<ScenarioInfo> {
    list_scenarios()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownScenario(name.into()))
}
