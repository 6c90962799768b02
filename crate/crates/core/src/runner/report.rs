//! JSON run report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::control::checks::CheckReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    /// SHA-256 of the canonical configuration.
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub wall_clock_seconds: f64,
    pub values: BTreeMap<String, f64>,
    pub checks: Vec<CheckReport>,
    pub informational: Vec<CheckReport>,
    /// File names of the CSV tables.
    pub tables: Vec<String>,
    pub passed: bool,
}

impl RunReport {
    pub fn failed_checks(&self) -> impl Iterator<Item = &CheckReport> {
        self.checks.iter().filter(|c| !c.pass)
    }

    /// Exit status: 0 when every check passes, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            2
        }
    }

    /// One `PASS`/`FAIL` line per check, followed by informational lines.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let line = |tag: &str, c: &CheckReport| {
            let mut s = format!(
                "{tag} {}: {:.6e} (threshold {:.6e})",
                c.name, c.statistic, c.threshold
            );
            if !c.note.is_empty() {
                s.push_str(&format!(" [{}]", c.note));
            }
            s.push('\n');
            s
        };
        for c in &self.checks {
            out.push_str(&line(if c.pass { "PASS" } else { "FAIL" }, c));
        }
        for c in &self.informational {
            out.push_str(&line("INFO", c));
        }
        out
    }
}
