//! Report types shared by the validators and the Cordes checker.

use serde::{Deserialize, Serialize};

/// Worst sample point found by a check, with the offending value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub v: Option<Vec<f64>>,
    pub z: Vec<f64>,
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub sample_count: usize,
}

impl ValidationReport {
    pub fn push(&mut self, name: &str, pass: bool, detail: String, witness: Option<Witness>) {
        self.checks.push(CheckResult { name: name.to_string(), pass, detail, witness });
    }

    /// A problem or tree is accepted iff every check passed.
    pub fn accepted(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.pass { "PASS" } else { "FAIL" };
            out.push_str(&format!("[{status}] {}: {}\n", c.name, c.detail));
        }
        out
    }

    pub fn first_failure(&self) -> Option<String> {
        self.failures().next().map(|c| format!("{}: {}", c.name, c.detail))
    }
}
