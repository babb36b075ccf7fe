//! Measured-versus-bound check tables.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub id: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
    pub note: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EstimateReport {
    pub checks: Vec<Check>,
}

impl EstimateReport {
    /// Records `measured ≤ bound·(1 + slack)`.
    pub fn upper(&mut self, id: &str, measured: f64, bound: f64, slack: f64, note: impl Into<String>) {
        let pass = measured <= bound + slack * bound.abs();
        self.push(id, measured, bound, pass, note);
    }

    /// Records `measured ≥ bound`.
    pub fn lower(&mut self, id: &str, measured: f64, bound: f64, note: impl Into<String>) {
        self.push(id, measured, bound, measured >= bound, note);
    }

    pub fn push(&mut self, id: &str, measured: f64, bound: f64, pass: bool, note: impl Into<String>) {
        self.checks.push(Check { id: id.to_string(), measured, bound, pass, note: note.into() });
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, id: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,measured,bound,pass,note\n");
        for c in &self.checks {
            out.push_str(&format!("{},{:?},{:?},{},{}\n", c.id, c.measured, c.bound, c.pass, c.note.replace(',', ";")));
        }
        out
    }
}
