//! Verification check results shared by all verifier operations.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

/// Outcome of one verification check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub max_deviation: f64,
    pub tolerance: f64,
    /// Grid location (t or (t,s)) where the maximum deviation occurred.
    pub location: Option<String>,
}

impl Check {
    pub fn pass_fail(name: &str, max_deviation: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            status: if max_deviation <= tolerance {
                Status::Pass
            } else {
                Status::Fail
            },
            max_deviation,
            tolerance,
            location: None,
        }
    }

    pub fn not_applicable(name: &str, reason: &str) -> Self {
        Self {
            name: name.to_string(),
            status: Status::NotApplicable,
            max_deviation: 0.0,
            tolerance: 0.0,
            location: Some(reason.to_string()),
        }
    }

    pub fn at(mut self, location: String) -> Self {
        self.location = Some(location);
        self
    }

    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }
}
