//! Scenario files: the JSON description of users, carriers, and tolerance
//! that a run ingests.
//!
//! Every user carries its application's utility parameters and minimum
//! required rate; carriers carry a coverage radius and either a concrete
//! capacity or a sweep block. Validation happens at load time so solver code
//! only ever sees well-formed inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rateshare::grouping::{build_groups, Carrier, GroupingError, User};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

/// Capacity range for a swept carrier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRange {
    pub from: f64,
    pub to: f64,
    pub step: f64,
}

impl SweepRange {
    /// The capacities visited: `from, from + step, ...` up to `to`
    /// (inclusive, with rounding slack). Empty when `from > to`.
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut i = 0u32;
        loop {
            let v = self.from + self.step * i as f64;
            if v > self.to + 1e-9 * self.step {
                break;
            }
            out.push(v);
            i += 1;
        }
        out
    }
}

/// One carrier as described in the file: concrete capacity or a sweep block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarrierSpec {
    pub id: u32,
    pub coverage_radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepRange>,
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    pub users: Vec<User>,
    pub carriers: Vec<CarrierSpec>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error in {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("invalid scenario: {0}")]
    User(#[from] GroupingError),
}

impl Scenario {
    /// The swept carrier declared in the file, if any.
    pub fn sweep_carrier(&self) -> Option<(u32, SweepRange)> {
        self.carriers.iter().find_map(|c| c.sweep.map(|s| (c.id, s)))
    }

    /// Concrete carriers for a single run. Fails if any carrier only has a
    /// sweep block.
    pub fn concrete_carriers(&self) -> Result<Vec<Carrier>, ScenarioError> {
        self.carriers
            .iter()
            .map(|c| {
                let capacity = c.capacity.ok_or_else(|| {
                    ScenarioError::Invalid(format!(
                        "carrier {} has no capacity; run it through the sweep command",
                        c.id
                    ))
                })?;
                Ok(Carrier { id: c.id, coverage_radius: c.coverage_radius, capacity })
            })
            .collect()
    }

    /// Concrete carriers with `capacity` substituted for carrier `swept_id`.
    /// Other carriers must have concrete capacities.
    pub fn carriers_with(&self, swept_id: u32, capacity: f64) -> Result<Vec<Carrier>, ScenarioError> {
        if !self.carriers.iter().any(|c| c.id == swept_id) {
            return Err(ScenarioError::Invalid(format!("no carrier with id {swept_id}")));
        }
        self.carriers
            .iter()
            .map(|c| {
                let cap = if c.id == swept_id {
                    capacity
                } else {
                    c.capacity.ok_or_else(|| {
                        ScenarioError::Invalid(format!("carrier {} has no capacity", c.id))
                    })?
                };
                Ok(Carrier { id: c.id, coverage_radius: c.coverage_radius, capacity: cap })
            })
            .collect()
    }

    /// User ids, ascending. Fixes the CSV column order.
    pub fn user_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.users.iter().map(|u| u.id).collect();
        ids.sort_unstable();
        ids
    }

    /// Carrier ids, ascending. Fixes the CSV column order.
    pub fn carrier_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.carriers.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(ScenarioError::Invalid(format!(
                "tolerance must be finite and > 0, got {}",
                self.tolerance
            )));
        }
        if self.users.is_empty() {
            return Err(ScenarioError::Invalid("no users".into()));
        }
        if self.carriers.is_empty() {
            return Err(ScenarioError::Invalid("no carriers".into()));
        }
        for u in &self.users {
            u.validate()?;
        }
        let mut sweeps = 0;
        for c in &self.carriers {
            if !(c.coverage_radius > 0.0 && c.coverage_radius.is_finite()) {
                return Err(ScenarioError::Invalid(format!(
                    "carrier {}: coverage_radius must be finite and > 0",
                    c.id
                )));
            }
            match (c.capacity, &c.sweep) {
                (None, None) => {
                    return Err(ScenarioError::Invalid(format!(
                        "carrier {}: needs a capacity or a sweep block",
                        c.id
                    )))
                }
                (Some(_), Some(_)) => {
                    return Err(ScenarioError::Invalid(format!(
                        "carrier {}: capacity and sweep are mutually exclusive",
                        c.id
                    )))
                }
                (Some(cap), None) => {
                    if !(cap > 0.0 && cap.is_finite()) {
                        return Err(ScenarioError::Invalid(format!(
                            "carrier {}: capacity must be finite and > 0, got {cap}",
                            c.id
                        )));
                    }
                }
                (None, Some(s)) => {
                    sweeps += 1;
                    if !(s.from > 0.0 && s.step > 0.0 && s.to.is_finite() && s.from.is_finite()) {
                        return Err(ScenarioError::Invalid(format!(
                            "carrier {}: sweep needs from > 0, step > 0, finite bounds",
                            c.id
                        )));
                    }
                }
            }
        }
        if sweeps > 1 {
            return Err(ScenarioError::Invalid(
                "at most one carrier may carry a sweep block".into(),
            ));
        }
        // Duplicate-id detection; radii enter as-is, capacities are dummies.
        let probe: Vec<Carrier> = self
            .carriers
            .iter()
            .map(|c| Carrier { id: c.id, coverage_radius: c.coverage_radius, capacity: 1.0 })
            .collect();
        build_groups(&self.users, &probe)?;
        Ok(())
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    let scenario: Scenario = serde_json::from_str(&text)
        .map_err(|source| ScenarioError::Parse { path: path.to_path_buf(), source })?;
    scenario.validate()?;
    Ok(scenario)
}
