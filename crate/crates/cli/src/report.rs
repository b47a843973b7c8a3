//! The `report_v1` JSON report. Everything outside `volatile` is a function
//! of the configuration and the cache contents only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const SCHEMA: &str = "report_v1";

/// How a check's value is compared with its tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// value ≤ tolerance.
    AtMost,
    /// value ≥ tolerance.
    AtLeast,
    /// value == tolerance exactly.
    Equal,
}

impl Relation {
    pub fn holds(self, value: f64, tolerance: f64) -> bool {
        match self {
            Self::AtMost => value <= tolerance,
            Self::AtLeast => value >= tolerance,
            Self::Equal => value == tolerance,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Self::AtMost => "<=",
            Self::AtLeast => ">=",
            Self::Equal => "==",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u32,
    pub name: String,
    pub value: f64,
    pub relation: Relation,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl Check {
    pub fn new(criterion: u32, name: impl Into<String>, value: f64, relation: Relation, tolerance: f64) -> Self {
        let passed = value.is_finite() && relation.holds(value, tolerance);
        Self { criterion, name: name.into(), value, relation, tolerance, passed, note: String::new() }
    }

    pub fn at_most(criterion: u32, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self::new(criterion, name, value, Relation::AtMost, tolerance)
    }

    /// A boolean property, stored as 1 (holds) or 0.
    pub fn holds(criterion: u32, name: impl Into<String>, ok: bool) -> Self {
        Self::new(criterion, name, if ok { 1.0 } else { 0.0 }, Relation::Equal, 1.0)
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

/// Expected shape of a ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    NonIncreasing,
    Decreasing,
    Reported,
}

/// A residual as a function of a refinement parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ladder {
    pub criterion: u32,
    pub name: String,
    /// Name of the refinement parameter (N, level, k, m, ...).
    pub parameter: String,
    pub points: Vec<(f64, f64)>,
    pub trend: Trend,
}

impl Ladder {
    pub fn new(criterion: u32, name: impl Into<String>, parameter: impl Into<String>, trend: Trend) -> Self {
        Self { criterion, name: name.into(), parameter: parameter.into(), points: Vec::new(), trend }
    }

    pub fn push(&mut self, x: f64, y: f64) {
        self.points.push((x, y));
    }

    pub fn is_non_increasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].1 <= w[0].1)
    }

    pub fn is_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].1 < w[0].1)
    }

    /// Annotation used by the table renderer.
    pub fn monotonicity(&self) -> &'static str {
        if self.points.len() < 2 {
            "single point"
        } else if self.is_decreasing() {
            "decreasing"
        } else if self.is_non_increasing() {
            "non-increasing"
        } else if self.points.windows(2).all(|w| w[1].1 >= w[0].1) {
            "increasing"
        } else {
            "not monotone"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub title: String,
    pub passed: bool,
}

/// Wall-clock data, excluded from determinism comparisons.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Volatile {
    pub timings_ms: BTreeMap<String, u64>,
    pub total_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub library_version: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub cache_keys: Vec<String>,
    pub criteria: Vec<CriterionResult>,
    pub checks: Vec<Check>,
    pub ladders: Vec<Ladder>,
    pub passed: bool,
    pub volatile: Volatile,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// The JSON text with the volatile section cleared; equal across runs of
    /// the same configuration and cache.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.volatile = Volatile::default();
        r.to_json()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_compare_with_their_relation() {
        assert!(Check::at_most(1, "a", 1e-13, 1e-12).passed);
        assert!(!Check::at_most(1, "a", f64::NAN, 1e-12).passed);
        assert!(Check::new(1, "b", 3.0, Relation::AtLeast, 2.0).passed);
        assert!(!Check::holds(1, "c", false).passed);
    }

    #[test]
    fn ladder_annotations() {
        let mut l = Ladder::new(7, "x", "N", Trend::Decreasing);
        for (x, y) in [(40.0, 3.0), (60.0, 2.0), (80.0, 1.0)] {
            l.push(x, y);
        }
        assert_eq!(l.monotonicity(), "decreasing");
        l.push(100.0, 1.0);
        assert_eq!(l.monotonicity(), "non-increasing");
        l.push(120.0, 5.0);
        assert_eq!(l.monotonicity(), "not monotone");
    }

    #[test]
    fn canonical_json_ignores_timings() {
        let mut a = Report {
            schema: SCHEMA.into(),
            library_version: "0".into(),
            command: "trace".into(),
            config: ExperimentConfig::default(),
            config_hash: String::new(),
            cache_keys: vec![],
            criteria: vec![],
            checks: vec![Check::at_most(5, "t", 0.1, 1.0)],
            ladders: vec![],
            passed: true,
            volatile: Volatile::default(),
        };
        let b = a.clone();
        a.volatile.total_ms = 1234;
        assert_ne!(a.to_json(), b.to_json());
        assert_eq!(a.canonical_json(), b.canonical_json());
        assert_eq!(Report::from_json(&a.to_json()).unwrap(), a);
    }
}
