//! Scenario configuration documents (JSON, `schema: 1`).

use serde::{Deserialize, Serialize};

use crate::dynamics::ModelConfig;
use crate::error::{ModelError, Result};
use crate::profiles::ProfileSpec;
use crate::schedule::Schedule;
use crate::stochastic::McConfig;

pub const SCHEMA_VERSION: u32 = 1;

fn default_record_every() -> u64 {
    1
}
fn default_ratio_tolerance() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSchedule {
    pub name: String,
    pub schedule: Schedule,
}

/// Output paths. Relative paths resolve against the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_json: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble_csv: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison_json: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: u32,
    pub profile: ProfileSpec,
    /// Schedule for `simulate` and `mc`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    /// Schedules for `compare`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedules: Vec<NamedSchedule>,
    pub steps: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McConfig>,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    /// Ratio tolerance for the convergence horizon.
    #[serde(default = "default_ratio_tolerance")]
    pub ratio_tolerance: f64,
    #[serde(default)]
    pub outputs: Outputs,
}

impl ScenarioConfig {
    /// Structural checks shared by all commands.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(ModelError::config(format!(
                "unsupported schema {} (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        if self.steps == 0 {
            return Err(ModelError::config("steps must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(ModelError::config("record_every must be at least 1"));
        }
        if !(self.ratio_tolerance.is_finite() && self.ratio_tolerance > 0.0) {
            return Err(ModelError::config("ratio_tolerance must be positive"));
        }
        self.model.validate()?;
        self.profile.depth()?;
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        for named in &self.schedules {
            named
                .schedule
                .validate()
                .map_err(|e| ModelError::config(format!("schedule '{}': {e}", named.name)))?;
        }
        if let Some(mc) = &self.mc {
            mc.validate()?;
        }
        Ok(())
    }

    pub fn require_schedule(&self) -> Result<&Schedule> {
        self.schedule
            .as_ref()
            .ok_or_else(|| ModelError::config("missing field `schedule`"))
    }

    pub fn require_schedules(&self) -> Result<&[NamedSchedule]> {
        if self.schedules.len() < 2 {
            return Err(ModelError::config(
                "`schedules` must list at least two schedules",
            ));
        }
        let mut names: Vec<&str> = self.schedules.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(ModelError::config("schedule names must be unique"));
        }
        Ok(&self.schedules)
    }

    pub fn require_mc(&self) -> Result<&McConfig> {
        self.mc
            .as_ref()
            .ok_or_else(|| ModelError::config("missing field `mc`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ScenarioConfig {
        serde_json::from_str(
            r#"{
                "schema": 1,
                "profile": { "kind": "feedforward", "depth": 4 },
                "schedule": { "kind": "constant", "lr": 0.1 },
                "steps": 10
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_are_filled_in() {
        let cfg = base();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.record_every, 1);
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.profile.initial_sigma_sq, 2.0);
        assert!(cfg.require_schedules().is_err());
        assert!(cfg.require_mc().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<ScenarioConfig>(
            r#"{ "schema": 1, "profile": { "kind": "uniform", "depth": 2 }, "steps": 1, "stpes": 3 }"#,
        );
        assert!(err.is_err());
        let err = serde_json::from_str::<ScenarioConfig>(
            r#"{ "schema": 1, "profile": { "kind": "uniform", "depth": 2 }, "steps": 1,
                 "schedule": { "kind": "constant", "lr": 1, "gamma": 2 } }"#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut cfg = base();
        cfg.schema = 2;
        assert!(cfg.validate().is_err());
        cfg.schema = 1;
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
        cfg.steps = 1;
        cfg.schedules = vec![
            NamedSchedule {
                name: "a".into(),
                schedule: Schedule::constant(1.0),
            },
            NamedSchedule {
                name: "a".into(),
                schedule: Schedule::constant(2.0),
            },
        ];
        assert!(cfg.require_schedules().is_err());
        cfg.schedules[1].name = "b".into();
        assert_eq!(cfg.require_schedules().unwrap().len(), 2);
    }
}
