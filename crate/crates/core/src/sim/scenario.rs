//! Scenario files: a fleet, the functions and rules to install, and a timed
//! script of sensor readings, plus the outcome the run must produce.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::FlowStep;
use crate::model::{BindingSource, Capability, DeviceStatus, FunctionSpec, ParamValue};
use crate::telemetry::Comparator;

use super::bundled::bundled;
use super::ScenarioError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Time-units between telemetry flushes of every agent.
    #[serde(default = "default_interval")]
    pub telemetry_interval: f64,
    /// Time-units to run; defaults to one interval past the last scripted item.
    #[serde(default)]
    pub duration: Option<f64>,
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub functions: Vec<FunctionSource>,
    #[serde(default)]
    pub autodeploy: Vec<AutoDeploySpec>,
    #[serde(default)]
    pub assignments: Vec<AssignmentSpec>,
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub generators: Vec<GeneratorSpec>,
    #[serde(default)]
    pub expect: Expectations,
}

fn default_interval() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    pub address: String,
    #[serde(default)]
    pub capabilities: Vec<Capability>,
    #[serde(default = "default_interpreters")]
    pub interpreters: Vec<String>,
    /// Time-unit at which the device powers on.
    #[serde(default)]
    pub boot_at: f64,
}

fn default_interpreters() -> Vec<String> {
    vec!["python".into()]
}

/// A bundled function by name, or a full definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FunctionSource {
    Bundled { bundled: String },
    Inline(FunctionSpec),
}

impl FunctionSource {
    pub fn resolve(&self) -> Result<FunctionSpec, ScenarioError> {
        match self {
            FunctionSource::Bundled { bundled: name } => bundled(name)
                .ok_or_else(|| ScenarioError::Invalid(format!("no bundled function {name:?}"))),
            FunctionSource::Inline(spec) => Ok(spec.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoDeploySpec {
    /// Capability tags the device must declare.
    pub capabilities: Vec<String>,
    /// Function name.
    pub function: String,
    #[serde(default)]
    pub bindings: BTreeMap<String, BindingSource>,
}

/// A manual assignment made by the administrator at `at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentSpec {
    pub at: f64,
    pub device: String,
    pub function: String,
    #[serde(default)]
    pub bindings: BTreeMap<String, ParamValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub device: String,
    pub metric: String,
    pub comparator: Comparator,
    pub threshold: f64,
    /// In time-units.
    #[serde(default)]
    pub cooldown: f64,
    pub actions: Vec<ActionSpec>,
}

/// A rule action naming its target device by scenario name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionSpec {
    DeviceInvoke {
        device: String,
        action: String,
        #[serde(default)]
        params: BTreeMap<String, serde_json::Value>,
    },
    Notify {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventSpec {
    /// A sensor reading on a device.
    Reading {
        at: f64,
        device: String,
        metric: String,
        value: f64,
    },
    /// Power-cycles a device's agent.
    Restart { at: f64, restart: String },
}

impl EventSpec {
    pub fn at(&self) -> f64 {
        match self {
            EventSpec::Reading { at, .. } | EventSpec::Restart { at, .. } => *at,
        }
    }

    pub fn device(&self) -> &str {
        match self {
            EventSpec::Reading { device, .. } => device,
            EventSpec::Restart { restart, .. } => restart,
        }
    }
}

/// Seeded readings `base ± jitter` every `every` units over `[from, until)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub device: String,
    pub metric: String,
    #[serde(default)]
    pub from: f64,
    pub until: f64,
    pub every: f64,
    pub base: f64,
    #[serde(default)]
    pub jitter: f64,
}

/// What the run must produce. Absent fields are not checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    /// Recording artifacts per device.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub recordings: BTreeMap<String, usize>,
    /// Duration, in time-units, of every recording.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording_duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notifications: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub firings: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suppressed: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_actions: Option<usize>,
    /// The discovery and deployment steps logged for each device.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub flows: BTreeMap<String, Vec<FlowStep>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub status: BTreeMap<String, DeviceStatus>,
    /// Running deployments per device.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub running: BTreeMap<String, usize>,
    /// Relay state file contents per device.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub relays: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_records: Option<usize>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario =
            serde_json::from_str(text).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Structural checks that need no running fleet. Rule targets are
    /// resolved when the rules are installed.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        let finite = |what: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(ScenarioError::Invalid(format!(
                    "{what} must be a non-negative number"
                )))
            }
        };
        if !(self.telemetry_interval.is_finite() && self.telemetry_interval > 0.0) {
            return invalid("telemetry_interval must be positive".into());
        }
        if let Some(duration) = self.duration {
            finite("duration", duration)?;
        }
        let mut names = std::collections::BTreeSet::new();
        for device in &self.devices {
            if !names.insert(device.name.as_str()) {
                return invalid(format!("duplicate device {:?}", device.name));
            }
            finite("boot_at", device.boot_at)?;
        }
        let known_device = |name: &str| {
            if names.contains(name) {
                Ok(())
            } else {
                Err(ScenarioError::Invalid(format!("unknown device {name:?}")))
            }
        };
        let mut functions = Vec::new();
        for source in &self.functions {
            let spec = source.resolve()?;
            if functions.contains(&spec.name) {
                return invalid(format!("duplicate function {:?}", spec.name));
            }
            functions.push(spec.name);
        }
        let known_function = |name: &str| {
            if functions.iter().any(|f| f == name) {
                Ok(())
            } else {
                Err(ScenarioError::Invalid(format!("unknown function {name:?}")))
            }
        };
        for rule in &self.autodeploy {
            known_function(&rule.function)?;
        }
        for assignment in &self.assignments {
            finite("assignment time", assignment.at)?;
            known_device(&assignment.device)?;
            known_function(&assignment.function)?;
        }
        for rule in &self.rules {
            finite("cooldown", rule.cooldown)?;
        }
        let mut last = 0.0;
        for event in &self.events {
            finite("event time", event.at())?;
            if event.at() < last {
                return invalid(format!(
                    "event times must be non-decreasing ({} after {last})",
                    event.at()
                ));
            }
            last = event.at();
            known_device(event.device())?;
        }
        for generator in &self.generators {
            known_device(&generator.device)?;
            finite("generator start", generator.from)?;
            finite("generator end", generator.until)?;
            if !(generator.every.is_finite() && generator.every > 0.0) {
                return invalid("generator period must be positive".into());
            }
        }
        let expected = self
            .expect
            .recordings
            .keys()
            .chain(self.expect.flows.keys())
            .chain(self.expect.status.keys())
            .chain(self.expect.running.keys())
            .chain(self.expect.relays.keys());
        for name in expected {
            known_device(name)?;
        }
        Ok(())
    }
}
