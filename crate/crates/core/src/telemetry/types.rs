use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::model::{Id, Timestamp};
use crate::template;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub timestamp: Timestamp,
    pub value: f64,
}

impl Sample {
    pub fn new(timestamp: Timestamp, value: f64) -> Self {
        Sample { timestamp, value }
    }
}

/// A batch as pushed by a device, before the control plane stamps it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryUpload {
    pub device_id: Id,
    pub metric: String,
    #[serde(default)]
    pub samples: Vec<Sample>,
}

impl TelemetryUpload {
    pub fn validate(&self) -> Result<(), String> {
        if self.metric.trim().is_empty() {
            return Err("metric must not be empty".into());
        }
        if let Some(pair) = self
            .samples
            .windows(2)
            .position(|w| w[1].timestamp < w[0].timestamp)
        {
            return Err(format!("sample timestamps decrease at index {}", pair + 1));
        }
        if self.samples.iter().any(|s| !s.value.is_finite()) {
            return Err("sample values must be finite numbers".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryBatch {
    pub id: Id,
    pub device_id: Id,
    pub metric: String,
    pub samples: Vec<Sample>,
    pub received_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Comparator {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl Comparator {
    pub const ALL: [Comparator; 6] = [
        Comparator::Lt,
        Comparator::Le,
        Comparator::Gt,
        Comparator::Ge,
        Comparator::Eq,
        Comparator::Ne,
    ];

    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Lt => value < threshold,
            Comparator::Le => value <= threshold,
            Comparator::Gt => value > threshold,
            Comparator::Ge => value >= threshold,
            Comparator::Eq => value == threshold,
            Comparator::Ne => value != threshold,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Eq => "=",
            Comparator::Ne => "!=",
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Comparator {
    type Err = String;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        Ok(match text {
            "<" | "lt" => Comparator::Lt,
            "<=" | "≤" | "le" => Comparator::Le,
            ">" | "gt" => Comparator::Gt,
            ">=" | "≥" | "ge" => Comparator::Ge,
            "=" | "==" | "eq" => Comparator::Eq,
            "!=" | "≠" | "ne" => Comparator::Ne,
            other => return Err(format!("unknown comparator {other:?}")),
        })
    }
}

impl Serialize for Comparator {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.symbol())
    }
}

impl<'de> Deserialize<'de> for Comparator {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub source_device_id: Id,
    pub metric: String,
    pub comparator: Comparator,
    pub threshold: f64,
}

/// Placeholders a notification template may use.
pub const MESSAGE_PLACEHOLDERS: [&str; 4] = ["device", "metric", "value", "timestamp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    DeviceInvoke {
        target_device_id: Id,
        action_name: String,
        #[serde(default)]
        params: BTreeMap<String, serde_json::Value>,
    },
    Notify {
        message_template: String,
    },
}

impl Action {
    pub fn invoke(target: &Id, action_name: &str, params: serde_json::Value) -> Self {
        let params = match params {
            serde_json::Value::Object(map) => map.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        Action::DeviceInvoke {
            target_device_id: target.clone(),
            action_name: action_name.to_owned(),
            params,
        }
    }

    pub fn notify(message_template: &str) -> Self {
        Action::Notify {
            message_template: message_template.to_owned(),
        }
    }
}

/// An interoperability rule as submitted by an administrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteropRuleSpec {
    pub condition: Condition,
    pub actions: Vec<Action>,
    #[serde(default)]
    pub cooldown_ms: i64,
}

impl InteropRuleSpec {
    /// Structural checks. Target device existence is checked by the caller.
    pub fn validate(&self) -> Result<(), String> {
        if self.actions.is_empty() {
            return Err("a rule needs at least one action".into());
        }
        if self.cooldown_ms < 0 {
            return Err("cooldown must not be negative".into());
        }
        if self.condition.metric.trim().is_empty() {
            return Err("condition metric must not be empty".into());
        }
        if !self.condition.threshold.is_finite() {
            return Err("condition threshold must be a finite number".into());
        }
        for action in &self.actions {
            match action {
                Action::DeviceInvoke { action_name, .. } if action_name.trim().is_empty() => {
                    return Err("device action name must not be empty".into())
                }
                Action::Notify { message_template } => {
                    for name in template::placeholders(message_template) {
                        if !MESSAGE_PLACEHOLDERS.contains(&name.as_str()) {
                            return Err(format!(
                                "message placeholder {{{name}}} is not one of {MESSAGE_PLACEHOLDERS:?}"
                            ));
                        }
                    }
                }
                Action::DeviceInvoke { .. } => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteropRule {
    pub id: Id,
    pub condition: Condition,
    pub actions: Vec<Action>,
    pub cooldown_ms: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_fired: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeStatus {
    Delivered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub id: Id,
    pub rule_id: Id,
    pub action_index: usize,
    pub status: OutcomeStatus,
    pub detail: String,
    pub fired_at: Timestamp,
}

/// One telemetry value as seen by the rule engine.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub device_id: Id,
    pub metric: String,
    pub value: f64,
    pub timestamp: Timestamp,
}
