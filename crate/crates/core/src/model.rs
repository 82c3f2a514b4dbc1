//! Domain entities shared by the registry, the deployment engine and the
//! simulator.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::template;

pub type Timestamp = DateTime<Utc>;

/// Opaque entity identifier.
///
/// Identifiers are allocated as `<prefix>-<8 digit counter>`, so within one
/// kind lexicographic order equals creation order and every id of a kind has
/// the same length.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Id(String);

impl Id {
    pub fn new(value: impl Into<String>) -> Self {
        Id(value.into())
    }

    pub fn allocated(prefix: &str, counter: u64) -> Self {
        Id(format!("{prefix}-{counter:08}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Splits an allocated id into its prefix and counter.
    pub fn parts(&self) -> Option<(&str, u64)> {
        let (prefix, counter) = self.0.rsplit_once('-')?;
        Some((prefix, counter.parse().ok()?))
    }
}

impl fmt::Display for Id {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Id {
    fn from(value: &str) -> Self {
        Id(value.to_owned())
    }
}

pub mod prefix {
    pub const FUNCTION: &str = "fn";
    pub const DEVICE: &str = "dev";
    pub const DEPLOYMENT: &str = "dep";
    pub const AUTODEPLOY_RULE: &str = "adr";
    pub const INTEROP_RULE: &str = "rule";
    pub const TELEMETRY_BATCH: &str = "tb";
    pub const ACTION_OUTCOME: &str = "ao";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Integer,
    Real,
    String,
    Boolean,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ParamKind::Integer => "integer",
            ParamKind::Real => "real",
            ParamKind::String => "string",
            ParamKind::Boolean => "boolean",
        };
        f.write_str(name)
    }
}

/// A concrete parameter value. Serialized as a bare JSON scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Boolean(bool),
    Integer(i64),
    Real(f64),
    String(String),
}

impl ParamValue {
    pub fn kind(&self) -> ParamKind {
        match self {
            ParamValue::Boolean(_) => ParamKind::Boolean,
            ParamValue::Integer(_) => ParamKind::Integer,
            ParamValue::Real(_) => ParamKind::Real,
            ParamValue::String(_) => ParamKind::String,
        }
    }

    /// Converts the value to `kind`, widening integers to reals. Returns
    /// `None` on any other mismatch.
    pub fn coerce(&self, kind: ParamKind) -> Option<ParamValue> {
        match (self, kind) {
            (ParamValue::Integer(v), ParamKind::Real) => Some(ParamValue::Real(*v as f64)),
            (value, kind) if value.kind() == kind => Some(value.clone()),
            _ => None,
        }
    }

    /// Parses the textual form of a capability attribute as `kind`.
    pub fn parse_as(text: &str, kind: ParamKind) -> Option<ParamValue> {
        match kind {
            ParamKind::Integer => text.parse().ok().map(ParamValue::Integer),
            ParamKind::Real => text
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(ParamValue::Real),
            ParamKind::Boolean => text.parse().ok().map(ParamValue::Boolean),
            ParamKind::String => Some(ParamValue::String(text.to_owned())),
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Boolean(v) => write!(f, "{v}"),
            ParamValue::Integer(v) => write!(f, "{v}"),
            ParamValue::Real(v) => write!(f, "{v}"),
            ParamValue::String(v) => f.write_str(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ParamValue>,
}

impl ParamSpec {
    pub fn required(name: &str, kind: ParamKind) -> Self {
        ParamSpec {
            name: name.to_owned(),
            kind,
            required: true,
            default: None,
        }
    }

    pub fn optional(name: &str, kind: ParamKind, default: Option<ParamValue>) -> Self {
        ParamSpec {
            name: name.to_owned(),
            kind,
            required: false,
            default,
        }
    }
}

pub type Bindings = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionDefinition {
    pub id: Id,
    pub name: String,
    pub source: String,
    pub interpreter_template: String,
    pub params: Vec<ParamSpec>,
    pub version: u32,
    /// File extension used for the remote copy of the script, without the dot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extension: Option<String>,
}

/// The mutable part of a function, as submitted by an administrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub name: String,
    pub source: String,
    pub interpreter_template: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extension: Option<String>,
}

impl FunctionSpec {
    /// Checks every structural invariant of a function definition.
    pub fn validate(&self) -> Result<(), String> {
        if self.name.trim().is_empty() {
            return Err("function name must not be empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for param in &self.params {
            if !template::is_identifier(&param.name) {
                return Err(format!("invalid parameter name {:?}", param.name));
            }
            if param.name == template::FILE_TOKEN {
                return Err(format!(
                    "parameter name {:?} is reserved for the script path",
                    param.name
                ));
            }
            if !seen.insert(param.name.as_str()) {
                return Err(format!("duplicate parameter name {:?}", param.name));
            }
            match (&param.default, param.required) {
                (Some(_), true) => {
                    return Err(format!(
                        "required parameter {:?} must not declare a default",
                        param.name
                    ))
                }
                (Some(default), false) if default.coerce(param.kind).is_none() => {
                    return Err(format!(
                        "default for {:?} is not a {} value",
                        param.name, param.kind
                    ))
                }
                _ => {}
            }
        }
        let placeholders = template::placeholders(&self.interpreter_template);
        let file_tokens = placeholders
            .iter()
            .filter(|p| *p == template::FILE_TOKEN)
            .count();
        if file_tokens != 1 {
            return Err(format!(
                "interpreter template must contain exactly one {{{}}} placeholder, found {file_tokens}",
                template::FILE_TOKEN
            ));
        }
        for name in placeholders.iter().filter(|p| *p != template::FILE_TOKEN) {
            if !seen.contains(name.as_str()) {
                return Err(format!(
                    "placeholder {{{name}}} names no declared parameter"
                ));
            }
        }
        if let Some(ext) = &self.extension {
            if ext.is_empty() || !ext.chars().all(|c| c.is_ascii_alphanumeric()) {
                return Err(format!("invalid script extension {ext:?}"));
            }
        }
        Ok(())
    }
}

impl FunctionDefinition {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Validates `bindings` against the parameter schema and fills defaults
    /// for unbound optional parameters.
    pub fn resolve_bindings(&self, bindings: &Bindings) -> Result<Bindings, String> {
        for name in bindings.keys() {
            if self.param(name).is_none() {
                return Err(format!("unknown parameter {name:?}"));
            }
        }
        let mut resolved = Bindings::new();
        for spec in &self.params {
            match bindings.get(&spec.name) {
                Some(value) => {
                    let value = value.coerce(spec.kind).ok_or_else(|| {
                        format!(
                            "parameter {:?} expects a {} value, got {}",
                            spec.name,
                            spec.kind,
                            value.kind()
                        )
                    })?;
                    resolved.insert(spec.name.clone(), value);
                }
                None if spec.required => {
                    return Err(format!("missing required parameter {:?}", spec.name))
                }
                None => {
                    if let Some(default) = &spec.default {
                        resolved.insert(spec.name.clone(), default.clone());
                    }
                }
            }
        }
        Ok(resolved)
    }
}

/// A device capability: a tag with optional `key=value` attributes, written
/// `tag;key=value;key2=value2`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Capability {
    pub tag: String,
    pub attributes: BTreeMap<String, String>,
}

impl Capability {
    pub fn tag(tag: &str) -> Self {
        Capability {
            tag: tag.to_owned(),
            attributes: BTreeMap::new(),
        }
    }
}

impl FromStr for Capability {
    type Err = String;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut parts = text.split(';');
        let tag = parts.next().unwrap_or_default().trim();
        if tag.is_empty() || tag.contains(['=', ' ']) {
            return Err(format!("invalid capability {text:?}"));
        }
        let mut attributes = BTreeMap::new();
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("capability attribute {part:?} is not key=value"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(format!("empty attribute key in {text:?}"));
            }
            attributes.insert(key.to_owned(), value.trim().to_owned());
        }
        Ok(Capability {
            tag: tag.to_owned(),
            attributes,
        })
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag)?;
        for (key, value) in &self.attributes {
            write!(f, ";{key}={value}")?;
        }
        Ok(())
    }
}

impl Serialize for Capability {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Capability {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Looks up an attribute across all capabilities. The first capability (in
/// tag order) carrying the key wins.
pub fn capability_attribute<'a>(capabilities: &'a [Capability], key: &str) -> Option<&'a str> {
    capabilities
        .iter()
        .find_map(|c| c.attributes.get(key).map(String::as_str))
}

/// Validates a `host:port` endpoint. Hostnames, IPv4 and bracketed IPv6 hosts
/// are accepted.
pub fn validate_address(address: &str) -> Result<(), String> {
    let (host, port) = address
        .rsplit_once(':')
        .ok_or_else(|| format!("address {address:?} is not host:port"))?;
    let port: u16 = port
        .parse()
        .map_err(|_| format!("invalid port in address {address:?}"))?;
    if port == 0 {
        return Err(format!("port 0 in address {address:?}"));
    }
    let host_ok = if let Some(inner) = host.strip_prefix('[').and_then(|h| h.strip_suffix(']')) {
        inner.parse::<std::net::Ipv6Addr>().is_ok()
    } else {
        !host.is_empty()
            && host
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_')
    };
    if !host_ok {
        return Err(format!("invalid host in address {address:?}"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceStatus {
    Pending,
    Active,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: Id,
    pub address: String,
    pub capabilities: Vec<Capability>,
    pub status: DeviceStatus,
    pub registered_at: Timestamp,
    /// Key into the credential store; the device address unless overridden.
    pub transport_credentials: String,
    /// Set once an administrator assigned a function to the device by hand.
    #[serde(default)]
    pub manually_activated: bool,
}

impl Device {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.capabilities.iter().any(|c| c.tag == tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeploymentState {
    Requested,
    Transferred,
    Running,
    Failed,
    Stopped,
}

impl DeploymentState {
    /// The legal edge set of the deployment state machine.
    pub fn can_transition_to(self, next: DeploymentState) -> bool {
        use DeploymentState::*;
        matches!(
            (self, next),
            (Requested, Transferred)
                | (Transferred, Running)
                | (Requested, Failed)
                | (Transferred, Failed)
                | (Running, Stopped)
                | (Running, Failed)
        )
    }

    /// Requested, Transferred and Running deployments still occupy the device.
    pub fn is_live(self) -> bool {
        matches!(
            self,
            DeploymentState::Requested | DeploymentState::Transferred | DeploymentState::Running
        )
    }
}

impl fmt::Display for DeploymentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DeploymentState::Requested => "requested",
            DeploymentState::Transferred => "transferred",
            DeploymentState::Running => "running",
            DeploymentState::Failed => "failed",
            DeploymentState::Stopped => "stopped",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal deployment transition {from} -> {to}")]
pub struct IllegalTransition {
    pub from: DeploymentState,
    pub to: DeploymentState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub id: Id,
    pub device_id: Id,
    pub function_id: Id,
    pub function_version: u32,
    /// The auto-deploy rule that created this deployment, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_id: Option<Id>,
    pub bindings: Bindings,
    pub state: DeploymentState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
    pub created_at: Timestamp,
}

impl Deployment {
    /// Moves to `next`, clearing the handle when leaving Running.
    pub fn transition(&mut self, next: DeploymentState) -> Result<(), IllegalTransition> {
        if !self.state.can_transition_to(next) {
            return Err(IllegalTransition {
                from: self.state,
                to: next,
            });
        }
        self.state = next;
        if next != DeploymentState::Running {
            self.handle = None;
        }
        Ok(())
    }

    pub fn fail(&mut self, reason: impl Into<String>) -> Result<(), IllegalTransition> {
        self.transition(DeploymentState::Failed)?;
        self.failure_reason = Some(reason.into());
        Ok(())
    }
}

/// Where an auto-deploy rule takes a binding value from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BindingSource {
    /// A capability attribute of the registering device, e.g. `{"attr": "pir-port"}`.
    Attribute {
        attr: String,
    },
    Literal(ParamValue),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoDeployRule {
    pub id: Id,
    /// Conjunction of capability tags; empty matches every device.
    pub capability_predicate: Vec<String>,
    pub function_id: Id,
    pub binding_template: BTreeMap<String, BindingSource>,
}

impl AutoDeployRule {
    pub fn matches(&self, capabilities: &[Capability]) -> bool {
        self.capability_predicate
            .iter()
            .all(|tag| capabilities.iter().any(|c| &c.tag == tag))
    }

    /// Instantiates the binding template against a device's capabilities.
    pub fn bindings_for(
        &self,
        function: &FunctionDefinition,
        capabilities: &[Capability],
    ) -> Result<Bindings, String> {
        let mut bindings = Bindings::new();
        for (name, source) in &self.binding_template {
            let spec = function
                .param(name)
                .ok_or_else(|| format!("unknown parameter {name:?}"))?;
            let value = match source {
                BindingSource::Literal(value) => value.clone(),
                BindingSource::Attribute { attr } => {
                    match capability_attribute(capabilities, attr) {
                        Some(text) => ParamValue::parse_as(text, spec.kind).ok_or_else(|| {
                            format!("attribute {attr}={text:?} is not a {} value", spec.kind)
                        })?,
                        // Missing attributes leave the parameter to its default.
                        None => continue,
                    }
                }
            };
            bindings.insert(name.clone(), value);
        }
        Ok(bindings)
    }
}
