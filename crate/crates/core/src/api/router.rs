//! Request routing, independent of the HTTP server that carries it.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::control::{ControlError, ControlPlane};
use crate::deploy::DeployError;
use crate::model::{BindingSource, Bindings, Capability, DeviceStatus, FunctionSpec, Id};
use crate::registry::{FunctionPatch, RegistryError};
use crate::telemetry::{InteropRuleSpec, TelemetryError, TelemetryUpload};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ApiRequest {
    pub method: String,
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub authorization: Option<String>,
    pub body: Vec<u8>,
}

impl ApiRequest {
    /// `target` is a path with an optional query string.
    pub fn new(method: &str, target: &str) -> Self {
        let (path, query) = target.split_once('?').unwrap_or((target, ""));
        ApiRequest {
            method: method.to_ascii_uppercase(),
            path: path.to_owned(),
            query: url::form_urlencoded::parse(query.as_bytes())
                .into_owned()
                .collect(),
            authorization: None,
            body: Vec::new(),
        }
    }

    pub fn json(mut self, body: &Value) -> Self {
        self.body = body.to_string().into_bytes();
        self
    }

    pub fn bearer(mut self, token: &str) -> Self {
        self.authorization = Some(format!("Bearer {token}"));
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    fn ok(status: u16, body: impl Serialize) -> Self {
        ApiResponse {
            status,
            body: serde_json::to_value(body).expect("response bodies serialize"),
        }
    }
}

/// An error with its HTTP status.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub kind: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: u16, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, "malformed-request", message)
    }

    fn into_response(self) -> ApiResponse {
        ApiResponse {
            status: self.status,
            body: json!({"error": self.kind, "message": self.message}),
        }
    }
}

impl From<RegistryError> for ApiError {
    fn from(err: RegistryError) -> Self {
        let (status, kind) = match &err {
            RegistryError::Validation(_) => (400, "validation"),
            RegistryError::Binding(_) => (400, "binding"),
            RegistryError::NotFound { .. } => (404, "not-found"),
            RegistryError::InUse(_) => (409, "in-use"),
            RegistryError::IllegalTransition(_) => (409, "illegal-transition"),
            RegistryError::Storage(_) => (500, "storage"),
        };
        ApiError::new(status, kind, err.to_string())
    }
}

impl From<TelemetryError> for ApiError {
    fn from(err: TelemetryError) -> Self {
        let (status, kind) = match &err {
            TelemetryError::MalformedBatch(_) => (400, "malformed-batch"),
            TelemetryError::Validation(_) => (400, "validation"),
            TelemetryError::InvalidRange(_) => (400, "invalid-range"),
            TelemetryError::UnknownDevice(_) => (404, "unknown-device"),
            TelemetryError::NotFound { .. } => (404, "not-found"),
            TelemetryError::Storage(_) => (500, "storage"),
        };
        ApiError::new(status, kind, err.to_string())
    }
}

impl From<DeployError> for ApiError {
    fn from(err: DeployError) -> Self {
        let (status, kind) = match &err {
            DeployError::UnsafeValue { .. } => (400, "unsafe-value"),
            DeployError::UnresolvedPlaceholder(_) => (400, "unresolved-placeholder"),
            DeployError::Precondition { .. } => (409, "precondition"),
            DeployError::FunctionMismatch { .. } => (409, "function-mismatch"),
            DeployError::Transport(_) => (502, "transport"),
            DeployError::Launch { .. } => (502, "launch"),
        };
        ApiError::new(status, kind, err.to_string())
    }
}

impl From<ControlError> for ApiError {
    fn from(err: ControlError) -> Self {
        match err {
            ControlError::Registry(e) => e.into(),
            ControlError::Telemetry(e) => e.into(),
            ControlError::Deploy(e) => e.into(),
        }
    }
}

type Outcome = Result<ApiResponse, ApiError>;

#[derive(Debug, Deserialize)]
struct RegisterBody {
    address: String,
    #[serde(default)]
    capabilities: Vec<Capability>,
}

#[derive(Debug, Deserialize)]
struct AssignBody {
    device_id: Id,
    function_id: Id,
    #[serde(default)]
    bindings: Bindings,
}

#[derive(Debug, Deserialize)]
struct AutoDeployBody {
    #[serde(default)]
    capability_predicate: Vec<String>,
    function_id: Id,
    #[serde(default)]
    binding_template: BTreeMap<String, BindingSource>,
}

/// The control plane's HTTP surface. Device-facing endpoints are open; every
/// other endpoint needs `Authorization: Bearer <admin token>`.
pub struct Api {
    plane: Arc<ControlPlane>,
    admin_token: String,
}

impl Api {
    pub fn new(plane: Arc<ControlPlane>, admin_token: &str) -> Self {
        Api {
            plane,
            admin_token: admin_token.to_owned(),
        }
    }

    pub fn plane(&self) -> &Arc<ControlPlane> {
        &self.plane
    }

    pub fn handle(&self, request: &ApiRequest) -> ApiResponse {
        let outcome = self.route(request);
        outcome.unwrap_or_else(ApiError::into_response)
    }

    fn authorized(&self, request: &ApiRequest) -> bool {
        let expected = format!("Bearer {}", self.admin_token);
        match &request.authorization {
            Some(given) => {
                given.len() == expected.len()
                    && given
                        .bytes()
                        .zip(expected.bytes())
                        .fold(0u8, |acc, (a, b)| acc | (a ^ b))
                        == 0
            }
            None => false,
        }
    }

    fn route(&self, request: &ApiRequest) -> Outcome {
        let segments: Vec<&str> = request
            .path
            .trim_matches('/')
            .split('/')
            .filter(|s| !s.is_empty())
            .collect();
        let method = request.method.as_str();
        match (method, segments.as_slice()) {
            ("POST", ["devices"]) => return self.register(request),
            ("POST", ["telemetry"]) => return self.ingest(request),
            _ => {}
        }
        if !self.authorized(request) {
            return Err(ApiError::new(401, "unauthorized", "admin token required"));
        }
        let registry = self.plane.registry();
        let telemetry = self.plane.telemetry();
        match (method, segments.as_slice()) {
            ("GET", ["devices"]) => {
                let status = match request.query.get("status") {
                    None => None,
                    Some(s) => Some(
                        serde_json::from_value::<DeviceStatus>(Value::String(s.clone()))
                            .map_err(|_| ApiError::bad_request(format!("unknown status {s:?}")))?,
                    ),
                };
                Ok(ApiResponse::ok(200, registry.list_devices(status)))
            }
            ("POST", ["functions"]) => {
                let spec: FunctionSpec = parse(&request.body)?;
                Ok(ApiResponse::ok(201, registry.create_function(spec)?))
            }
            ("GET", ["functions"]) => Ok(ApiResponse::ok(200, registry.list_functions())),
            ("GET", ["functions", id]) => {
                Ok(ApiResponse::ok(200, registry.get_function(&Id::from(*id))?))
            }
            ("PUT", ["functions", id]) => {
                let patch: FunctionPatch = parse(&request.body)?;
                Ok(ApiResponse::ok(
                    200,
                    registry.update_function(&Id::from(*id), patch)?,
                ))
            }
            ("DELETE", ["functions", id]) => {
                registry.delete_function(&Id::from(*id))?;
                Ok(ApiResponse::ok(200, json!({"deleted": id})))
            }
            ("POST", ["deployments"]) => {
                let body: AssignBody = parse(&request.body)?;
                let report = self.plane.assign_deployment(
                    &body.device_id,
                    &body.function_id,
                    &body.bindings,
                )?;
                Ok(ApiResponse::ok(201, report))
            }
            ("GET", ["deployments"]) => {
                let device = request.query.get("device").map(|d| Id::from(d.as_str()));
                Ok(ApiResponse::ok(
                    200,
                    registry.list_deployments(device.as_ref()),
                ))
            }
            ("POST", ["deployments", id, "stop"]) => Ok(ApiResponse::ok(
                200,
                self.plane.stop_deployment(&Id::from(*id))?,
            )),
            ("POST", ["deployments", id, "probe"]) => {
                let (liveness, deployment) = self.plane.probe_deployment(&Id::from(*id))?;
                Ok(ApiResponse::ok(
                    200,
                    json!({"liveness": liveness, "deployment": deployment}),
                ))
            }
            ("POST", ["rules", "interop"]) => {
                let spec: InteropRuleSpec = parse(&request.body)?;
                Ok(ApiResponse::ok(201, telemetry.create_rule(spec)?))
            }
            ("GET", ["rules", "interop"]) => Ok(ApiResponse::ok(200, telemetry.list_rules())),
            ("GET", ["rules", "interop", id]) => {
                Ok(ApiResponse::ok(200, telemetry.get_rule(&Id::from(*id))?))
            }
            ("DELETE", ["rules", "interop", id]) => {
                telemetry.delete_rule(&Id::from(*id))?;
                Ok(ApiResponse::ok(200, json!({"deleted": id})))
            }
            ("POST", ["rules", "autodeploy"]) => {
                let body: AutoDeployBody = parse(&request.body)?;
                Ok(ApiResponse::ok(
                    201,
                    registry.create_autodeploy_rule(
                        body.capability_predicate,
                        &body.function_id,
                        body.binding_template,
                    )?,
                ))
            }
            ("GET", ["rules", "autodeploy"]) => {
                Ok(ApiResponse::ok(200, registry.list_autodeploy_rules()))
            }
            ("GET", ["rules", "autodeploy", id]) => Ok(ApiResponse::ok(
                200,
                registry.get_autodeploy_rule(&Id::from(*id))?,
            )),
            ("DELETE", ["rules", "autodeploy", id]) => {
                registry.delete_autodeploy_rule(&Id::from(*id))?;
                Ok(ApiResponse::ok(200, json!({"deleted": id})))
            }
            ("GET", ["telemetry"]) => self.query(request),
            (_, path) if known_path(path) => Err(ApiError::new(
                405,
                "method-not-allowed",
                format!("{method} not allowed on {}", request.path),
            )),
            _ => Err(ApiError::new(
                404,
                "no-route",
                format!("no route for {method} {}", request.path),
            )),
        }
    }

    fn register(&self, request: &ApiRequest) -> Outcome {
        let body: RegisterBody = parse(&request.body)?;
        let onboarding = self
            .plane
            .register_device(&body.address, body.capabilities)?;
        Ok(ApiResponse::ok(
            201,
            json!({
                "device_id": onboarding.device.id,
                "status": onboarding.device.status,
            }),
        ))
    }

    fn ingest(&self, request: &ApiRequest) -> Outcome {
        let upload: TelemetryUpload = parse(&request.body)?;
        let report = self.plane.telemetry().ingest(upload)?;
        Ok(ApiResponse::ok(202, json!({"stored": report.stored})))
    }

    fn query(&self, request: &ApiRequest) -> Outcome {
        let required = |key: &str| {
            request.query.get(key).cloned().ok_or_else(|| {
                ApiError::bad_request(format!("query parameter {key:?} is required"))
            })
        };
        let device = Id::new(required("device")?);
        let metric = required("metric")?;
        let from = timestamp(request.query.get("from"))?;
        let to = timestamp(request.query.get("to"))?;
        let samples = self
            .plane
            .telemetry()
            .query_telemetry(&device, &metric, from, to)?;
        Ok(ApiResponse::ok(200, samples))
    }
}

fn known_path(segments: &[&str]) -> bool {
    matches!(
        segments,
        ["devices"]
            | ["telemetry"]
            | ["functions"]
            | ["functions", _]
            | ["deployments"]
            | ["deployments", _, "stop" | "probe"]
            | ["rules", "interop" | "autodeploy"]
            | ["rules", "interop" | "autodeploy", _]
    )
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

fn timestamp(text: Option<&String>) -> Result<Option<DateTime<Utc>>, ApiError> {
    text.map(|t| {
        DateTime::parse_from_rfc3339(t)
            .map(|d| d.with_timezone(&Utc))
            .map_err(|e| ApiError::bad_request(format!("invalid timestamp {t:?}: {e}")))
    })
    .transpose()
}
