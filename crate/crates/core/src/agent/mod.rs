//! The device-side runtime: registers at boot, serves the action endpoint for
//! the functions running on the device and pushes their telemetry.
//!
//! Functions started on a simulated host become in-process functions: the
//! agent reads the `# fnfleet:` header of the launched script to learn which
//! actions it serves and which sensor it samples. A standalone agent serves
//! the actions listed in its config.

mod buffer;
mod handlers;
mod link;
mod workspace;

pub use buffer::{batches, TelemetryBuffer};
pub use handlers::{
    builtin_handlers, recording_duration, ActionContext, ActionHandler, RECORDINGS_DIR,
    RECORD_BYTES_PER_UNIT, RELAY_STATE,
};
pub use link::{ControlPlaneLink, HttpLink, Registered};
pub use workspace::{DirWorkspace, HostWorkspace, Workspace};

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::api::{ApiRequest, ApiResponse, ConfigError, HttpServer};
use crate::clock::Clock;
use crate::deploy::{ProcessListener, DEFAULT_BASE_DIR};
use crate::model::{validate_address, Capability, Id, Timestamp};
use crate::telemetry::{ActionReply, ActionRequest, Sample, TelemetryUpload};

/// Where the agent keeps the id it was registered under.
pub const DEVICE_ID_FILE: &str = "state/device-id";
/// Copy of the agent config that standalone function scripts read.
pub const CONFIG_FILE: &str = "agent.json";
/// Handle of the pseudo-function holding the actions listed in the config.
pub const CONFIG_HANDLE: &str = "config";

pub const BACKOFF_BASE: Duration = Duration::from_secs(1);
pub const BACKOFF_CAP: Duration = Duration::from_secs(60);

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("registration failed after {attempts} attempts: {last_error}")]
    RegistrationExhausted { attempts: u32, last_error: String },
    #[error("agent is not registered")]
    NotRegistered,
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("handler for {action:?} failed: {reason}")]
    HandlerFailure { action: String, reason: String },
    #[error("telemetry buffer full, {dropped} oldest samples dropped")]
    BufferOverflow { dropped: usize },
    #[error("telemetry upload failed: {0}")]
    Push(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Base URL of the control plane, e.g. `http://10.0.0.1:8080`.
    pub control_plane: String,
    /// The `host:port` the control plane reaches this device at.
    pub address: String,
    #[serde(default)]
    pub capabilities: Vec<Capability>,
    #[serde(default = "default_base_dir")]
    pub base_dir: String,
    /// Port of the action endpoint; defaults to the port of `address`.
    #[serde(default)]
    pub action_port: Option<u16>,
    #[serde(default = "default_workspace")]
    pub workspace: PathBuf,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default = "default_interval")]
    pub telemetry_interval_ms: u64,
    #[serde(default = "default_buffer")]
    pub buffer_capacity: usize,
    /// Actions served without a running function declaring them.
    #[serde(default)]
    pub actions: Vec<String>,
}

fn default_base_dir() -> String {
    DEFAULT_BASE_DIR.into()
}

fn default_workspace() -> PathBuf {
    "/var/lib/fnfleet".into()
}

fn default_retry_budget() -> u32 {
    8
}

fn default_interval() -> u64 {
    10_000
}

fn default_buffer() -> usize {
    1000
}

impl AgentConfig {
    /// A config with defaults for everything but the endpoints.
    pub fn new(control_plane: &str, address: &str, capabilities: Vec<Capability>) -> Self {
        AgentConfig {
            control_plane: control_plane.to_owned(),
            address: address.to_owned(),
            capabilities,
            base_dir: default_base_dir(),
            action_port: None,
            workspace: default_workspace(),
            retry_budget: default_retry_budget(),
            telemetry_interval_ms: default_interval(),
            buffer_capacity: default_buffer(),
            actions: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let config: AgentConfig = crate::api::parse_config(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_address(&self.address)
            .map_err(|e| ConfigError::Invalid(format!("address: {e}")))?;
        let rest = self
            .control_plane
            .strip_prefix("http://")
            .or_else(|| self.control_plane.strip_prefix("https://"))
            .ok_or_else(|| ConfigError::Invalid("control_plane must be an http(s) URL".into()))?;
        validate_address(rest.trim_end_matches('/'))
            .map_err(|e| ConfigError::Invalid(format!("control_plane: {e}")))?;
        if self.base_dir.is_empty() {
            return Err(ConfigError::Invalid("base_dir must not be empty".into()));
        }
        Ok(())
    }

    /// The port the action endpoint listens on.
    pub fn listen_port(&self) -> u16 {
        self.action_port.unwrap_or_else(|| {
            self.address
                .rsplit_once(':')
                .and_then(|(_, p)| p.parse().ok())
                .unwrap_or(0)
        })
    }
}

/// Parsed `# fnfleet: key=value ...` lines of a function script.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptHeader {
    pub actions: Vec<String>,
    pub sensors: Vec<String>,
}

impl ScriptHeader {
    pub fn parse(script: &[u8]) -> Self {
        let mut header = ScriptHeader::default();
        let text = String::from_utf8_lossy(script);
        for line in text.lines() {
            let Some(rest) = line.trim().strip_prefix("# fnfleet:") else {
                continue;
            };
            for pair in rest.split_whitespace() {
                let Some((key, value)) = pair.split_once('=') else {
                    continue;
                };
                let list = value
                    .split(',')
                    .filter(|v| !v.is_empty())
                    .map(str::to_owned);
                match key {
                    "actions" => header.actions.extend(list),
                    "sensor" | "sensors" => header.sensors.extend(list),
                    _ => {}
                }
            }
        }
        header
    }
}

/// A function the agent knows to be running on the device.
pub struct RunningFunction {
    pub handle: String,
    pub deployment_id: Option<Id>,
    pub header: ScriptHeader,
    serial: Mutex<()>,
}

/// The deployment id embedded in a remote script path
/// (`<base>/<function-id>-<deployment-id>[.ext]`).
fn deployment_of(command: &str) -> Option<Id> {
    command.split_whitespace().find_map(|token| {
        let name = token.rsplit('/').next()?;
        let stem = name.split('.').next()?;
        let at = stem.find("dep-")?;
        Some(Id::from(&stem[at..]))
    })
}

/// What became of one sensor reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observation {
    Buffered,
    /// No running function samples this metric.
    Unmonitored,
}

pub struct Agent {
    config: AgentConfig,
    link: Arc<dyn ControlPlaneLink>,
    clock: Arc<dyn Clock>,
    workspace: Arc<dyn Workspace>,
    handlers: Mutex<BTreeMap<String, ActionHandler>>,
    functions: Mutex<BTreeMap<String, Arc<RunningFunction>>>,
    buffer: Mutex<TelemetryBuffer>,
    device_id: Mutex<Option<Id>>,
    last_flush: Mutex<Option<Timestamp>>,
}

impl Agent {
    pub fn new(
        config: AgentConfig,
        link: Arc<dyn ControlPlaneLink>,
        clock: Arc<dyn Clock>,
        workspace: Arc<dyn Workspace>,
    ) -> Self {
        let mut functions = BTreeMap::new();
        if !config.actions.is_empty() {
            functions.insert(
                CONFIG_HANDLE.to_owned(),
                Arc::new(RunningFunction {
                    handle: CONFIG_HANDLE.to_owned(),
                    deployment_id: None,
                    header: ScriptHeader {
                        actions: config.actions.clone(),
                        sensors: Vec::new(),
                    },
                    serial: Mutex::new(()),
                }),
            );
        }
        let device_id = workspace
            .read(DEVICE_ID_FILE)
            .and_then(|b| String::from_utf8(b).ok())
            .map(|s| Id::new(s.trim()));
        Agent {
            buffer: Mutex::new(TelemetryBuffer::new(config.buffer_capacity)),
            config,
            link,
            clock,
            workspace,
            handlers: Mutex::new(builtin_handlers()),
            functions: Mutex::new(functions),
            device_id: Mutex::new(device_id),
            last_flush: Mutex::new(None),
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn workspace(&self) -> &Arc<dyn Workspace> {
        &self.workspace
    }

    pub fn device_id(&self) -> Option<Id> {
        self.device_id.lock().unwrap().clone()
    }

    /// Adds or replaces the implementation of an action.
    pub fn register_handler(&self, action: &str, handler: ActionHandler) {
        self.handlers
            .lock()
            .unwrap()
            .insert(action.to_owned(), handler);
    }

    pub fn running_functions(&self) -> Vec<Arc<RunningFunction>> {
        self.functions.lock().unwrap().values().cloned().collect()
    }

    /// Registers with the control plane, retrying with exponential backoff
    /// (1 s, 2 s, 4 s, ... capped at 60 s) up to `retry_budget` retries.
    pub fn boot_register(&self) -> Result<Registered, AgentError> {
        let config = serde_json::to_vec_pretty(&self.config).expect("config serializes");
        if let Err(err) = self.workspace.write(CONFIG_FILE, &config) {
            log::warn!("could not write {CONFIG_FILE}: {err}");
        }
        let mut delay = BACKOFF_BASE;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self
                .link
                .register(&self.config.address, &self.config.capabilities)
            {
                Ok(registered) => {
                    if let Err(err) = self
                        .workspace
                        .write(DEVICE_ID_FILE, registered.device_id.as_str().as_bytes())
                    {
                        log::warn!("could not persist device id: {err}");
                    }
                    *self.device_id.lock().unwrap() = Some(registered.device_id.clone());
                    return Ok(registered);
                }
                Err(err) if attempt > self.config.retry_budget => {
                    return Err(AgentError::RegistrationExhausted {
                        attempts: attempt,
                        last_error: err,
                    })
                }
                Err(err) => {
                    log::warn!(
                        "registration attempt {attempt} failed: {err}; retrying in {delay:?}"
                    );
                    self.clock.sleep(delay);
                    delay = (delay * 2).min(BACKOFF_CAP);
                }
            }
        }
    }

    /// Runs an action on the function that serves it. Calls for the same
    /// function run one at a time; a failing or panicking handler is reported
    /// and leaves the agent serving.
    pub fn handle_action(&self, request: &ActionRequest) -> Result<ActionReply, AgentError> {
        let function = self
            .functions
            .lock()
            .unwrap()
            .values()
            .find(|f| f.header.actions.contains(&request.action))
            .cloned()
            .ok_or_else(|| AgentError::UnknownAction(request.action.clone()))?;
        let handler = self
            .handlers
            .lock()
            .unwrap()
            .get(&request.action)
            .cloned()
            .ok_or_else(|| AgentError::HandlerFailure {
                action: request.action.clone(),
                reason: "no implementation on this device".into(),
            })?;
        let _serial = function.serial.lock().unwrap_or_else(|p| p.into_inner());
        let ctx = ActionContext {
            params: &request.params,
            workspace: self.workspace.as_ref(),
        };
        let failure = |reason: String| AgentError::HandlerFailure {
            action: request.action.clone(),
            reason,
        };
        match catch_unwind(AssertUnwindSafe(|| handler(&ctx))) {
            Ok(Ok(detail)) => Ok(ActionReply::ok(detail)),
            Ok(Err(reason)) => Err(failure(reason)),
            Err(panic) => {
                let reason = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "handler panicked".into());
                Err(failure(format!("panicked: {reason}")))
            }
        }
    }

    /// Buffers samples for upload. Overflow drops the oldest samples and is
    /// reported after the new samples are buffered.
    pub fn emit_telemetry(&self, metric: &str, samples: &[Sample]) -> Result<usize, AgentError> {
        let mut buffer = self.buffer.lock().unwrap();
        let dropped: usize = samples.iter().map(|s| buffer.push(metric, s.clone())).sum();
        if dropped > 0 {
            return Err(AgentError::BufferOverflow { dropped });
        }
        Ok(samples.len())
    }

    /// Feeds a sensor reading to the functions sampling `metric`.
    pub fn observe(&self, metric: &str, sample: Sample) -> Result<Observation, AgentError> {
        let monitored = self
            .functions
            .lock()
            .unwrap()
            .values()
            .any(|f| f.header.sensors.iter().any(|s| s == metric));
        if !monitored {
            return Ok(Observation::Unmonitored);
        }
        self.emit_telemetry(metric, &[sample])?;
        Ok(Observation::Buffered)
    }

    pub fn buffered(&self) -> usize {
        self.buffer.lock().unwrap().len()
    }

    pub fn dropped(&self) -> u64 {
        self.buffer.lock().unwrap().dropped()
    }

    /// Uploads everything buffered, one batch per metric. On failure the
    /// unsent samples stay buffered in order.
    pub fn flush(&self) -> Result<usize, AgentError> {
        let device_id = self.device_id().ok_or(AgentError::NotRegistered)?;
        let entries = self.buffer.lock().unwrap().drain();
        if entries.is_empty() {
            return Ok(0);
        }
        let mut sent = 0;
        let mut failure = None;
        let mut unsent = Vec::new();
        for (metric, samples) in batches(&entries) {
            if failure.is_some() {
                unsent.extend(samples.into_iter().map(|s| (metric.clone(), s)));
                continue;
            }
            let upload = TelemetryUpload {
                device_id: device_id.clone(),
                metric: metric.clone(),
                samples,
            };
            match self.link.push(&upload) {
                Ok(stored) => sent += stored,
                Err(err) => {
                    failure = Some(err);
                    unsent.extend(upload.samples.into_iter().map(|s| (metric.clone(), s)));
                }
            }
        }
        match failure {
            None => Ok(sent),
            Some(err) => {
                self.buffer.lock().unwrap().restore(unsent);
                Err(AgentError::Push(err))
            }
        }
    }

    /// Flushes when a telemetry interval has passed since the last flush.
    pub fn tick(&self) -> Option<Result<usize, AgentError>> {
        let now = self.clock.now();
        {
            let mut last = self.last_flush.lock().unwrap();
            let interval = chrono::Duration::milliseconds(self.config.telemetry_interval_ms as i64);
            if last.is_some_and(|at| now - at < interval) {
                return None;
            }
            *last = Some(now);
        }
        Some(self.flush())
    }

    /// Maps an HTTP request on the action endpoint.
    pub fn route(&self, request: &ApiRequest) -> ApiResponse {
        match (request.method.as_str(), request.path.as_str()) {
            ("POST", "/actions") => {
                let parsed: Result<ActionRequest, _> = serde_json::from_slice(&request.body);
                let (status, reply) = match parsed {
                    Err(e) => (400, ActionReply::error(format!("invalid body: {e}"))),
                    Ok(action) => match self.handle_action(&action) {
                        Ok(reply) => (200, reply),
                        Err(err @ AgentError::UnknownAction(_)) => {
                            (404, ActionReply::error(err.to_string()))
                        }
                        Err(err) => (500, ActionReply::error(err.to_string())),
                    },
                };
                ApiResponse {
                    status,
                    body: serde_json::to_value(reply).expect("replies serialize"),
                }
            }
            ("GET", "/health") => ApiResponse {
                status: 200,
                body: json!({
                    "status": "ok",
                    "device_id": self.device_id(),
                    "functions": self.functions.lock().unwrap().len(),
                    "buffered": self.buffered(),
                    "dropped": self.dropped(),
                }),
            },
            _ => ApiResponse {
                status: 404,
                body: json!({"status": "error", "detail": "no such endpoint"}),
            },
        }
    }
}

impl ProcessListener for Agent {
    fn on_launch(&self, handle: &str, command: &str, script: Option<&[u8]>) -> Result<(), String> {
        let header = script.map(ScriptHeader::parse).unwrap_or_default();
        log::debug!(
            "{}: function {handle} started: {command}",
            self.config.address
        );
        self.functions.lock().unwrap().insert(
            handle.to_owned(),
            Arc::new(RunningFunction {
                handle: handle.to_owned(),
                deployment_id: deployment_of(command),
                header,
                serial: Mutex::new(()),
            }),
        );
        Ok(())
    }

    fn on_exit(&self, handle: &str) {
        self.functions.lock().unwrap().remove(handle);
    }
}

/// Serves `POST /actions` and `GET /health` for `agent`.
pub fn serve_actions(agent: Arc<Agent>, listen: &str) -> std::io::Result<HttpServer> {
    HttpServer::start(listen, 2, Arc::new(move |request| agent.route(request)))
}
