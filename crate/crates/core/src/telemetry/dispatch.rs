//! Delivery of rule actions: device invocations go to the target agent's
//! action endpoint, notifications to a webhook.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::Timestamp;
use crate::template;

use super::types::Event;

/// Body of `POST /actions` on a device agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRequest {
    pub action: String,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

/// Response of `POST /actions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionReply {
    pub status: String,
    #[serde(default)]
    pub detail: String,
}

impl ActionReply {
    pub fn ok(detail: impl Into<String>) -> Self {
        ActionReply {
            status: "ok".into(),
            detail: detail.into(),
        }
    }

    pub fn error(detail: impl Into<String>) -> Self {
        ActionReply {
            status: "error".into(),
            detail: detail.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Webhook body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub text: String,
    pub fired_at: Timestamp,
    pub rule_id: String,
}

pub trait ActionClient: Send + Sync {
    /// Sends `request` to the agent at `address`. Transport failures are
    /// returned as `Err` with a description.
    fn invoke(&self, address: &str, request: &ActionRequest) -> Result<ActionReply, String>;
}

pub trait Notifier: Send + Sync {
    fn notify(&self, notification: &Notification) -> Result<(), String>;
}

/// Renders a notification template for `event`.
pub fn render_message(message_template: &str, event: &Event) -> String {
    template::render(message_template, |name| match name {
        "device" => Some(event.device_id.to_string()),
        "metric" => Some(event.metric.clone()),
        "value" => Some(event.value.to_string()),
        "timestamp" => Some(event.timestamp.to_rfc3339()),
        _ => None,
    })
    .unwrap_or_else(|_| message_template.to_owned())
}

fn http_agent() -> ureq::Agent {
    ureq::AgentBuilder::new()
        .timeout_connect(Duration::from_secs(3))
        .timeout(Duration::from_secs(10))
        .build()
}

fn describe(err: ureq::Error) -> String {
    match err {
        ureq::Error::Status(code, response) => {
            let body = response.into_string().unwrap_or_default();
            format!("http status {code}: {body}")
        }
        ureq::Error::Transport(t) => format!("connection error: {t}"),
    }
}

/// Posts actions to `http://<address>/actions`.
pub struct HttpActionClient {
    agent: ureq::Agent,
}

impl HttpActionClient {
    pub fn new() -> Self {
        HttpActionClient {
            agent: http_agent(),
        }
    }
}

impl Default for HttpActionClient {
    fn default() -> Self {
        Self::new()
    }
}

impl ActionClient for HttpActionClient {
    fn invoke(&self, address: &str, request: &ActionRequest) -> Result<ActionReply, String> {
        let url = format!("http://{address}/actions");
        match self.agent.post(&url).send_json(request) {
            Ok(response) => response.into_json().map_err(|e| e.to_string()),
            // Handler-level failures come back as error statuses with a reply body.
            Err(ureq::Error::Status(_, response)) => response
                .into_json::<ActionReply>()
                .map_err(|e| format!("unreadable error reply: {e}")),
            Err(err) => Err(describe(err)),
        }
    }
}

pub struct WebhookNotifier {
    url: String,
    agent: ureq::Agent,
}

impl WebhookNotifier {
    pub fn new(url: &str) -> Self {
        WebhookNotifier {
            url: url.to_owned(),
            agent: http_agent(),
        }
    }
}

impl Notifier for WebhookNotifier {
    fn notify(&self, notification: &Notification) -> Result<(), String> {
        self.agent
            .post(&self.url)
            .send_json(notification)
            .map(|_| ())
            .map_err(describe)
    }
}

/// Used when no webhook is configured.
#[derive(Debug, Default)]
pub struct LogNotifier;

impl Notifier for LogNotifier {
    fn notify(&self, notification: &Notification) -> Result<(), String> {
        log::info!(
            "notification [{}]: {}",
            notification.rule_id,
            notification.text
        );
        Ok(())
    }
}

/// Keeps every delivered notification in memory.
#[derive(Debug)]
pub struct RecordingNotifier {
    delivered: Mutex<Vec<Notification>>,
    online: AtomicBool,
}

impl Default for RecordingNotifier {
    fn default() -> Self {
        RecordingNotifier {
            delivered: Mutex::new(Vec::new()),
            online: AtomicBool::new(true),
        }
    }
}

impl RecordingNotifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_online(&self, online: bool) {
        self.online.store(online, Ordering::SeqCst);
    }

    pub fn delivered(&self) -> Vec<Notification> {
        self.delivered.lock().unwrap().clone()
    }
}

impl Notifier for RecordingNotifier {
    fn notify(&self, notification: &Notification) -> Result<(), String> {
        if !self.online.load(Ordering::SeqCst) {
            return Err("connection error: webhook unreachable".into());
        }
        self.delivered.lock().unwrap().push(notification.clone());
        Ok(())
    }
}
