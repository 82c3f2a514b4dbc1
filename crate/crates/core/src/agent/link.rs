//! The agent's channel to the control plane.

use serde::Deserialize;

use crate::api::{ApiClient, ClientError};
use crate::model::{Capability, DeviceStatus, Id};
use crate::telemetry::TelemetryUpload;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Registered {
    pub device_id: Id,
    pub status: DeviceStatus,
}

pub trait ControlPlaneLink: Send + Sync {
    fn register(&self, address: &str, capabilities: &[Capability]) -> Result<Registered, String>;

    /// Uploads one batch; returns the number of samples stored.
    fn push(&self, upload: &TelemetryUpload) -> Result<usize, String>;
}

/// `POST /devices` and `POST /telemetry` over HTTP.
pub struct HttpLink {
    client: ApiClient,
}

impl HttpLink {
    pub fn new(control_plane: &str) -> Self {
        HttpLink {
            client: ApiClient::new(control_plane, None),
        }
    }
}

fn describe(err: ClientError) -> String {
    err.to_string()
}

impl ControlPlaneLink for HttpLink {
    fn register(&self, address: &str, capabilities: &[Capability]) -> Result<Registered, String> {
        let body = serde_json::json!({"address": address, "capabilities": capabilities});
        let reply = self.client.post("/devices", &body).map_err(describe)?;
        serde_json::from_value(reply).map_err(|e| format!("unexpected reply: {e}"))
    }

    fn push(&self, upload: &TelemetryUpload) -> Result<usize, String> {
        let reply = self.client.post("/telemetry", upload).map_err(describe)?;
        reply["stored"]
            .as_u64()
            .map(|n| n as usize)
            .ok_or_else(|| format!("unexpected reply: {reply}"))
    }
}
