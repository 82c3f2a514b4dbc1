//! A blocking JSON client for the control-plane API.

use std::time::Duration;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection error: {0}")]
    Connection(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: Value },
    #[error("unreadable response: {0}")]
    Decode(String),
}

pub struct ApiClient {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl ApiClient {
    pub fn new(base: &str, token: Option<&str>) -> Self {
        ApiClient {
            base: base.trim_end_matches('/').to_owned(),
            token: token.map(str::to_owned),
            agent: ureq::AgentBuilder::new()
                .timeout_connect(Duration::from_secs(3))
                .timeout(Duration::from_secs(30))
                .build(),
        }
    }

    pub fn get(&self, path: &str) -> Result<Value, ClientError> {
        self.send(self.request("GET", path), None::<&Value>)
    }

    pub fn post(&self, path: &str, body: &impl Serialize) -> Result<Value, ClientError> {
        self.send(self.request("POST", path), Some(body))
    }

    pub fn delete(&self, path: &str) -> Result<Value, ClientError> {
        self.send(self.request("DELETE", path), None::<&Value>)
    }

    fn request(&self, method: &str, path: &str) -> ureq::Request {
        let request = self.agent.request(method, &format!("{}{path}", self.base));
        match &self.token {
            Some(token) => request.set("Authorization", &format!("Bearer {token}")),
            None => request,
        }
    }

    fn send(
        &self,
        request: ureq::Request,
        body: Option<&impl Serialize>,
    ) -> Result<Value, ClientError> {
        let result = match body {
            Some(body) => request.send_json(body),
            None => request.call(),
        };
        match result {
            Ok(response) => response
                .into_json()
                .map_err(|e| ClientError::Decode(e.to_string())),
            Err(ureq::Error::Status(status, response)) => Err(ClientError::Status {
                status,
                body: response.into_json().unwrap_or(Value::Null),
            }),
            Err(ureq::Error::Transport(t)) => Err(ClientError::Connection(t.to_string())),
        }
    }
}
