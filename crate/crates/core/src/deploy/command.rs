//! Launch-command rendering.
//!
//! Binding values are substituted as bare tokens. Values that a shell would
//! split or interpret are rejected instead of quoted, since the remote shell
//! is unknown.

use crate::model::{Bindings, Deployment, FunctionDefinition, ParamValue};
use crate::template::{self, FILE_TOKEN};

use super::DeployError;

/// What the engine sends to a device for one deployment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchPlan {
    pub remote_path: String,
    pub command: String,
    pub payload: Vec<u8>,
    pub payload_size: usize,
}

impl LaunchPlan {
    pub fn new(
        function: &FunctionDefinition,
        deployment: &Deployment,
        base_dir: &str,
    ) -> Result<Self, DeployError> {
        let remote_path = remote_path(base_dir, function, deployment);
        let command = render_command(function, &deployment.bindings, &remote_path)?;
        let payload = function.source.as_bytes().to_vec();
        Ok(LaunchPlan {
            remote_path,
            command,
            payload_size: payload.len(),
            payload,
        })
    }
}

/// `<base_dir>/<function-id>-<deployment-id>[.<ext>]`.
pub fn remote_path(
    base_dir: &str,
    function: &FunctionDefinition,
    deployment: &Deployment,
) -> String {
    let base = base_dir.trim_end_matches('/');
    let mut path = format!("{base}/{}-{}", function.id, deployment.id);
    if let Some(ext) = &function.extension {
        path.push('.');
        path.push_str(ext);
    }
    path
}

fn is_safe_token(value: &str) -> bool {
    !value.is_empty()
        && value
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_.,:/@%+=".contains(c))
}

fn render_value(name: &str, value: &ParamValue) -> Result<String, DeployError> {
    match value {
        ParamValue::String(text) if !is_safe_token(text) => Err(DeployError::UnsafeValue {
            param: name.to_owned(),
            value: text.clone(),
        }),
        other => Ok(other.to_string()),
    }
}

/// Substitutes `{file}` with `remote_path` and every `{param}` with its
/// binding. `bindings` must already carry defaults.
pub fn render_command(
    function: &FunctionDefinition,
    bindings: &Bindings,
    remote_path: &str,
) -> Result<String, DeployError> {
    if remote_path.is_empty() {
        return Err(DeployError::UnsafeValue {
            param: FILE_TOKEN.into(),
            value: String::new(),
        });
    }
    if !is_safe_token(remote_path) {
        return Err(DeployError::UnsafeValue {
            param: FILE_TOKEN.into(),
            value: remote_path.to_owned(),
        });
    }
    let mut failure = None;
    let rendered = template::render(&function.interpreter_template, |name| {
        if name == FILE_TOKEN {
            return Some(remote_path.to_owned());
        }
        let value = bindings.get(name)?;
        match render_value(name, value) {
            Ok(text) => Some(text),
            Err(err) => {
                failure.get_or_insert(err);
                Some(String::new())
            }
        }
    });
    if let Some(err) = failure {
        return Err(err);
    }
    rendered.map_err(DeployError::UnresolvedPlaceholder)
}
