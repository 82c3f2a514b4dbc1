//! Built-in action handlers standing in for device drivers.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde_json::Value;

use super::workspace::Workspace;

/// Bytes written per time-unit of a simulated recording.
pub const RECORD_BYTES_PER_UNIT: usize = 1024;
pub const RECORDINGS_DIR: &str = "recordings";
pub const RELAY_STATE: &str = "relay.state";

pub struct ActionContext<'a> {
    pub params: &'a BTreeMap<String, Value>,
    pub workspace: &'a dyn Workspace,
}

/// Returns a detail string on success and a reason on failure.
pub type ActionHandler = Arc<dyn Fn(&ActionContext<'_>) -> Result<String, String> + Send + Sync>;

/// `record`, `on` and `off`.
pub fn builtin_handlers() -> BTreeMap<String, ActionHandler> {
    let recording = Arc::new(Mutex::new(()));
    let mut handlers: BTreeMap<String, ActionHandler> = BTreeMap::new();
    handlers.insert(
        "record".into(),
        Arc::new(move |ctx: &ActionContext<'_>| {
            let _one_at_a_time = recording.lock().unwrap();
            record(ctx)
        }),
    );
    handlers.insert(
        "on".into(),
        Arc::new(|ctx: &ActionContext<'_>| relay(ctx, true)),
    );
    handlers.insert(
        "off".into(),
        Arc::new(|ctx: &ActionContext<'_>| relay(ctx, false)),
    );
    handlers
}

/// Writes `recordings/rec-NNNN.bin` whose length is proportional to
/// `params.duration`.
fn record(ctx: &ActionContext<'_>) -> Result<String, String> {
    let duration = ctx
        .params
        .get("duration")
        .and_then(Value::as_f64)
        .ok_or("record needs a numeric duration")?;
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(format!("invalid duration {duration}"));
    }
    let index = ctx.workspace.list(RECORDINGS_DIR).len() + 1;
    let path = format!("{RECORDINGS_DIR}/rec-{index:04}.bin");
    let bytes = (duration * RECORD_BYTES_PER_UNIT as f64).round() as usize;
    ctx.workspace.write(&path, &vec![0u8; bytes])?;
    Ok(format!("{path} ({duration} units)"))
}

fn relay(ctx: &ActionContext<'_>, on: bool) -> Result<String, String> {
    let state = if on { "on" } else { "off" };
    ctx.workspace.write(RELAY_STATE, state.as_bytes())?;
    Ok(format!("relay {state}"))
}

/// Duration of a recording artifact, from its length.
pub fn recording_duration(bytes: usize) -> f64 {
    bytes as f64 / RECORD_BYTES_PER_UNIT as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::workspace::DirWorkspace;

    #[test]
    fn record_and_relay() {
        let dir = tempfile::tempdir().unwrap();
        let ws = DirWorkspace::new(dir.path());
        let handlers = builtin_handlers();
        let params: BTreeMap<String, Value> =
            serde_json::from_value(serde_json::json!({"duration": 5})).unwrap();
        let ctx = ActionContext {
            params: &params,
            workspace: &ws,
        };
        handlers["record"](&ctx).unwrap();
        handlers["record"](&ctx).unwrap();
        let files = ws.list(RECORDINGS_DIR);
        assert_eq!(
            files,
            vec!["recordings/rec-0001.bin", "recordings/rec-0002.bin"]
        );
        let len = ws.read(&files[0]).unwrap().len();
        assert_eq!(recording_duration(len), 5.0);

        let empty = BTreeMap::new();
        let bare = ActionContext {
            params: &empty,
            workspace: &ws,
        };
        assert!(handlers["record"](&bare).is_err());
        handlers["on"](&bare).unwrap();
        assert_eq!(ws.read(RELAY_STATE).unwrap(), b"on");
        handlers["off"](&bare).unwrap();
        assert_eq!(ws.read(RELAY_STATE).unwrap(), b"off");
    }
}
