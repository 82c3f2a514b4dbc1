//! The deployment leg of device discovery: render the launch command, copy the
//! script over a transport session, start it detached and track the process.

mod command;
mod memory;
mod ssh;
mod transport;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::clock::Clock;
use crate::model::{Deployment, DeploymentState, Device, FunctionDefinition, Id, Timestamp};

pub use command::{remote_path, render_command, LaunchPlan};
pub use memory::{
    MemoryConnector, MemorySession, ProcessListener, SimHost, SimNetwork, Traffic, FRAME_HEADER,
    PATH_PREFIX,
};
pub use ssh::{CredentialStore, SshConnector, SshSession};
pub use transport::{Connector, Launch, TransportError, TransportSession};

pub const DEFAULT_BASE_DIR: &str = "/opt/fnfleet";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeployError {
    #[error("cannot {op} a deployment in state {state}")]
    Precondition {
        op: &'static str,
        state: DeploymentState,
    },
    #[error("deployment pins {expected}, engine was given {given}")]
    FunctionMismatch { expected: String, given: String },
    #[error("unresolved placeholder {{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("unsafe value {value:?} for {param}")]
    UnsafeValue { param: String, value: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("launch exited immediately with status {code}: {detail}")]
    Launch { code: i32, detail: String },
}

impl DeployError {
    /// True when the device should be considered unreachable.
    pub fn session_open_failed(&self) -> bool {
        matches!(self, DeployError::Transport(e) if e.is_open_failure())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeploymentMetrics {
    pub deployment_id: Id,
    pub device_id: Id,
    pub payload_size: usize,
    pub command_len: usize,
    pub started_at: Timestamp,
    pub duration_ms: i64,
}

/// Progress notifications emitted while deploying.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeployPhase {
    Transferred { remote_path: String, bytes: usize },
    Running { command: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Liveness {
    Alive,
    Dead,
}

/// One mutex per device id.
#[derive(Default)]
pub struct DeviceLocks {
    locks: Mutex<HashMap<Id, Arc<Mutex<()>>>>,
}

impl DeviceLocks {
    pub fn get(&self, device: &Id) -> Arc<Mutex<()>> {
        Arc::clone(
            self.locks
                .lock()
                .unwrap()
                .entry(device.clone())
                .or_default(),
        )
    }
}

pub struct DeploymentEngine {
    connector: Arc<dyn Connector>,
    base_dir: String,
    clock: Arc<dyn Clock>,
    locks: DeviceLocks,
}

impl DeploymentEngine {
    pub fn new(connector: Arc<dyn Connector>, base_dir: &str, clock: Arc<dyn Clock>) -> Self {
        DeploymentEngine {
            connector,
            base_dir: base_dir.to_owned(),
            clock,
            locks: DeviceLocks::default(),
        }
    }

    pub fn base_dir(&self) -> &str {
        &self.base_dir
    }

    pub fn plan(
        &self,
        deployment: &Deployment,
        function: &FunctionDefinition,
    ) -> Result<LaunchPlan, DeployError> {
        LaunchPlan::new(function, deployment, &self.base_dir)
    }

    /// Transfers and starts a `Requested` deployment. A deployment left in
    /// `Transferred` by an interrupted run may be deployed again; the transfer
    /// overwrites the earlier copy.
    ///
    /// On failure the deployment is moved to `Failed` with a reason before the
    /// error is returned. `observer` sees every intermediate state.
    pub fn deploy(
        &self,
        deployment: &mut Deployment,
        function: &FunctionDefinition,
        device: &Device,
        observer: &mut dyn FnMut(&Deployment, &DeployPhase),
    ) -> Result<DeploymentMetrics, DeployError> {
        if !matches!(
            deployment.state,
            DeploymentState::Requested | DeploymentState::Transferred
        ) {
            return Err(DeployError::Precondition {
                op: "deploy",
                state: deployment.state,
            });
        }
        if function.id != deployment.function_id || function.version != deployment.function_version
        {
            return Err(DeployError::FunctionMismatch {
                expected: format!("{}@{}", deployment.function_id, deployment.function_version),
                given: format!("{}@{}", function.id, function.version),
            });
        }
        let lock = self.locks.get(&device.id);
        let _serial = lock.lock().unwrap();
        let started_at = self.clock.now();

        let result = self.run_deploy(deployment, function, device, observer);
        match result {
            Ok(plan) => Ok(DeploymentMetrics {
                deployment_id: deployment.id.clone(),
                device_id: device.id.clone(),
                payload_size: plan.payload_size,
                command_len: plan.command.len(),
                started_at,
                duration_ms: (self.clock.now() - started_at).num_milliseconds(),
            }),
            Err(err) => {
                deployment
                    .fail(err.to_string())
                    .expect("requested/transferred may always fail");
                Err(err)
            }
        }
    }

    fn run_deploy(
        &self,
        deployment: &mut Deployment,
        function: &FunctionDefinition,
        device: &Device,
        observer: &mut dyn FnMut(&Deployment, &DeployPhase),
    ) -> Result<LaunchPlan, DeployError> {
        let plan = self.plan(deployment, function)?;
        let mut session = self
            .connector
            .connect(&device.address, &device.transport_credentials)?;
        let outcome = (|| {
            session.write_file(&plan.remote_path, &plan.payload)?;
            if deployment.state == DeploymentState::Requested {
                deployment
                    .transition(DeploymentState::Transferred)
                    .expect("requested -> transferred");
            }
            observer(
                deployment,
                &DeployPhase::Transferred {
                    remote_path: plan.remote_path.clone(),
                    bytes: plan.payload_size,
                },
            );
            match session.launch(&plan.command)? {
                Launch::Started { handle } => {
                    deployment
                        .transition(DeploymentState::Running)
                        .expect("transferred -> running");
                    deployment.handle = Some(handle);
                    deployment.failure_reason = None;
                    observer(
                        deployment,
                        &DeployPhase::Running {
                            command: plan.command.clone(),
                        },
                    );
                    Ok(())
                }
                Launch::Exited { code, detail } => Err(DeployError::Launch { code, detail }),
            }
        })();
        session.close();
        outcome.map(|()| plan)
    }

    /// Terminates a running deployment.
    pub fn stop(&self, deployment: &mut Deployment, device: &Device) -> Result<(), DeployError> {
        if deployment.state != DeploymentState::Running {
            return Err(DeployError::Precondition {
                op: "stop",
                state: deployment.state,
            });
        }
        let lock = self.locks.get(&device.id);
        let _serial = lock.lock().unwrap();
        let handle = deployment.handle.clone().unwrap_or_default();
        let result = self
            .connector
            .connect(&device.address, &device.transport_credentials)
            .and_then(|mut session| {
                let r = session.terminate(&handle);
                session.close();
                r
            });
        match result {
            Ok(()) => {
                deployment
                    .transition(DeploymentState::Stopped)
                    .expect("running -> stopped");
                Ok(())
            }
            Err(err) => {
                deployment
                    .fail("stop-unreachable")
                    .expect("running -> failed");
                Err(err.into())
            }
        }
    }

    /// Checks whether the process of a running deployment is still alive. A
    /// dead process moves the deployment to `Failed("exited")`.
    pub fn probe(
        &self,
        deployment: &mut Deployment,
        device: &Device,
    ) -> Result<Liveness, DeployError> {
        if deployment.state != DeploymentState::Running {
            return Err(DeployError::Precondition {
                op: "probe",
                state: deployment.state,
            });
        }
        let lock = self.locks.get(&device.id);
        let _serial = lock.lock().unwrap();
        let handle = deployment.handle.clone().unwrap_or_default();
        let mut session = self
            .connector
            .connect(&device.address, &device.transport_credentials)?;
        let alive = session.is_alive(&handle);
        session.close();
        if alive? {
            Ok(Liveness::Alive)
        } else {
            deployment.fail("exited").expect("running -> failed");
            Ok(Liveness::Dead)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::model::{Bindings, Capability, DeviceStatus, ParamKind, ParamSpec, ParamValue};

    struct Fixture {
        network: Arc<SimNetwork>,
        engine: DeploymentEngine,
        device: Device,
        function: FunctionDefinition,
    }

    fn fixture(source_len: usize) -> Fixture {
        let network = Arc::new(SimNetwork::new());
        network.add_host(SimHost::new("10.0.0.1:9100", &["python"]));
        let engine = DeploymentEngine::new(
            Arc::new(MemoryConnector::new(Arc::clone(&network))),
            DEFAULT_BASE_DIR,
            Arc::new(VirtualClock::new()),
        );
        let device = Device {
            id: Id::from("dev-00000001"),
            address: "10.0.0.1:9100".into(),
            capabilities: vec![Capability::tag("pir-motion")],
            status: DeviceStatus::Pending,
            registered_at: VirtualClock::epoch(),
            transport_credentials: "10.0.0.1:9100".into(),
            manually_activated: false,
        };
        let function = FunctionDefinition {
            id: Id::from("fn-00000001"),
            name: "motion-monitor".into(),
            source: "#".repeat(source_len),
            interpreter_template: "python {file} {port}".into(),
            params: vec![ParamSpec::required("port", ParamKind::Integer)],
            version: 1,
            extension: Some("py".into()),
        };
        Fixture {
            network,
            engine,
            device,
            function,
        }
    }

    fn requested(f: &Fixture, n: u64) -> Deployment {
        let bindings: Bindings = [("port".to_string(), ParamValue::Integer(4))].into();
        Deployment {
            id: Id::allocated("dep", n),
            device_id: f.device.id.clone(),
            function_id: f.function.id.clone(),
            function_version: 1,
            rule_id: None,
            bindings,
            state: DeploymentState::Requested,
            handle: None,
            failure_reason: None,
            created_at: VirtualClock::epoch(),
        }
    }

    #[test]
    fn deploy_reaches_running_with_metrics() {
        let f = fixture(1024);
        let mut dep = requested(&f, 1);
        let mut phases = Vec::new();
        let metrics = f
            .engine
            .deploy(&mut dep, &f.function, &f.device, &mut |d, p| {
                phases.push((d.state, p.clone()))
            })
            .unwrap();
        assert_eq!(dep.state, DeploymentState::Running);
        assert!(dep.handle.is_some());
        assert_eq!(metrics.payload_size, 1024);
        assert_eq!(phases.len(), 2);
        assert_eq!(phases[0].0, DeploymentState::Transferred);
        assert_eq!(phases[1].0, DeploymentState::Running);
        let host = f.network.host("10.0.0.1:9100").unwrap();
        assert_eq!(
            host.read("/opt/fnfleet/fn-00000001-dep-00000001.py")
                .unwrap(),
            f.function.source.as_bytes()
        );
    }

    #[test]
    fn closed_endpoint_fails_and_flags_unreachable() {
        let f = fixture(10);
        f.network.host("10.0.0.1:9100").unwrap().set_online(false);
        let mut dep = requested(&f, 1);
        let err = f
            .engine
            .deploy(&mut dep, &f.function, &f.device, &mut |_, _| {})
            .unwrap_err();
        assert!(err.session_open_failed());
        assert_eq!(dep.state, DeploymentState::Failed);
        assert!(dep.failure_reason.is_some());
    }

    #[test]
    fn deploy_on_running_has_no_side_effects() {
        let f = fixture(10);
        let mut dep = requested(&f, 1);
        f.engine
            .deploy(&mut dep, &f.function, &f.device, &mut |_, _| {})
            .unwrap();
        let before = dep.clone();
        let traffic = f.network.traffic();
        assert!(matches!(
            f.engine
                .deploy(&mut dep, &f.function, &f.device, &mut |_, _| {}),
            Err(DeployError::Precondition { .. })
        ));
        assert_eq!(dep, before);
        assert_eq!(f.network.traffic(), traffic);
    }

    #[test]
    fn launch_failure_is_not_unreachability() {
        let mut f = fixture(10);
        f.function.interpreter_template = "ruby {file} {port}".into();
        let mut dep = requested(&f, 1);
        let err = f
            .engine
            .deploy(&mut dep, &f.function, &f.device, &mut |_, _| {})
            .unwrap_err();
        assert!(matches!(err, DeployError::Launch { code: 127, .. }));
        assert!(!err.session_open_failed());
        assert_eq!(dep.state, DeploymentState::Failed);
    }

    #[test]
    fn unsafe_binding_fails_before_connecting() {
        let mut f = fixture(10);
        f.function.interpreter_template = "python {file} {name}".into();
        f.function.params = vec![ParamSpec::required("name", ParamKind::String)];
        let mut dep = requested(&f, 1);
        dep.bindings = [("name".to_string(), ParamValue::String("a; rm -rf".into()))].into();
        let err = f
            .engine
            .deploy(&mut dep, &f.function, &f.device, &mut |_, _| {})
            .unwrap_err();
        assert!(matches!(err, DeployError::UnsafeValue { .. }));
        assert_eq!(f.network.traffic().frames, 0);
    }

    #[test]
    fn redeploy_after_interrupted_transfer() {
        let f = fixture(64);
        let mut dep = requested(&f, 1);
        dep.transition(DeploymentState::Transferred).unwrap();
        let host = f.network.host("10.0.0.1:9100").unwrap();
        host.write("/opt/fnfleet/fn-00000001-dep-00000001.py", b"stale partial");
        f.engine
            .deploy(&mut dep, &f.function, &f.device, &mut |_, _| {})
            .unwrap();
        assert_eq!(dep.state, DeploymentState::Running);
        assert_eq!(
            host.read("/opt/fnfleet/fn-00000001-dep-00000001.py")
                .unwrap(),
            f.function.source.as_bytes()
        );
    }

    #[test]
    fn stop_and_probe() {
        let f = fixture(10);
        let mut dep = requested(&f, 1);
        f.engine
            .deploy(&mut dep, &f.function, &f.device, &mut |_, _| {})
            .unwrap();
        assert_eq!(
            f.engine.probe(&mut dep, &f.device).unwrap(),
            Liveness::Alive
        );
        f.engine.stop(&mut dep, &f.device).unwrap();
        assert_eq!(dep.state, DeploymentState::Stopped);
        assert!(dep.handle.is_none());
        assert!(matches!(
            f.engine.stop(&mut dep, &f.device),
            Err(DeployError::Precondition { .. })
        ));
        assert!(matches!(
            f.engine.probe(&mut dep, &f.device),
            Err(DeployError::Precondition { .. })
        ));
    }

    #[test]
    fn probe_detects_crash() {
        let f = fixture(10);
        let mut dep = requested(&f, 1);
        f.engine
            .deploy(&mut dep, &f.function, &f.device, &mut |_, _| {})
            .unwrap();
        let host = f.network.host("10.0.0.1:9100").unwrap();
        assert!(host.crash(dep.handle.as_deref().unwrap()));
        assert_eq!(f.engine.probe(&mut dep, &f.device).unwrap(), Liveness::Dead);
        assert_eq!(dep.state, DeploymentState::Failed);
        assert_eq!(dep.failure_reason.as_deref(), Some("exited"));
    }

    #[test]
    fn stop_with_dead_transport() {
        let f = fixture(10);
        let mut dep = requested(&f, 1);
        f.engine
            .deploy(&mut dep, &f.function, &f.device, &mut |_, _| {})
            .unwrap();
        f.network.host("10.0.0.1:9100").unwrap().set_online(false);
        assert!(f.engine.stop(&mut dep, &f.device).is_err());
        assert_eq!(dep.state, DeploymentState::Failed);
        assert_eq!(dep.failure_reason.as_deref(), Some("stop-unreachable"));
    }
}
