//! The control plane: registry, deployment engine and telemetry service
//! wired together, plus the discovery flow log.
//!
//! A registration that creates deployments drives them to completion before
//! returning, so the caller sees the device in its post-launch status.

use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::clock::Clock;
use crate::deploy::{
    Connector, DeployError, DeployPhase, DeploymentEngine, DeploymentMetrics, Liveness,
};
use crate::model::{Bindings, Capability, Deployment, DeploymentState, Device, Id};
use crate::registry::{DiscoveryBranch, Registration, Registry, RegistryError, SharedStore};
use crate::store::Store;
use crate::telemetry::{ActionClient, Notifier, TelemetryError, TelemetryService};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
}

/// One step of the discovery and deployment sequence for a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowStep {
    Register,
    AutoMatch,
    Pending,
    Transfer,
    Execute,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlowEntry {
    pub device_id: Id,
    pub step: FlowStep,
    pub detail: String,
}

/// The outcome of driving one deployment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeployReport {
    pub deployment: Deployment,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<DeploymentMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Onboarding {
    pub registration: Registration,
    /// The device after every deployment was attempted.
    pub device: Device,
    pub deploys: Vec<DeployReport>,
}

pub struct ControlPlane {
    store: SharedStore,
    clock: Arc<dyn Clock>,
    registry: Arc<Registry>,
    engine: DeploymentEngine,
    telemetry: TelemetryService,
    flow: Mutex<Vec<FlowEntry>>,
    metrics: Mutex<Vec<DeploymentMetrics>>,
}

impl ControlPlane {
    pub fn open(
        store: Store,
        clock: Arc<dyn Clock>,
        connector: Arc<dyn Connector>,
        base_dir: &str,
        actions: Arc<dyn ActionClient>,
        notifier: Arc<dyn Notifier>,
    ) -> Self {
        let store: SharedStore = Arc::new(Mutex::new(store));
        let registry = Arc::new(Registry::new(store.clone(), clock.clone()));
        let engine = DeploymentEngine::new(connector, base_dir, clock.clone());
        let telemetry = TelemetryService::open(
            store.clone(),
            registry.clone(),
            clock.clone(),
            actions,
            notifier,
        );
        ControlPlane {
            store,
            clock,
            registry,
            engine,
            telemetry,
            flow: Mutex::new(Vec::new()),
            metrics: Mutex::new(Vec::new()),
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn telemetry(&self) -> &TelemetryService {
        &self.telemetry
    }

    pub fn engine(&self) -> &DeploymentEngine {
        &self.engine
    }

    pub fn store(&self) -> &SharedStore {
        &self.store
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn flow_log(&self) -> Vec<FlowEntry> {
        self.flow.lock().unwrap().clone()
    }

    pub fn flow_for(&self, device: &Id) -> Vec<FlowStep> {
        self.flow
            .lock()
            .unwrap()
            .iter()
            .filter(|e| &e.device_id == device)
            .map(|e| e.step)
            .collect()
    }

    pub fn deployment_metrics(&self) -> Vec<DeploymentMetrics> {
        self.metrics.lock().unwrap().clone()
    }

    fn log(&self, device_id: &Id, step: FlowStep, detail: impl Into<String>) {
        self.flow.lock().unwrap().push(FlowEntry {
            device_id: device_id.clone(),
            step,
            detail: detail.into(),
        });
    }

    /// Registers a device and deploys whatever the auto-deploy rules created,
    /// along with any deployment an earlier run left unfinished.
    pub fn register_device(
        &self,
        address: &str,
        capabilities: Vec<Capability>,
    ) -> Result<Onboarding, ControlError> {
        let registration = self.registry.register_device(address, capabilities)?;
        let device_id = registration.device.id.clone();
        self.log(&device_id, FlowStep::Register, address);
        match registration.branch {
            DiscoveryBranch::Deploy => {
                let rules: Vec<&str> = registration.matched_rules.iter().map(Id::as_str).collect();
                self.log(&device_id, FlowStep::AutoMatch, rules.join(","));
            }
            DiscoveryBranch::Pending => self.log(&device_id, FlowStep::Pending, ""),
        }
        let mut deploys = Vec::new();
        for deployment in &registration.deployments {
            if matches!(
                deployment.state,
                DeploymentState::Requested | DeploymentState::Transferred
            ) {
                deploys.push(self.deploy(&deployment.id)?);
            }
        }
        let device = self.registry.get_device(&device_id)?;
        Ok(Onboarding {
            registration,
            device,
            deploys,
        })
    }

    /// Creates a manual deployment on a device and deploys it.
    pub fn assign_deployment(
        &self,
        device_id: &Id,
        function_id: &Id,
        bindings: &Bindings,
    ) -> Result<DeployReport, ControlError> {
        let deployment = self
            .registry
            .assign_deployment(device_id, function_id, bindings)?;
        self.deploy(&deployment.id)
    }

    /// Drives a `Requested` (or interrupted `Transferred`) deployment. A
    /// transport or launch failure is reported in the result, with the
    /// deployment persisted as `Failed`; precondition violations are errors.
    pub fn deploy(&self, deployment_id: &Id) -> Result<DeployReport, ControlError> {
        let mut deployment = self.registry.get_deployment(deployment_id)?;
        let device = self.registry.get_device(&deployment.device_id)?;
        let function = self
            .registry
            .function_version(&deployment.function_id, deployment.function_version)?;
        let mut persist_error = None;
        let mut observer = |dep: &Deployment, phase: &DeployPhase| {
            let (step, detail) = match phase {
                DeployPhase::Transferred { remote_path, bytes } => {
                    (FlowStep::Transfer, format!("{remote_path} ({bytes} bytes)"))
                }
                DeployPhase::Running { command } => (FlowStep::Execute, command.clone()),
            };
            self.log(&dep.device_id, step, detail);
            if let Err(err) = self.registry.record_deployment(dep) {
                persist_error.get_or_insert(err);
            }
        };
        let result = self
            .engine
            .deploy(&mut deployment, &function, &device, &mut observer);
        if let Some(err) = persist_error {
            return Err(err.into());
        }
        match result {
            Ok(metrics) => {
                self.metrics.lock().unwrap().push(metrics.clone());
                Ok(DeployReport {
                    deployment,
                    metrics: Some(metrics),
                    error: None,
                })
            }
            Err(err @ DeployError::Precondition { .. }) => Err(err.into()),
            Err(err @ DeployError::FunctionMismatch { .. }) => Err(err.into()),
            Err(err) => {
                self.log(&device.id, FlowStep::Failed, err.to_string());
                self.registry.record_deployment(&deployment)?;
                if err.session_open_failed() {
                    self.registry.mark_unreachable(&device.id)?;
                }
                Ok(DeployReport {
                    deployment,
                    metrics: None,
                    error: Some(err.to_string()),
                })
            }
        }
    }

    /// Stops a running deployment. When the device cannot be reached the
    /// deployment is persisted as `Failed("stop-unreachable")` and the
    /// transport error is returned.
    pub fn stop_deployment(&self, deployment_id: &Id) -> Result<Deployment, ControlError> {
        let mut deployment = self.registry.get_deployment(deployment_id)?;
        let device = self.registry.get_device(&deployment.device_id)?;
        let result = self.engine.stop(&mut deployment, &device);
        if !matches!(result, Err(DeployError::Precondition { .. })) {
            self.registry.record_deployment(&deployment)?;
        }
        result?;
        Ok(deployment)
    }

    pub fn probe_deployment(
        &self,
        deployment_id: &Id,
    ) -> Result<(Liveness, Deployment), ControlError> {
        let mut deployment = self.registry.get_deployment(deployment_id)?;
        let device = self.registry.get_device(&deployment.device_id)?;
        let liveness = self.engine.probe(&mut deployment, &device)?;
        if liveness == Liveness::Dead {
            self.registry.record_deployment(&deployment)?;
        }
        Ok((liveness, deployment))
    }
}
