//! Authoritative records for functions, devices, deployments and auto-deploy
//! rules, and the discovery decision taken when a device registers.
//!
//! Every operation runs under the store lock, so callers on different threads
//! observe a single total order of registry mutations.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::model::{
    prefix, validate_address, AutoDeployRule, BindingSource, Bindings, Capability, Deployment,
    DeploymentState, Device, DeviceStatus, FunctionDefinition, FunctionSpec, Id, IllegalTransition,
    ParamValue,
};
use crate::store::{EntityKind, Mutation, Store, StoreError};

pub type SharedStore = Arc<Mutex<Store>>;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{kind} {id} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("in use: {0}")]
    InUse(String),
    #[error("invalid bindings: {0}")]
    Binding(String),
    #[error(transparent)]
    IllegalTransition(#[from] IllegalTransition),
    #[error(transparent)]
    Storage(#[from] StoreError),
}

impl RegistryError {
    fn not_found(kind: &'static str, id: &Id) -> Self {
        RegistryError::NotFound {
            kind,
            id: id.to_string(),
        }
    }
}

pub type Result<T, E = RegistryError> = std::result::Result<T, E>;

/// Partial update of a function; absent fields keep their current value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FunctionPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpreter_template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<crate::model::ParamSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extension: Option<String>,
}

/// Which branch of the discovery flow a registration took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscoveryBranch {
    /// At least one deployment is attached to the device.
    Deploy,
    /// Nothing to deploy; the device waits for an administrator.
    Pending,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub device: Device,
    pub branch: DiscoveryBranch,
    /// Every live deployment of the device after registration.
    pub deployments: Vec<Deployment>,
    /// The subset of `deployments` created by this call.
    pub created: Vec<Id>,
    /// Auto-deploy rules whose predicate matched.
    pub matched_rules: Vec<Id>,
    pub reregistered: bool,
}

pub struct Registry {
    store: SharedStore,
    clock: Arc<dyn Clock>,
}

impl Registry {
    pub fn new(store: SharedStore, clock: Arc<dyn Clock>) -> Self {
        Registry { store, clock }
    }

    fn lock(&self) -> MutexGuard<'_, Store> {
        self.store.lock().unwrap()
    }

    pub fn create_function(&self, spec: FunctionSpec) -> Result<FunctionDefinition> {
        spec.validate().map_err(RegistryError::Validation)?;
        let mut store = self.lock();
        let function = FunctionDefinition {
            id: store.state().next_id(prefix::FUNCTION),
            name: spec.name,
            source: spec.source,
            interpreter_template: spec.interpreter_template,
            params: spec.params,
            version: 1,
            extension: spec.extension,
        };
        store.apply(Mutation::PutFunction(function.clone()))?;
        Ok(function)
    }

    pub fn update_function(&self, id: &Id, patch: FunctionPatch) -> Result<FunctionDefinition> {
        let mut store = self.lock();
        let current = store
            .state()
            .functions
            .get(id)
            .cloned()
            .ok_or_else(|| RegistryError::not_found("function", id))?;
        let spec = FunctionSpec {
            name: patch.name.unwrap_or(current.name),
            source: patch.source.unwrap_or(current.source),
            interpreter_template: patch
                .interpreter_template
                .unwrap_or(current.interpreter_template),
            params: patch.params.unwrap_or(current.params),
            extension: patch.extension.or(current.extension),
        };
        spec.validate().map_err(RegistryError::Validation)?;
        let updated = FunctionDefinition {
            id: current.id,
            name: spec.name,
            source: spec.source,
            interpreter_template: spec.interpreter_template,
            params: spec.params,
            version: current.version + 1,
            extension: spec.extension,
        };
        store.apply(Mutation::PutFunction(updated.clone()))?;
        Ok(updated)
    }

    /// Deletes a function. Refused while any live deployment or auto-deploy
    /// rule references it.
    pub fn delete_function(&self, id: &Id) -> Result<()> {
        let mut store = self.lock();
        let state = store.state();
        if !state.functions.contains_key(id) {
            return Err(RegistryError::not_found("function", id));
        }
        if let Some(dep) = state
            .deployments
            .values()
            .find(|d| &d.function_id == id && d.state.is_live())
        {
            return Err(RegistryError::InUse(format!(
                "function {id} has {} deployment {}",
                dep.state, dep.id
            )));
        }
        if let Some(rule) = state
            .autodeploy_rules
            .values()
            .find(|r| &r.function_id == id)
        {
            return Err(RegistryError::InUse(format!(
                "function {id} is referenced by auto-deploy rule {}",
                rule.id
            )));
        }
        store.apply(Mutation::Delete(EntityKind::Function, id.clone()))?;
        Ok(())
    }

    pub fn get_function(&self, id: &Id) -> Result<FunctionDefinition> {
        self.lock()
            .state()
            .functions
            .get(id)
            .cloned()
            .ok_or_else(|| RegistryError::not_found("function", id))
    }

    /// A specific committed version, as pinned by a deployment.
    pub fn function_version(&self, id: &Id, version: u32) -> Result<FunctionDefinition> {
        self.lock()
            .state()
            .function_versions
            .get(id)
            .and_then(|versions| versions.get(&version))
            .cloned()
            .ok_or_else(|| RegistryError::NotFound {
                kind: "function version",
                id: format!("{id}@{version}"),
            })
    }

    pub fn list_functions(&self) -> Vec<FunctionDefinition> {
        self.lock().state().functions.values().cloned().collect()
    }

    /// Registers a device, or refreshes the record of a known address.
    ///
    /// Every matching auto-deploy rule yields one deployment in `Requested`
    /// state, unless the device already has a live deployment from that rule.
    /// Deployments are not started here.
    pub fn register_device(
        &self,
        address: &str,
        capabilities: Vec<Capability>,
    ) -> Result<Registration> {
        validate_address(address).map_err(RegistryError::Validation)?;
        let mut capabilities = capabilities;
        capabilities.sort();
        capabilities.dedup();

        let now = self.clock.now();
        let mut store = self.lock();
        let state = store.state();
        let existing = state
            .devices
            .values()
            .find(|d| d.address == address)
            .cloned();
        let reregistered = existing.is_some();
        let mut device = match existing {
            Some(mut device) => {
                device.capabilities = capabilities;
                device
            }
            None => Device {
                id: state.next_id(prefix::DEVICE),
                address: address.to_owned(),
                capabilities,
                status: DeviceStatus::Pending,
                registered_at: now,
                transport_credentials: address.to_owned(),
                manually_activated: false,
            },
        };

        let live: Vec<Deployment> = state
            .deployments
            .values()
            .filter(|d| d.device_id == device.id && d.state.is_live())
            .cloned()
            .collect();
        let mut matched_rules = Vec::new();
        let mut created = Vec::new();
        let mut next_dep = state.counters.get(prefix::DEPLOYMENT).copied().unwrap_or(0);
        for rule in state.autodeploy_rules.values() {
            if !rule.matches(&device.capabilities) {
                continue;
            }
            matched_rules.push(rule.id.clone());
            if live.iter().any(|d| d.rule_id.as_ref() == Some(&rule.id)) {
                continue;
            }
            let Some(function) = state.functions.get(&rule.function_id) else {
                continue;
            };
            let bindings = match rule
                .bindings_for(function, &device.capabilities)
                .and_then(|b| function.resolve_bindings(&b))
            {
                Ok(bindings) => bindings,
                Err(reason) => {
                    log::warn!(
                        "auto-deploy rule {} skipped for {}: {reason}",
                        rule.id,
                        device.address
                    );
                    matched_rules.pop();
                    continue;
                }
            };
            next_dep += 1;
            created.push(Deployment {
                id: Id::allocated(prefix::DEPLOYMENT, next_dep),
                device_id: device.id.clone(),
                function_id: function.id.clone(),
                function_version: function.version,
                rule_id: Some(rule.id.clone()),
                bindings,
                state: DeploymentState::Requested,
                handle: None,
                failure_reason: None,
                created_at: now,
            });
        }

        let running = live.iter().any(|d| d.state == DeploymentState::Running);
        let kept_active = device.manually_activated && device.status == DeviceStatus::Active;
        device.status = if running || kept_active {
            DeviceStatus::Active
        } else {
            DeviceStatus::Pending
        };

        store.apply(Mutation::PutDevice(device.clone()))?;
        for deployment in &created {
            store.apply(Mutation::PutDeployment(deployment.clone()))?;
        }
        let created_ids = created.iter().map(|d| d.id.clone()).collect();
        let mut deployments = live;
        deployments.extend(created);
        let branch = if deployments.is_empty() {
            DiscoveryBranch::Pending
        } else {
            DiscoveryBranch::Deploy
        };
        Ok(Registration {
            device,
            branch,
            deployments,
            created: created_ids,
            matched_rules,
            reregistered,
        })
    }

    pub fn get_device(&self, id: &Id) -> Result<Device> {
        self.lock()
            .state()
            .devices
            .get(id)
            .cloned()
            .ok_or_else(|| RegistryError::not_found("device", id))
    }

    pub fn device_exists(&self, id: &Id) -> bool {
        self.lock().state().devices.contains_key(id)
    }

    pub fn list_devices(&self, status: Option<DeviceStatus>) -> Vec<Device> {
        let store = self.lock();
        let mut devices: Vec<Device> = store
            .state()
            .devices
            .values()
            .filter(|d| status.is_none_or(|s| d.status == s))
            .cloned()
            .collect();
        devices.sort_by(|a, b| a.registered_at.cmp(&b.registered_at).then(a.id.cmp(&b.id)));
        devices
    }

    /// Devices awaiting manual assignment, oldest registration first.
    pub fn list_pending_devices(&self) -> Vec<Device> {
        self.list_devices(Some(DeviceStatus::Pending))
    }

    /// Creates a manually assigned deployment in `Requested` state.
    pub fn assign_deployment(
        &self,
        device_id: &Id,
        function_id: &Id,
        bindings: &Bindings,
    ) -> Result<Deployment> {
        let now = self.clock.now();
        let mut store = self.lock();
        let state = store.state();
        let mut device = state
            .devices
            .get(device_id)
            .cloned()
            .ok_or_else(|| RegistryError::not_found("device", device_id))?;
        let function = state
            .functions
            .get(function_id)
            .ok_or_else(|| RegistryError::not_found("function", function_id))?;
        let bindings = function
            .resolve_bindings(bindings)
            .map_err(RegistryError::Binding)?;
        let deployment = Deployment {
            id: state.next_id(prefix::DEPLOYMENT),
            device_id: device_id.clone(),
            function_id: function_id.clone(),
            function_version: function.version,
            rule_id: None,
            bindings,
            state: DeploymentState::Requested,
            handle: None,
            failure_reason: None,
            created_at: now,
        };
        store.apply(Mutation::PutDeployment(deployment.clone()))?;
        if !device.manually_activated {
            device.manually_activated = true;
            store.apply(Mutation::PutDevice(device))?;
        }
        Ok(deployment)
    }

    pub fn get_deployment(&self, id: &Id) -> Result<Deployment> {
        self.lock()
            .state()
            .deployments
            .get(id)
            .cloned()
            .ok_or_else(|| RegistryError::not_found("deployment", id))
    }

    pub fn list_deployments(&self, device: Option<&Id>) -> Vec<Deployment> {
        self.lock()
            .state()
            .deployments
            .values()
            .filter(|d| device.is_none_or(|id| &d.device_id == id))
            .cloned()
            .collect()
    }

    /// Commits a new deployment state and derives the device status from it.
    ///
    /// A state change must be a legal edge of the deployment state machine.
    pub fn record_deployment(&self, updated: &Deployment) -> Result<Device> {
        let mut store = self.lock();
        let state = store.state();
        let current = state
            .deployments
            .get(&updated.id)
            .ok_or_else(|| RegistryError::not_found("deployment", &updated.id))?;
        if current.state != updated.state && !current.state.can_transition_to(updated.state) {
            return Err(IllegalTransition {
                from: current.state,
                to: updated.state,
            }
            .into());
        }
        let mut device = state
            .devices
            .get(&updated.device_id)
            .cloned()
            .ok_or_else(|| RegistryError::not_found("device", &updated.device_id))?;
        let any_running = state.deployments.values().any(|d| {
            d.device_id == device.id && d.id != updated.id && d.state == DeploymentState::Running
        }) || updated.state == DeploymentState::Running;
        let status = match (device.status, any_running) {
            (_, true) => DeviceStatus::Active,
            (DeviceStatus::Unreachable, false) => DeviceStatus::Unreachable,
            (DeviceStatus::Active, false) if device.manually_activated => DeviceStatus::Active,
            (_, false) => DeviceStatus::Pending,
        };
        store.apply(Mutation::PutDeployment(updated.clone()))?;
        if status != device.status {
            device.status = status;
            store.apply(Mutation::PutDevice(device.clone()))?;
        }
        Ok(device)
    }

    /// Marks a device unreachable after a failed session open.
    pub fn mark_unreachable(&self, id: &Id) -> Result<Device> {
        let mut store = self.lock();
        let mut device = store
            .state()
            .devices
            .get(id)
            .cloned()
            .ok_or_else(|| RegistryError::not_found("device", id))?;
        if device.status != DeviceStatus::Unreachable {
            device.status = DeviceStatus::Unreachable;
            store.apply(Mutation::PutDevice(device.clone()))?;
        }
        Ok(device)
    }

    /// Creates an auto-deploy rule. It applies to future registrations only.
    pub fn create_autodeploy_rule(
        &self,
        capability_predicate: Vec<String>,
        function_id: &Id,
        binding_template: BTreeMap<String, BindingSource>,
    ) -> Result<AutoDeployRule> {
        let mut store = self.lock();
        let function = store
            .state()
            .functions
            .get(function_id)
            .ok_or_else(|| RegistryError::not_found("function", function_id))?;
        for tag in &capability_predicate {
            if tag.trim().is_empty() || tag.contains([';', '=']) {
                return Err(RegistryError::Validation(format!(
                    "invalid capability tag {tag:?} in predicate"
                )));
            }
        }
        for (name, source) in &binding_template {
            let spec = function.param(name).ok_or_else(|| {
                RegistryError::Validation(format!(
                    "binding template names undeclared parameter {name:?}"
                ))
            })?;
            match source {
                BindingSource::Literal(value) if value.coerce(spec.kind).is_none() => {
                    return Err(RegistryError::Validation(format!(
                        "literal for {name:?} is not a {} value",
                        spec.kind
                    )))
                }
                BindingSource::Attribute { attr } if attr.trim().is_empty() => {
                    return Err(RegistryError::Validation(format!(
                        "empty attribute reference for {name:?}"
                    )))
                }
                _ => {}
            }
        }
        let mut predicate = capability_predicate;
        predicate.sort();
        predicate.dedup();
        let rule = AutoDeployRule {
            id: store.state().next_id(prefix::AUTODEPLOY_RULE),
            capability_predicate: predicate,
            function_id: function_id.clone(),
            binding_template,
        };
        store.apply(Mutation::PutAutoDeployRule(rule.clone()))?;
        Ok(rule)
    }

    pub fn get_autodeploy_rule(&self, id: &Id) -> Result<AutoDeployRule> {
        self.lock()
            .state()
            .autodeploy_rules
            .get(id)
            .cloned()
            .ok_or_else(|| RegistryError::not_found("auto-deploy rule", id))
    }

    pub fn list_autodeploy_rules(&self) -> Vec<AutoDeployRule> {
        self.lock()
            .state()
            .autodeploy_rules
            .values()
            .cloned()
            .collect()
    }

    pub fn delete_autodeploy_rule(&self, id: &Id) -> Result<()> {
        let mut store = self.lock();
        if !store.state().autodeploy_rules.contains_key(id) {
            return Err(RegistryError::not_found("auto-deploy rule", id));
        }
        store.apply(Mutation::Delete(EntityKind::AutoDeployRule, id.clone()))?;
        Ok(())
    }
}

/// Shorthand for building literal binding maps.
pub fn bindings<I, K>(pairs: I) -> Bindings
where
    I: IntoIterator<Item = (K, ParamValue)>,
    K: Into<String>,
{
    pairs.into_iter().map(|(k, v)| (k.into(), v)).collect()
}
