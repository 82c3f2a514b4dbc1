//! A control plane and simulated devices in one process, wired over the
//! in-memory transport.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::agent::{
    Agent, AgentConfig, AgentError, ControlPlaneLink, HostWorkspace, Observation, Registered,
};
use crate::clock::{at_offset, Clock, SystemClock, VirtualClock};
use crate::control::ControlPlane;
use crate::deploy::{MemoryConnector, SimHost, SimNetwork, DEFAULT_BASE_DIR};
use crate::model::{Capability, Id, Timestamp};
use crate::store::Store;
use crate::telemetry::{
    ActionClient, ActionReply, ActionRequest, IngestReport, RecordingNotifier, Sample,
    TelemetryUpload,
};

/// Agent workspace root on every simulated host.
pub const AGENT_ROOT: &str = "/var/lib/fnfleet";
pub const CONTROL_PLANE_URL: &str = "http://control-plane.sim:8080";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Virtual,
    Wall,
}

/// Scenario time. One time-unit is a second of virtual time, or `unit` of
/// real time in wall mode.
pub struct SimClock {
    mode: ClockMode,
    virtual_clock: Option<Arc<VirtualClock>>,
    clock: Arc<dyn Clock>,
    origin: Timestamp,
    started: Instant,
    unit: Duration,
}

impl SimClock {
    pub fn virtual_time() -> Self {
        let virtual_clock = Arc::new(VirtualClock::new());
        SimClock {
            mode: ClockMode::Virtual,
            origin: virtual_clock.now(),
            clock: virtual_clock.clone(),
            virtual_clock: Some(virtual_clock),
            started: Instant::now(),
            unit: Duration::from_secs(1),
        }
    }

    pub fn wall(unit: Duration) -> Self {
        SimClock {
            mode: ClockMode::Wall,
            virtual_clock: None,
            clock: Arc::new(SystemClock),
            origin: SystemClock.now(),
            started: Instant::now(),
            unit,
        }
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn origin(&self) -> Timestamp {
        self.origin
    }

    /// Milliseconds of event time per time-unit.
    pub fn unit_ms(&self) -> i64 {
        match self.mode {
            ClockMode::Virtual => 1000,
            ClockMode::Wall => self.unit.as_millis() as i64,
        }
    }

    /// Moves virtual time to `units` after the origin, or waits for that
    /// moment in wall mode.
    pub fn advance_to(&self, units: f64) {
        match &self.virtual_clock {
            Some(clock) => clock.advance_to(at_offset(self.origin, units)),
            None => {
                let target = self.started + self.unit.mul_f64(units.max(0.0));
                if let Some(wait) = target.checked_duration_since(Instant::now()) {
                    std::thread::sleep(wait);
                }
            }
        }
    }

    /// Time-units since the origin.
    pub fn elapsed_units(&self) -> f64 {
        let ms = (self.now() - self.origin).num_milliseconds() as f64;
        ms / self.unit_ms() as f64
    }
}

/// Delivers device actions to in-process agents by address.
#[derive(Default)]
pub struct AgentRouter {
    agents: Mutex<BTreeMap<String, Arc<Agent>>>,
    network: Option<Arc<SimNetwork>>,
}

impl AgentRouter {
    pub fn new(network: Arc<SimNetwork>) -> Self {
        AgentRouter {
            agents: Mutex::new(BTreeMap::new()),
            network: Some(network),
        }
    }

    pub fn insert(&self, address: &str, agent: Arc<Agent>) {
        self.agents
            .lock()
            .unwrap()
            .insert(address.to_owned(), agent);
    }

    pub fn remove(&self, address: &str) {
        self.agents.lock().unwrap().remove(address);
    }
}

impl ActionClient for AgentRouter {
    fn invoke(&self, address: &str, request: &ActionRequest) -> Result<ActionReply, String> {
        if let Some(network) = &self.network {
            if !network.host(address).is_some_and(|h| h.is_online()) {
                return Err(format!("connect to {address} failed: host unreachable"));
            }
        }
        let agent = self
            .agents
            .lock()
            .unwrap()
            .get(address)
            .cloned()
            .ok_or_else(|| format!("connect to {address} failed: no agent listening"))?;
        Ok(match agent.handle_action(request) {
            Ok(reply) => reply,
            Err(err) => ActionReply::error(err.to_string()),
        })
    }
}

/// Calls the control plane directly; records every ingest report.
pub struct DirectLink {
    plane: Arc<ControlPlane>,
    online: AtomicBool,
    ingests: Arc<Mutex<Vec<IngestReport>>>,
}

impl DirectLink {
    pub fn new(plane: Arc<ControlPlane>, ingests: Arc<Mutex<Vec<IngestReport>>>) -> Self {
        DirectLink {
            plane,
            online: AtomicBool::new(true),
            ingests,
        }
    }

    pub fn set_online(&self, online: bool) {
        self.online.store(online, Ordering::SeqCst);
    }

    fn reachable(&self) -> Result<(), String> {
        if self.online.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err("connection error: control plane unreachable".into())
        }
    }
}

impl ControlPlaneLink for DirectLink {
    fn register(&self, address: &str, capabilities: &[Capability]) -> Result<Registered, String> {
        self.reachable()?;
        let onboarding = self
            .plane
            .register_device(address, capabilities.to_vec())
            .map_err(|e| e.to_string())?;
        Ok(Registered {
            device_id: onboarding.device.id,
            status: onboarding.device.status,
        })
    }

    fn push(&self, upload: &TelemetryUpload) -> Result<usize, String> {
        self.reachable()?;
        let report = self
            .plane
            .telemetry()
            .ingest(upload.clone())
            .map_err(|e| e.to_string())?;
        let stored = report.stored;
        self.ingests.lock().unwrap().push(report);
        Ok(stored)
    }
}

/// One simulated device: a host on the network and the agent running on it.
pub struct SimDevice {
    pub name: String,
    pub address: String,
    pub capabilities: Vec<Capability>,
    pub host: Arc<SimHost>,
    pub link: Arc<DirectLink>,
    agent: Mutex<Option<Arc<Agent>>>,
    boots: Mutex<u32>,
}

impl SimDevice {
    pub fn agent(&self) -> Option<Arc<Agent>> {
        self.agent.lock().unwrap().clone()
    }

    pub fn boots(&self) -> u32 {
        *self.boots.lock().unwrap()
    }
}

/// Per-agent settings applied to every device of a fleet.
#[derive(Debug, Clone, Copy)]
pub struct AgentSettings {
    pub telemetry_interval_ms: u64,
    pub buffer_capacity: usize,
    pub retry_budget: u32,
}

impl Default for AgentSettings {
    fn default() -> Self {
        AgentSettings {
            telemetry_interval_ms: 1000,
            buffer_capacity: 1000,
            retry_budget: 0,
        }
    }
}

pub struct Fleet {
    clock: SimClock,
    network: Arc<SimNetwork>,
    plane: Arc<ControlPlane>,
    router: Arc<AgentRouter>,
    notifier: Arc<RecordingNotifier>,
    ingests: Arc<Mutex<Vec<IngestReport>>>,
    devices: Vec<SimDevice>,
    settings: AgentSettings,
}

impl Fleet {
    pub fn new(clock: SimClock) -> Self {
        Self::with_store(clock, Store::in_memory(), AgentSettings::default())
    }

    pub fn with_store(clock: SimClock, store: Store, settings: AgentSettings) -> Self {
        let network = Arc::new(SimNetwork::new());
        let router = Arc::new(AgentRouter::new(network.clone()));
        let notifier = Arc::new(RecordingNotifier::new());
        let plane = Arc::new(ControlPlane::open(
            store,
            clock.clock(),
            Arc::new(MemoryConnector::new(network.clone())),
            DEFAULT_BASE_DIR,
            router.clone(),
            notifier.clone(),
        ));
        Fleet {
            clock,
            network,
            plane,
            router,
            notifier,
            ingests: Arc::new(Mutex::new(Vec::new())),
            devices: Vec::new(),
            settings,
        }
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn plane(&self) -> &Arc<ControlPlane> {
        &self.plane
    }

    pub fn network(&self) -> &Arc<SimNetwork> {
        &self.network
    }

    pub fn notifier(&self) -> &Arc<RecordingNotifier> {
        &self.notifier
    }

    pub fn ingests(&self) -> Vec<IngestReport> {
        self.ingests.lock().unwrap().clone()
    }

    pub fn devices(&self) -> &[SimDevice] {
        &self.devices
    }

    pub fn device(&self, name: &str) -> Option<&SimDevice> {
        self.devices.iter().find(|d| d.name == name)
    }

    /// The control-plane id of a booted device.
    pub fn device_id(&self, name: &str) -> Option<Id> {
        self.device(name)?.agent()?.device_id()
    }

    /// Puts a powered-off device on the network.
    pub fn add_device(
        &mut self,
        name: &str,
        address: &str,
        capabilities: Vec<Capability>,
        interpreters: &[&str],
    ) -> Result<&SimDevice, String> {
        if self.device(name).is_some() {
            return Err(format!("duplicate device name {name:?}"));
        }
        if self.devices.iter().any(|d| d.address == address) {
            return Err(format!("duplicate device address {address:?}"));
        }
        let host = self.network.add_host(SimHost::new(address, interpreters));
        self.devices.push(SimDevice {
            name: name.to_owned(),
            address: address.to_owned(),
            capabilities,
            host,
            link: Arc::new(DirectLink::new(self.plane.clone(), self.ingests.clone())),
            agent: Mutex::new(None),
            boots: Mutex::new(0),
        });
        Ok(self.devices.last().expect("just pushed"))
    }

    /// Starts (or restarts) the agent of `name` and runs its boot
    /// registration. A restarted agent keeps its workspace, so it re-registers
    /// under the id it persisted.
    pub fn boot(&self, name: &str) -> Result<Registered, AgentError> {
        let device = self.device(name).ok_or(AgentError::NotRegistered)?;
        if device.agent().is_some() {
            device.host.detach();
            self.router.remove(&device.address);
        }
        let mut config = AgentConfig::new(
            CONTROL_PLANE_URL,
            &device.address,
            device.capabilities.clone(),
        );
        config.workspace = AGENT_ROOT.into();
        config.telemetry_interval_ms = self.settings.telemetry_interval_ms;
        config.buffer_capacity = self.settings.buffer_capacity;
        config.retry_budget = self.settings.retry_budget;
        let agent = Arc::new(Agent::new(
            config,
            device.link.clone(),
            self.clock.clock(),
            Arc::new(HostWorkspace::new(device.host.clone(), AGENT_ROOT)),
        ));
        device.host.attach(agent.clone());
        self.router.insert(&device.address, agent.clone());
        *device.agent.lock().unwrap() = Some(agent.clone());
        *device.boots.lock().unwrap() += 1;
        agent.boot_register()
    }

    /// Feeds a sensor reading, taken now, to a device's agent.
    pub fn observe(&self, name: &str, metric: &str, value: f64) -> Result<Observation, AgentError> {
        let agent = self
            .device(name)
            .and_then(SimDevice::agent)
            .ok_or(AgentError::NotRegistered)?;
        agent.observe(metric, Sample::new(self.clock.now(), value))
    }

    /// Flushes every running agent, in device order. Returns the number of
    /// samples delivered and the failures.
    pub fn flush_all(&self) -> (usize, Vec<(String, AgentError)>) {
        let mut sent = 0;
        let mut failures = Vec::new();
        for device in &self.devices {
            let Some(agent) = device.agent() else {
                continue;
            };
            if agent.device_id().is_none() {
                continue;
            }
            match agent.flush() {
                Ok(n) => sent += n,
                Err(err) => failures.push((device.name.clone(), err)),
            }
        }
        (sent, failures)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DeviceStatus;

    fn caps(list: &[&str]) -> Vec<Capability> {
        list.iter().map(|c| c.parse().unwrap()).collect()
    }

    #[test]
    fn virtual_clock_advances_in_units() {
        let clock = SimClock::virtual_time();
        clock.advance_to(2.5);
        assert_eq!(clock.elapsed_units(), 2.5);
        clock.advance_to(1.0);
        assert_eq!(clock.elapsed_units(), 2.5);
    }

    #[test]
    fn restarts_keep_one_device_record() {
        let mut fleet = Fleet::new(SimClock::virtual_time());
        fleet
            .add_device("a", "10.0.0.1:9000", caps(&["camera"]), &["python"])
            .unwrap();
        let first = fleet.boot("a").unwrap();
        assert_eq!(first.status, DeviceStatus::Pending);
        for _ in 0..3 {
            let again = fleet.boot("a").unwrap();
            assert_eq!(again.device_id, first.device_id);
        }
        assert_eq!(fleet.plane().registry().list_devices(None).len(), 1);
        assert_eq!(fleet.device("a").unwrap().boots(), 4);
    }

    #[test]
    fn router_reports_unreachable_hosts() {
        let mut fleet = Fleet::new(SimClock::virtual_time());
        fleet
            .add_device("a", "10.0.0.1:9000", Vec::new(), &["python"])
            .unwrap();
        let request = ActionRequest {
            action: "on".into(),
            params: BTreeMap::new(),
        };
        assert!(fleet.router.invoke("10.0.0.1:9000", &request).is_err());
        fleet.boot("a").unwrap();
        let reply = fleet.router.invoke("10.0.0.1:9000", &request).unwrap();
        assert!(!reply.is_ok(), "no function serves on yet");
        fleet.device("a").unwrap().host.set_online(false);
        assert!(fleet.router.invoke("10.0.0.1:9000", &request).is_err());
    }

    #[test]
    fn offline_link_fails_registration() {
        let mut fleet = Fleet::new(SimClock::virtual_time());
        fleet
            .add_device("a", "10.0.0.1:9000", Vec::new(), &[])
            .unwrap();
        fleet.device("a").unwrap().link.set_online(false);
        assert!(matches!(
            fleet.boot("a"),
            Err(AgentError::RegistrationExhausted { attempts: 1, .. })
        ));
    }
}
