//! In-process simulated transport.
//!
//! A [`SimNetwork`] holds simulated hosts keyed by address. Each host has a
//! file table, a process table and the set of interpreters it can run.
//! Sessions count the bytes they would put on a wire: every request is one
//! frame with a 4-byte length and a 1-byte opcode, followed by its fields.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::transport::{Connector, Launch, TransportError, TransportSession};

/// Length prefix plus opcode.
pub const FRAME_HEADER: usize = 5;
/// Path fields carry a 2-byte length.
pub const PATH_PREFIX: usize = 2;

/// Byte accounting for one host, or summed over a network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct Traffic {
    pub payload_bytes: u64,
    pub command_bytes: u64,
    pub framing_bytes: u64,
    pub frames: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.payload_bytes + self.command_bytes + self.framing_bytes
    }

    pub fn since(&self, earlier: &Traffic) -> Traffic {
        Traffic {
            payload_bytes: self.payload_bytes - earlier.payload_bytes,
            command_bytes: self.command_bytes - earlier.command_bytes,
            framing_bytes: self.framing_bytes - earlier.framing_bytes,
            frames: self.frames - earlier.frames,
        }
    }
}

/// Device-side hooks for processes started on a simulated host. The device
/// agent implements this to turn launched scripts into in-process functions.
pub trait ProcessListener: Send + Sync {
    /// Called when `command` starts as `handle`; `script` is the content of
    /// the file the command runs, if it names one. An error makes the launch
    /// exit immediately with status 1.
    fn on_launch(&self, handle: &str, command: &str, script: Option<&[u8]>) -> Result<(), String>;

    fn on_exit(&self, handle: &str);
}

#[derive(Debug, Clone)]
struct SimProcess {
    command: String,
    script_path: Option<String>,
    alive: bool,
}

#[derive(Default)]
struct HostState {
    online: bool,
    files: BTreeMap<String, Vec<u8>>,
    processes: BTreeMap<String, SimProcess>,
    next_pid: u64,
    traffic: Traffic,
}

/// A simulated device reachable over the in-memory transport.
pub struct SimHost {
    address: String,
    interpreters: BTreeSet<String>,
    state: Mutex<HostState>,
    listener: Mutex<Option<Arc<dyn ProcessListener>>>,
    latency: Mutex<Duration>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl SimHost {
    pub fn new(address: &str, interpreters: &[&str]) -> Self {
        SimHost {
            address: address.to_owned(),
            interpreters: interpreters.iter().map(|s| s.to_string()).collect(),
            state: Mutex::new(HostState {
                online: true,
                next_pid: 100,
                ..Default::default()
            }),
            listener: Mutex::new(None),
            latency: Mutex::new(Duration::ZERO),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn set_online(&self, online: bool) {
        self.state.lock().unwrap().online = online;
    }

    pub fn is_online(&self) -> bool {
        self.state.lock().unwrap().online
    }

    /// Adds a delay to every file write, to widen race windows in tests.
    pub fn set_latency(&self, latency: Duration) {
        *self.latency.lock().unwrap() = latency;
    }

    /// Attaches the device-side listener and replays every live process to
    /// it, as a restarted agent would rediscover running functions.
    pub fn attach(&self, listener: Arc<dyn ProcessListener>) {
        let live: Vec<(String, SimProcess)> = {
            let state = self.state.lock().unwrap();
            state
                .processes
                .iter()
                .filter(|(_, p)| p.alive)
                .map(|(h, p)| (h.clone(), p.clone()))
                .collect()
        };
        *self.listener.lock().unwrap() = Some(Arc::clone(&listener));
        for (handle, process) in live {
            let script = process.script_path.as_ref().and_then(|p| self.read(p));
            if let Err(err) = listener.on_launch(&handle, &process.command, script.as_deref()) {
                log::warn!("{}: reattaching {handle} failed: {err}", self.address);
            }
        }
    }

    pub fn detach(&self) {
        *self.listener.lock().unwrap() = None;
    }

    pub fn read(&self, path: &str) -> Option<Vec<u8>> {
        self.state.lock().unwrap().files.get(path).cloned()
    }

    pub fn write(&self, path: &str, bytes: &[u8]) {
        self.state
            .lock()
            .unwrap()
            .files
            .insert(path.to_owned(), bytes.to_vec());
    }

    /// Paths under `prefix`, in order.
    pub fn list(&self, prefix: &str) -> Vec<String> {
        self.state
            .lock()
            .unwrap()
            .files
            .keys()
            .filter(|p| p.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn traffic(&self) -> Traffic {
        self.state.lock().unwrap().traffic
    }

    /// Handles of processes still running.
    pub fn live_processes(&self) -> Vec<String> {
        let state = self.state.lock().unwrap();
        state
            .processes
            .iter()
            .filter(|(_, p)| p.alive)
            .map(|(h, _)| h.clone())
            .collect()
    }

    /// Kills a process as if it crashed.
    pub fn crash(&self, handle: &str) -> bool {
        let was_alive = {
            let mut state = self.state.lock().unwrap();
            match state.processes.get_mut(handle) {
                Some(p) if p.alive => {
                    p.alive = false;
                    true
                }
                _ => false,
            }
        };
        if was_alive {
            let listener = self.listener.lock().unwrap().clone();
            if let Some(listener) = listener {
                listener.on_exit(handle);
            }
        }
        was_alive
    }

    /// Highest number of concurrent file writes observed on this host.
    pub fn max_concurrent_writes(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn check_online(&self) -> Result<(), TransportError> {
        if self.is_online() {
            Ok(())
        } else {
            Err(TransportError::Transfer(format!(
                "connection to {} reset",
                self.address
            )))
        }
    }

    fn count(&self, payload: usize, command: usize, framing: usize) {
        let mut state = self.state.lock().unwrap();
        state.traffic.payload_bytes += payload as u64;
        state.traffic.command_bytes += command as u64;
        state.traffic.framing_bytes += framing as u64;
        state.traffic.frames += 1;
    }

    fn launch(&self, command: &str) -> Launch {
        let mut tokens = command.split_whitespace();
        let interpreter = tokens.next().unwrap_or_default();
        if !self.interpreters.contains(interpreter) {
            return Launch::Exited {
                code: 127,
                detail: format!("{interpreter}: command not found"),
            };
        }
        let (script_path, script) = {
            let state = self.state.lock().unwrap();
            match tokens.find_map(|t| {
                state
                    .files
                    .get(t)
                    .map(|bytes| (t.to_owned(), bytes.clone()))
            }) {
                Some((path, bytes)) => (Some(path), Some(bytes)),
                None => (None, None),
            }
        };
        if script_path.is_none() {
            return Launch::Exited {
                code: 2,
                detail: format!("{interpreter}: can't open script file"),
            };
        }
        let handle = {
            let mut state = self.state.lock().unwrap();
            state.next_pid += 1;
            let handle = format!("pid:{}", state.next_pid);
            state.processes.insert(
                handle.clone(),
                SimProcess {
                    command: command.to_owned(),
                    script_path,
                    alive: true,
                },
            );
            handle
        };
        let listener = self.listener.lock().unwrap().clone();
        if let Some(listener) = listener {
            if let Err(detail) = listener.on_launch(&handle, command, script.as_deref()) {
                if let Some(p) = self.state.lock().unwrap().processes.get_mut(&handle) {
                    p.alive = false;
                }
                return Launch::Exited { code: 1, detail };
            }
        }
        Launch::Started { handle }
    }
}

/// A set of simulated hosts addressable by the in-memory connector.
#[derive(Default)]
pub struct SimNetwork {
    hosts: Mutex<BTreeMap<String, Arc<SimHost>>>,
}

impl SimNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_host(&self, host: SimHost) -> Arc<SimHost> {
        let host = Arc::new(host);
        self.hosts
            .lock()
            .unwrap()
            .insert(host.address.clone(), Arc::clone(&host));
        host
    }

    /// The host at `address`, created with `interpreters` if absent.
    pub fn ensure_host(&self, address: &str, interpreters: &[&str]) -> Arc<SimHost> {
        Arc::clone(
            self.hosts
                .lock()
                .unwrap()
                .entry(address.to_owned())
                .or_insert_with(|| Arc::new(SimHost::new(address, interpreters))),
        )
    }

    pub fn host(&self, address: &str) -> Option<Arc<SimHost>> {
        self.hosts.lock().unwrap().get(address).cloned()
    }

    pub fn traffic(&self) -> Traffic {
        self.hosts
            .lock()
            .unwrap()
            .values()
            .map(|h| h.traffic())
            .fold(Traffic::default(), |acc, t| Traffic {
                payload_bytes: acc.payload_bytes + t.payload_bytes,
                command_bytes: acc.command_bytes + t.command_bytes,
                framing_bytes: acc.framing_bytes + t.framing_bytes,
                frames: acc.frames + t.frames,
            })
    }
}

#[derive(Clone)]
pub struct MemoryConnector {
    network: Arc<SimNetwork>,
    provision: Option<Vec<String>>,
}

impl MemoryConnector {
    pub fn new(network: Arc<SimNetwork>) -> Self {
        MemoryConnector {
            network,
            provision: None,
        }
    }

    /// A connector that adds a host with `interpreters` for any unknown peer.
    pub fn provisioning(network: Arc<SimNetwork>, interpreters: &[&str]) -> Self {
        MemoryConnector {
            network,
            provision: Some(interpreters.iter().map(|s| s.to_string()).collect()),
        }
    }
}

impl Connector for MemoryConnector {
    fn connect(
        &self,
        peer: &str,
        _credentials: &str,
    ) -> Result<Box<dyn TransportSession>, TransportError> {
        if let Some(interpreters) = &self.provision {
            let names: Vec<&str> = interpreters.iter().map(String::as_str).collect();
            self.network.ensure_host(peer, &names);
        }
        match self.network.host(peer) {
            Some(host) if host.is_online() => Ok(Box::new(MemorySession {
                host,
                closed: false,
            })),
            _ => Err(TransportError::Connect {
                peer: peer.to_owned(),
                reason: "connection refused".into(),
            }),
        }
    }
}

pub struct MemorySession {
    host: Arc<SimHost>,
    closed: bool,
}

impl MemorySession {
    fn ensure_open(&self) -> Result<(), TransportError> {
        if self.closed {
            return Err(TransportError::SessionClosed);
        }
        self.host.check_online()
    }
}

struct InFlight<'a>(&'a SimHost);

impl<'a> InFlight<'a> {
    fn enter(host: &'a SimHost) -> Self {
        let now = host.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        host.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(host)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl TransportSession for MemorySession {
    fn peer(&self) -> &str {
        &self.host.address
    }

    fn write_file(&mut self, path: &str, bytes: &[u8]) -> Result<(), TransportError> {
        self.ensure_open()?;
        let _guard = InFlight::enter(&self.host);
        let latency = *self.host.latency.lock().unwrap();
        if !latency.is_zero() {
            std::thread::sleep(latency);
        }
        self.host
            .count(bytes.len(), 0, FRAME_HEADER + PATH_PREFIX + path.len());
        self.host.write(path, bytes);
        Ok(())
    }

    fn read_file(&mut self, path: &str) -> Result<Vec<u8>, TransportError> {
        self.ensure_open()?;
        self.host
            .count(0, 0, FRAME_HEADER + PATH_PREFIX + path.len());
        self.host
            .read(path)
            .ok_or_else(|| TransportError::Transfer(format!("{path}: no such file")))
    }

    fn launch(&mut self, command: &str) -> Result<Launch, TransportError> {
        self.ensure_open()?;
        self.host.count(0, command.len(), FRAME_HEADER);
        Ok(self.host.launch(command))
    }

    fn is_alive(&mut self, handle: &str) -> Result<bool, TransportError> {
        self.ensure_open()?;
        let state = self.host.state.lock().unwrap();
        Ok(state.processes.get(handle).is_some_and(|p| p.alive))
    }

    fn terminate(&mut self, handle: &str) -> Result<(), TransportError> {
        self.ensure_open()?;
        if !self.host.crash(handle) {
            return Err(TransportError::Exec(format!(
                "kill {handle}: no such process"
            )));
        }
        Ok(())
    }

    fn close(&mut self) {
        self.closed = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn network() -> (Arc<SimNetwork>, MemoryConnector) {
        let network = Arc::new(SimNetwork::new());
        network.add_host(SimHost::new("10.0.0.1:9100", &["python"]));
        let connector = MemoryConnector::new(Arc::clone(&network));
        (network, connector)
    }

    #[test]
    fn transfer_then_read_back_is_identical() {
        let (_net, connector) = network();
        let mut session = connector.connect("10.0.0.1:9100", "").unwrap();
        let payload: Vec<u8> = (0..=255u8).cycle().take(3000).collect();
        session.write_file("/opt/fn/a.py", &payload).unwrap();
        assert_eq!(session.read_file("/opt/fn/a.py").unwrap(), payload);
    }

    #[test]
    fn closed_session_fails() {
        let (_net, connector) = network();
        let mut session = connector.connect("10.0.0.1:9100", "").unwrap();
        session.close();
        assert_eq!(
            session.write_file("/a", b"x"),
            Err(TransportError::SessionClosed)
        );
        assert_eq!(
            session.launch("python /a"),
            Err(TransportError::SessionClosed)
        );
        assert_eq!(
            session.is_alive("pid:1"),
            Err(TransportError::SessionClosed)
        );
    }

    #[test]
    fn provisioning_connector_adds_hosts() {
        let network = Arc::new(SimNetwork::new());
        let connector = MemoryConnector::provisioning(network.clone(), &["sh"]);
        let mut session = connector.connect("10.0.0.3:9100", "").ok().unwrap();
        session.write_file("/opt/a", b"x").unwrap();
        assert!(network.host("10.0.0.3:9100").is_some());
    }

    #[test]
    fn unknown_or_offline_host_refuses() {
        let (net, connector) = network();
        assert!(connector
            .connect("10.0.0.9:9100", "")
            .err()
            .unwrap()
            .is_open_failure());
        net.host("10.0.0.1:9100").unwrap().set_online(false);
        assert!(connector.connect("10.0.0.1:9100", "").is_err());
    }

    #[test]
    fn launch_semantics() {
        let (net, connector) = network();
        let mut session = connector.connect("10.0.0.1:9100", "").unwrap();
        assert!(matches!(
            session.launch("ruby /a.rb").unwrap(),
            Launch::Exited { code: 127, .. }
        ));
        assert!(matches!(
            session.launch("python /missing.py").unwrap(),
            Launch::Exited { code: 2, .. }
        ));
        session.write_file("/a.py", b"print(1)").unwrap();
        let Launch::Started { handle } = session.launch("python /a.py 4").unwrap() else {
            panic!("not started");
        };
        assert!(session.is_alive(&handle).unwrap());
        assert!(net.host("10.0.0.1:9100").unwrap().crash(&handle));
        assert!(!session.is_alive(&handle).unwrap());
    }

    #[test]
    fn byte_accounting() {
        let (net, connector) = network();
        let mut session = connector.connect("10.0.0.1:9100", "").unwrap();
        session.write_file("/p", &[0u8; 1024]).unwrap();
        session.launch("python /p").unwrap();
        let t = net.traffic();
        assert_eq!(t.payload_bytes, 1024);
        assert_eq!(t.command_bytes, "python /p".len() as u64);
        assert_eq!(
            t.framing_bytes,
            (FRAME_HEADER + PATH_PREFIX + 2 + FRAME_HEADER) as u64
        );
        assert_eq!(t.frames, 2);
    }
}
