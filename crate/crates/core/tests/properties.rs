//! Invariants checked against independent scans: deployment state edges,
//! discovery totality, the pending list and telemetry range queries.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::Duration;
use fnfleet_core::clock::VirtualClock;
use fnfleet_core::control::ControlPlane;
use fnfleet_core::deploy::{MemoryConnector, SimHost, SimNetwork};
use fnfleet_core::model::{
    BindingSource, Capability, Deployment, DeploymentState, DeviceStatus, FunctionSpec, Id,
    ParamKind, ParamSpec, ParamValue,
};
use fnfleet_core::registry::{bindings, DiscoveryBranch};
use fnfleet_core::store::{decode_journal, MemoryBackend, Mutation, Store};
use fnfleet_core::telemetry::{
    ActionClient, ActionReply, ActionRequest, RecordingNotifier, Sample, TelemetryUpload,
};
use proptest::prelude::*;

use DeploymentState::*;

const STATES: [DeploymentState; 5] = [Requested, Transferred, Running, Failed, Stopped];
const LEGAL: [(DeploymentState, DeploymentState); 6] = [
    (Requested, Transferred),
    (Requested, Failed),
    (Transferred, Running),
    (Transferred, Failed),
    (Running, Stopped),
    (Running, Failed),
];
const TAGS: [&str; 4] = ["camera", "relay", "pir-motion", "thermo"];

struct NoActions;

impl ActionClient for NoActions {
    fn invoke(&self, _: &str, _: &ActionRequest) -> Result<ActionReply, String> {
        Err("no agents".into())
    }
}

fn plane_on(store: Store) -> (ControlPlane, Arc<SimNetwork>, Arc<VirtualClock>) {
    let network = Arc::new(SimNetwork::new());
    let clock = Arc::new(VirtualClock::new());
    let plane = ControlPlane::open(
        store,
        clock.clone(),
        Arc::new(MemoryConnector::new(network.clone())),
        "/opt/fnfleet",
        Arc::new(NoActions),
        Arc::new(RecordingNotifier::new()),
    );
    (plane, network, clock)
}

fn function(plane: &ControlPlane, name: &str) -> Id {
    plane
        .registry()
        .create_function(FunctionSpec {
            name: name.into(),
            source: format!("print({name:?})\n"),
            interpreter_template: "python {file} {port}".into(),
            params: vec![ParamSpec::optional(
                "port",
                ParamKind::Integer,
                Some(ParamValue::Integer(1)),
            )],
            extension: Some("py".into()),
        })
        .unwrap()
        .id
}

fn address(index: usize) -> String {
    format!("10.0.0.{}:9000", index + 1)
}

#[test]
fn transition_accepts_exactly_the_legal_edges() {
    for from in STATES {
        for to in STATES {
            let mut deployment = Deployment {
                id: Id::new("dep-00000001"),
                device_id: Id::new("dev-00000001"),
                function_id: Id::new("fn-00000001"),
                function_version: 1,
                rule_id: None,
                bindings: Default::default(),
                state: from,
                handle: Some("h".into()),
                failure_reason: None,
                created_at: VirtualClock::epoch(),
            };
            let legal = LEGAL.contains(&(from, to));
            assert_eq!(deployment.transition(to).is_ok(), legal, "{from} -> {to}");
            assert_eq!(deployment.state, if legal { to } else { from });
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Register { device: usize, tags: Vec<usize> },
    Assign { device: usize, function: usize },
    Stop { pick: usize },
    Probe { pick: usize },
    Crash { pick: usize },
    Online { device: usize, online: bool },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..4usize, proptest::collection::vec(0..4usize, 0..3))
            .prop_map(|(device, tags)| Op::Register { device, tags }),
        (0..4usize, 0..2usize).prop_map(|(device, function)| Op::Assign { device, function }),
        (0..16usize).prop_map(|pick| Op::Stop { pick }),
        (0..16usize).prop_map(|pick| Op::Probe { pick }),
        (0..16usize).prop_map(|pick| Op::Crash { pick }),
        (0..4usize, any::<bool>()).prop_map(|(device, online)| Op::Online { device, online }),
    ]
}

fn tags(indices: &[usize]) -> Vec<Capability> {
    indices.iter().map(|&i| Capability::tag(TAGS[i])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every persisted deployment history starts at Requested and only ever
    /// moves along a legal edge.
    #[test]
    fn persisted_histories_follow_legal_edges(ops in proptest::collection::vec(op(), 1..40)) {
        let backend = MemoryBackend::new();
        let media = backend.media();
        let mut store = Store::open(Box::new(backend)).unwrap();
        store.set_compact_every(0);
        let (plane, network, _clock) = plane_on(store);
        let functions = [function(&plane, "a"), function(&plane, "b")];
        plane
            .registry()
            .create_autodeploy_rule(vec!["camera".into()], &functions[0], BTreeMap::new())
            .unwrap();
        for i in 0..4 {
            network.add_host(SimHost::new(&address(i), &["python"]));
        }
        let pick = |n: usize| {
            let all = plane.registry().list_deployments(None);
            (!all.is_empty()).then(|| all[n % all.len()].clone())
        };
        for op in ops {
            match op {
                Op::Register { device, tags: t } => {
                    let _ = plane.register_device(&address(device), tags(&t));
                }
                Op::Assign { device, function } => {
                    if let Some(dev) = plane
                        .registry()
                        .list_devices(None)
                        .into_iter()
                        .find(|d| d.address == address(device))
                    {
                        let _ = plane.assign_deployment(
                            &dev.id,
                            &functions[function],
                            &bindings([("port", ParamValue::Integer(2))]),
                        );
                    }
                }
                Op::Stop { pick: n } => {
                    if let Some(dep) = pick(n) {
                        let _ = plane.stop_deployment(&dep.id);
                    }
                }
                Op::Probe { pick: n } => {
                    if let Some(dep) = pick(n) {
                        let _ = plane.probe_deployment(&dep.id);
                    }
                }
                Op::Crash { pick: n } => {
                    if let Some(dep) = pick(n) {
                        let device = plane.registry().get_device(&dep.device_id).unwrap();
                        if let (Some(host), Some(handle)) = (network.host(&device.address), dep.handle) {
                            host.crash(&handle);
                        }
                    }
                }
                Op::Online { device, online } => {
                    network.host(&address(device)).unwrap().set_online(online);
                }
            }
        }
        let journal = media.lock().unwrap().journal.clone();
        let decoded = decode_journal(&journal).unwrap();
        prop_assert_eq!(decoded.valid_len, journal.len());
        let mut history: BTreeMap<Id, Vec<DeploymentState>> = BTreeMap::new();
        for record in decoded.records {
            if let Mutation::PutDeployment(dep) = record.mutation {
                history.entry(dep.id).or_default().push(dep.state);
            }
        }
        for (id, states) in &history {
            prop_assert_eq!(states[0], Requested, "{} starts at {:?}", id, states);
            for pair in states.windows(2) {
                prop_assert!(
                    pair[0] == pair[1] || LEGAL.contains(&(pair[0], pair[1])),
                    "{} took {:?} in {:?}", id, pair, states
                );
            }
        }
    }

    /// Each registration takes exactly one branch: deployments attached, or
    /// the device left pending. A fresh device deploys iff a rule created
    /// something for it.
    #[test]
    fn discovery_is_total(
        rules in proptest::collection::vec(proptest::collection::vec(0..4usize, 0..3), 0..4),
        devices in proptest::collection::vec(proptest::collection::vec(0..4usize, 0..4), 1..6),
        online in proptest::collection::vec(any::<bool>(), 6),
    ) {
        let (plane, network, _clock) = plane_on(Store::in_memory());
        let f = function(&plane, "f");
        for predicate in &rules {
            let predicate = predicate.iter().map(|&i| TAGS[i].to_owned()).collect();
            let template = BTreeMap::from([(
                "port".to_owned(),
                BindingSource::Literal(ParamValue::Integer(3)),
            )]);
            plane.registry().create_autodeploy_rule(predicate, &f, template).unwrap();
        }
        for (i, caps) in devices.iter().enumerate() {
            let host = network.add_host(SimHost::new(&address(i), &["python"]));
            host.set_online(online[i]);
            let caps = tags(caps);
            let matching = plane
                .registry()
                .list_autodeploy_rules()
                .iter()
                .filter(|r| r.matches(&caps))
                .count();
            let onboarding = plane.register_device(&address(i), caps).unwrap();
            let reg = &onboarding.registration;
            prop_assert_eq!(reg.created.len(), matching);
            match reg.branch {
                DiscoveryBranch::Deploy => {
                    prop_assert!(!reg.created.is_empty());
                    prop_assert_eq!(onboarding.deploys.len(), matching);
                }
                DiscoveryBranch::Pending => {
                    prop_assert!(reg.created.is_empty());
                    prop_assert_eq!(onboarding.device.status, DeviceStatus::Pending);
                }
            }
        }
    }

    /// The pending list equals a scan of every stored device.
    #[test]
    fn pending_list_matches_a_store_scan(
        devices in proptest::collection::vec((proptest::collection::vec(0..4usize, 0..3), any::<bool>()), 1..8),
        assign in proptest::collection::vec(0..8usize, 0..4),
    ) {
        let (plane, network, _clock) = plane_on(Store::in_memory());
        let f = function(&plane, "f");
        plane
            .registry()
            .create_autodeploy_rule(vec!["relay".into()], &f, BTreeMap::new())
            .unwrap();
        for (i, (caps, online)) in devices.iter().enumerate() {
            network.add_host(SimHost::new(&address(i), &["python"])).set_online(*online);
            plane.register_device(&address(i), tags(caps)).unwrap();
        }
        for i in assign {
            if let Some(dev) = plane.registry().list_devices(None).get(i) {
                let _ = plane.assign_deployment(&dev.id, &f, &Default::default());
            }
        }
        let listed: Vec<Id> = plane
            .registry()
            .list_pending_devices()
            .into_iter()
            .map(|d| d.id)
            .collect();
        let mut scanned: Vec<Id> = plane
            .store()
            .lock()
            .unwrap()
            .state()
            .devices
            .values()
            .filter(|d| d.status == DeviceStatus::Pending)
            .map(|d| d.id.clone())
            .collect();
        let mut sorted = listed.clone();
        sorted.sort();
        scanned.sort();
        prop_assert_eq!(sorted, scanned);
    }

    /// Range queries return the samples a linear scan keeps with
    /// `from <= t < to`, in timestamp order.
    #[test]
    fn telemetry_queries_match_a_linear_scan(
        batches in proptest::collection::vec(proptest::collection::vec((0..40i64, -5..5i32), 0..8), 1..6),
        from in proptest::option::of(0..45i64),
        span in proptest::option::of(0..45i64),
    ) {
        let (plane, network, _clock) = plane_on(Store::in_memory());
        network.add_host(SimHost::new(&address(0), &["python"]));
        let dev = plane.register_device(&address(0), Vec::new()).unwrap().device.id;
        let at = |s: i64| VirtualClock::epoch() + Duration::seconds(s);
        let mut all = Vec::new();
        for batch in &batches {
            let mut batch = batch.clone();
            batch.sort_by_key(|&(t, _)| t);
            let samples: Vec<Sample> = batch
                .iter()
                .map(|&(t, v)| Sample::new(at(t), v as f64))
                .collect();
            all.extend(samples.iter().cloned());
            plane
                .telemetry()
                .ingest(TelemetryUpload { device_id: dev.clone(), metric: "m".into(), samples })
                .unwrap();
        }
        let from_ts = from.map(at);
        let to_ts = match (from, span) {
            (_, None) => None,
            (f, Some(s)) => Some(at(f.unwrap_or(0) + s)),
        };
        let mut expected: Vec<Sample> = all
            .into_iter()
            .filter(|s| from_ts.is_none_or(|f| f <= s.timestamp))
            .filter(|s| to_ts.is_none_or(|t| s.timestamp < t))
            .collect();
        expected.sort_by_key(|s| s.timestamp);
        let got = plane.telemetry().query_telemetry(&dev, "m", from_ts, to_ts).unwrap();
        prop_assert_eq!(got, expected);
    }
}
