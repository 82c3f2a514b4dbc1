//! A control plane on the file journal comes back after a restart with the
//! same state and the same query answers.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use chrono::Duration;
use fnfleet_core::clock::VirtualClock;
use fnfleet_core::control::ControlPlane;
use fnfleet_core::deploy::{MemoryConnector, SimHost, SimNetwork};
use fnfleet_core::model::BindingSource;
use fnfleet_core::sim::bundled;
use fnfleet_core::store::{JournalBackend, Store, StoreState};
use fnfleet_core::telemetry::{
    Action, ActionClient, ActionReply, ActionRequest, Comparator, Condition, InteropRuleSpec,
    RecordingNotifier, Sample, TelemetryUpload,
};

struct Accepting;

impl ActionClient for Accepting {
    fn invoke(&self, _: &str, _: &ActionRequest) -> Result<ActionReply, String> {
        Ok(ActionReply::ok("done"))
    }
}

fn open(dir: &Path) -> ControlPlane {
    let network = Arc::new(SimNetwork::new());
    for address in ["10.0.0.1:9000", "10.0.0.2:9000"] {
        network.add_host(SimHost::new(address, &["python"]));
    }
    ControlPlane::open(
        Store::open(Box::new(JournalBackend::open(dir, true).unwrap())).unwrap(),
        Arc::new(VirtualClock::new()),
        Arc::new(MemoryConnector::new(network)),
        "/opt/fnfleet",
        Arc::new(Accepting),
        Arc::new(RecordingNotifier::new()),
    )
}

fn state(plane: &ControlPlane) -> StoreState {
    plane.store().lock().unwrap().state().clone()
}

#[test]
fn state_and_queries_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (before, devices, answers) = {
        let plane = open(dir.path());
        let registry = plane.registry();
        let monitor = registry
            .create_function(bundled("motion-monitor").unwrap())
            .unwrap();
        registry
            .create_function(bundled("camera-recorder").unwrap())
            .unwrap();
        registry
            .create_function(bundled("relay-switch").unwrap())
            .unwrap();
        registry
            .create_autodeploy_rule(
                vec!["pir-motion".into()],
                &monitor.id,
                BTreeMap::from([(
                    "port".to_owned(),
                    BindingSource::Attribute {
                        attr: "pir-port".into(),
                    },
                )]),
            )
            .unwrap();
        let a = plane
            .register_device(
                "10.0.0.1:9000",
                vec!["pir-motion;pir-port=4".parse().unwrap()],
            )
            .unwrap()
            .device
            .id;
        let b = plane
            .register_device("10.0.0.2:9000", vec!["relay".parse().unwrap()])
            .unwrap()
            .device
            .id;
        for (comparator, threshold, actions) in [
            (
                Comparator::Ge,
                1.0,
                vec![Action::notify("motion on {device}")],
            ),
            (
                Comparator::Lt,
                -3.0,
                vec![Action::invoke(&b, "on", serde_json::json!({}))],
            ),
        ] {
            plane
                .telemetry()
                .create_rule(InteropRuleSpec {
                    condition: Condition {
                        source_device_id: a.clone(),
                        metric: "motion".into(),
                        comparator,
                        threshold,
                    },
                    actions,
                    cooldown_ms: 2000,
                })
                .unwrap();
        }
        let origin = VirtualClock::epoch();
        for chunk in 0..10 {
            let samples = (0..10)
                .map(|i| {
                    let n = chunk * 10 + i;
                    Sample::new(origin + Duration::seconds(n), ((n * 7) % 11 - 5) as f64)
                })
                .collect();
            plane
                .telemetry()
                .ingest(TelemetryUpload {
                    device_id: a.clone(),
                    metric: "motion".into(),
                    samples,
                })
                .unwrap();
        }
        let answers = [
            plane
                .telemetry()
                .query_telemetry(&a, "motion", None, None)
                .unwrap(),
            plane
                .telemetry()
                .query_telemetry(
                    &a,
                    "motion",
                    Some(origin + Duration::seconds(25)),
                    Some(origin + Duration::seconds(61)),
                )
                .unwrap(),
        ];
        assert_eq!(answers[0].len(), 100);
        assert_eq!(answers[1].len(), 36);
        (state(&plane), [a, b], answers)
    };

    let plane = open(dir.path());
    let after = state(&plane);
    assert_eq!(after, before);
    assert_eq!(after.functions.len(), 3);
    assert_eq!(after.interop_rules.len(), 2);
    assert_eq!(after.devices.len(), 2);
    let origin = VirtualClock::epoch();
    let all = plane
        .telemetry()
        .query_telemetry(&devices[0], "motion", None, None)
        .unwrap();
    let window = plane
        .telemetry()
        .query_telemetry(
            &devices[0],
            "motion",
            Some(origin + Duration::seconds(25)),
            Some(origin + Duration::seconds(61)),
        )
        .unwrap();
    assert_eq!([all, window], answers);
    assert_eq!(plane.telemetry().list_rules().len(), 2);
    assert!(!plane.telemetry().outcomes().is_empty());
}

#[test]
fn a_torn_tail_is_discarded_on_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let before = {
        let plane = open(dir.path());
        plane
            .registry()
            .create_function(bundled("relay-switch").unwrap())
            .unwrap();
        plane.register_device("10.0.0.2:9000", Vec::new()).unwrap();
        state(&plane)
    };
    let journal = JournalBackend::open(dir.path(), true)
        .unwrap()
        .journal_path();
    let mut bytes = std::fs::read(&journal).unwrap();
    bytes.extend_from_slice(&[40, 0, 0, 0, 9, 0]);
    std::fs::write(&journal, bytes).unwrap();
    let plane = open(dir.path());
    assert_eq!(state(&plane), before);
}
