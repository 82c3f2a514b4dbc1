//! Runs a scenario against an in-process fleet and checks its expectations.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{recording_duration, AgentError, Observation, RECORDINGS_DIR, RELAY_STATE};
use crate::control::FlowStep;
use crate::deploy::Traffic;
use crate::model::{DeploymentState, DeviceStatus, Id, Timestamp};
use crate::registry::bindings;
use crate::telemetry::{
    Action, ActionOutcome, Condition, InteropRuleSpec, Notification, OutcomeStatus,
};

use super::fleet::{AgentSettings, ClockMode, Fleet, SimClock, AGENT_ROOT};
use super::scenario::{ActionSpec, EventSpec, Expectations, Scenario};
use super::ScenarioError;
use crate::store::Store;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Overrides the scenario's seed.
    pub seed: Option<u64>,
    pub clock: ClockMode,
    /// Length of a time-unit in wall mode.
    pub wall_unit: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed: None,
            clock: ClockMode::Virtual,
            wall_unit: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub clock: ClockMode,
    pub duration: f64,
    pub devices: Vec<DeviceReport>,
    pub artifacts: Vec<Artifact>,
    pub notifications: Vec<Notification>,
    pub firings: Vec<RuleTime>,
    pub suppressed: Vec<RuleTime>,
    pub actions: Vec<ActionOutcome>,
    pub telemetry: TelemetrySummary,
    pub traffic: Traffic,
    pub totals: Totals,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceReport {
    pub name: String,
    pub address: String,
    pub id: Option<Id>,
    pub status: Option<DeviceStatus>,
    pub boots: u32,
    pub flow: Vec<FlowStep>,
    pub deployments: Vec<DeploymentSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relay: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeploymentSummary {
    pub id: Id,
    pub function: String,
    pub state: DeploymentState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

/// A file an action handler left on a device.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    pub device: String,
    pub path: String,
    pub bytes: usize,
    /// Recording length in time-units.
    pub duration: f64,
}

/// A rule and the event time, in time-units, it fired or was suppressed at.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleTime {
    pub rule_id: Id,
    pub at: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TelemetrySummary {
    pub batches: usize,
    pub samples: usize,
    /// Readings no running function was sampling.
    pub unmonitored: usize,
    pub dropped: u64,
    pub push_failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Totals {
    pub recordings: usize,
    pub notifications: usize,
    pub firings: usize,
    pub suppressed: usize,
    pub failed_actions: usize,
    pub failed_deployments: usize,
    /// Device records held by the control plane.
    pub device_records: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Step {
    Boot(String),
    InstallRules,
    Assign(usize),
    Restart(String),
    Reading {
        device: String,
        metric: String,
        value: f64,
    },
    Flush,
}

impl Step {
    fn rank(&self) -> u8 {
        match self {
            Step::Boot(_) => 0,
            Step::InstallRules => 1,
            Step::Assign(_) => 2,
            Step::Restart(_) => 3,
            Step::Reading { .. } => 4,
            Step::Flush => 5,
        }
    }
}

/// Seeded generator readings, rounded to milli-units so reports stay stable.
fn generated(scenario: &Scenario, seed: u64) -> Vec<(f64, Step)> {
    let mut out = Vec::new();
    for (index, g) in scenario.generators.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
        let mut k = 0u64;
        loop {
            let at = g.from + k as f64 * g.every;
            if at >= g.until {
                break;
            }
            let noise = if g.jitter > 0.0 {
                rng.gen_range(-g.jitter..=g.jitter)
            } else {
                0.0
            };
            out.push((
                at,
                Step::Reading {
                    device: g.device.clone(),
                    metric: g.metric.clone(),
                    value: ((g.base + noise) * 1000.0).round() / 1000.0,
                },
            ));
            k += 1;
        }
    }
    out
}

fn timeline(scenario: &Scenario, seed: u64) -> (Vec<(f64, Step)>, f64) {
    let mut steps: Vec<(f64, Step)> = Vec::new();
    for device in &scenario.devices {
        steps.push((device.boot_at, Step::Boot(device.name.clone())));
    }
    steps.push((0.0, Step::InstallRules));
    for (index, assignment) in scenario.assignments.iter().enumerate() {
        steps.push((assignment.at, Step::Assign(index)));
    }
    for event in &scenario.events {
        let step = match event {
            EventSpec::Reading {
                device,
                metric,
                value,
                ..
            } => Step::Reading {
                device: device.clone(),
                metric: metric.clone(),
                value: *value,
            },
            EventSpec::Restart { restart, .. } => Step::Restart(restart.clone()),
        };
        steps.push((event.at(), step));
    }
    steps.extend(generated(scenario, seed));
    let interval = scenario.telemetry_interval;
    let last = steps.iter().map(|(t, _)| *t).fold(0.0, f64::max);
    let duration = scenario.duration.unwrap_or(last + interval);
    let mut k = 1u64;
    while (k as f64) * interval <= duration {
        steps.push((k as f64 * interval, Step::Flush));
        k += 1;
    }
    if ((k - 1) as f64) * interval < duration {
        steps.push((duration, Step::Flush));
    }
    steps.retain(|(t, _)| *t <= duration);
    steps.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.rank().cmp(&b.1.rank())));
    (steps, duration)
}

struct Runner<'a> {
    scenario: &'a Scenario,
    fleet: Fleet,
    functions: BTreeMap<String, Id>,
    telemetry: TelemetrySummary,
}

fn install(message: impl Into<String>) -> ScenarioError {
    ScenarioError::Install(message.into())
}

impl Runner<'_> {
    fn device_id(&self, name: &str, what: &str) -> Result<Id, ScenarioError> {
        self.fleet
            .device_id(name)
            .ok_or_else(|| install(format!("{what}: device {name:?} is not registered")))
    }

    fn install_functions(&mut self) -> Result<(), ScenarioError> {
        let registry = self.fleet.plane().registry();
        for source in &self.scenario.functions {
            let spec = source.resolve()?;
            let name = spec.name.clone();
            let function = registry
                .create_function(spec)
                .map_err(|e| install(format!("function {name:?}: {e}")))?;
            self.functions.insert(name, function.id);
        }
        for (index, rule) in self.scenario.autodeploy.iter().enumerate() {
            registry
                .create_autodeploy_rule(
                    rule.capabilities.clone(),
                    &self.functions[&rule.function],
                    rule.bindings.clone(),
                )
                .map_err(|e| install(format!("auto-deploy rule {index}: {e}")))?;
        }
        Ok(())
    }

    fn install_rules(&self) -> Result<(), ScenarioError> {
        let unit_ms = self.fleet.clock().unit_ms() as f64;
        for (index, rule) in self.scenario.rules.iter().enumerate() {
            let what = format!("rule {index}");
            let mut actions = Vec::new();
            for action in &rule.actions {
                actions.push(match action {
                    ActionSpec::DeviceInvoke {
                        device,
                        action,
                        params,
                    } => Action::DeviceInvoke {
                        target_device_id: self.device_id(device, &what)?,
                        action_name: action.clone(),
                        params: params.clone(),
                    },
                    ActionSpec::Notify { message } => Action::notify(message),
                });
            }
            let spec = InteropRuleSpec {
                condition: Condition {
                    source_device_id: self.device_id(&rule.device, &what)?,
                    metric: rule.metric.clone(),
                    comparator: rule.comparator,
                    threshold: rule.threshold,
                },
                actions,
                cooldown_ms: (rule.cooldown * unit_ms).round() as i64,
            };
            self.fleet
                .plane()
                .telemetry()
                .create_rule(spec)
                .map_err(|e| install(format!("{what}: {e}")))?;
        }
        Ok(())
    }

    fn boot(&self, name: &str) -> Result<(), ScenarioError> {
        self.fleet
            .boot(name)
            .map(|_| ())
            .map_err(|e| install(format!("device {name:?}: {e}")))
    }

    fn step(&mut self, step: &Step) -> Result<(), ScenarioError> {
        match step {
            Step::Boot(name) | Step::Restart(name) => self.boot(name)?,
            Step::InstallRules => self.install_rules()?,
            Step::Assign(index) => {
                let assignment = &self.scenario.assignments[*index];
                let device = self.device_id(&assignment.device, "assignment")?;
                let bindings = bindings(assignment.bindings.clone());
                self.fleet
                    .plane()
                    .assign_deployment(&device, &self.functions[&assignment.function], &bindings)
                    .map_err(|e| install(format!("assignment {index}: {e}")))?;
            }
            Step::Reading {
                device,
                metric,
                value,
            } => match self.fleet.observe(device, metric, *value) {
                Ok(Observation::Buffered) => {}
                Ok(Observation::Unmonitored) => self.telemetry.unmonitored += 1,
                Err(AgentError::BufferOverflow { .. }) => {}
                Err(err) => return Err(install(format!("reading on {device:?}: {err}"))),
            },
            Step::Flush => {
                let (_, failures) = self.fleet.flush_all();
                for (device, err) in failures {
                    log::warn!("{device}: {err}");
                    self.telemetry.push_failures += 1;
                }
            }
        }
        Ok(())
    }

    fn units(&self, at: Timestamp) -> f64 {
        let clock = self.fleet.clock();
        (at - clock.origin()).num_milliseconds() as f64 / clock.unit_ms() as f64
    }

    fn report(mut self, seed: u64, duration: f64) -> ScenarioReport {
        let plane = self.fleet.plane();
        let registry = plane.registry();
        let function_names: BTreeMap<Id, String> = self
            .functions
            .iter()
            .map(|(name, id)| (id.clone(), name.clone()))
            .collect();
        let mut devices = Vec::new();
        let mut artifacts = Vec::new();
        for device in self.fleet.devices() {
            let id = device.agent().and_then(|a| a.device_id());
            let record = id.as_ref().and_then(|id| registry.get_device(id).ok());
            let deployments = id
                .as_ref()
                .map(|id| registry.list_deployments(Some(id)))
                .unwrap_or_default()
                .into_iter()
                .map(|d| DeploymentSummary {
                    function: function_names
                        .get(&d.function_id)
                        .cloned()
                        .unwrap_or_else(|| d.function_id.to_string()),
                    id: d.id,
                    state: d.state,
                    failure_reason: d.failure_reason,
                })
                .collect();
            let root = format!("{AGENT_ROOT}/");
            for path in device.host.list(&format!("{root}{RECORDINGS_DIR}/")) {
                let bytes = device.host.read(&path).map_or(0, |b| b.len());
                artifacts.push(Artifact {
                    device: device.name.clone(),
                    path: path.trim_start_matches(&root).to_owned(),
                    bytes,
                    duration: recording_duration(bytes),
                });
            }
            if let Some(agent) = device.agent() {
                self.telemetry.dropped += agent.dropped();
            }
            devices.push(DeviceReport {
                name: device.name.clone(),
                address: device.address.clone(),
                flow: id.as_ref().map(|id| plane.flow_for(id)).unwrap_or_default(),
                status: record.map(|d| d.status),
                id,
                boots: device.boots(),
                deployments,
                relay: device
                    .host
                    .read(&format!("{AGENT_ROOT}/{RELAY_STATE}"))
                    .map(|b| String::from_utf8_lossy(&b).into_owned()),
            });
        }

        let mut firings = Vec::new();
        let mut suppressed = Vec::new();
        for ingest in self.fleet.ingests() {
            self.telemetry.batches += 1;
            self.telemetry.samples += ingest.stored;
            for fired in ingest.fired.iter().filter(|f| f.action_index == 0) {
                firings.push(RuleTime {
                    rule_id: fired.rule_id.clone(),
                    at: self.units(fired.event.timestamp),
                });
            }
            for (rule_id, at) in &ingest.suppressed {
                suppressed.push(RuleTime {
                    rule_id: rule_id.clone(),
                    at: self.units(*at),
                });
            }
        }
        let actions = plane.telemetry().outcomes();
        let notifications = self.fleet.notifier().delivered();
        let totals = Totals {
            recordings: artifacts.len(),
            notifications: notifications.len(),
            firings: firings.len(),
            suppressed: suppressed.len(),
            failed_actions: actions
                .iter()
                .filter(|o| o.status == OutcomeStatus::Failed)
                .count(),
            failed_deployments: devices
                .iter()
                .flat_map(|d| &d.deployments)
                .filter(|d| d.state == DeploymentState::Failed)
                .count(),
            device_records: registry.list_devices(None).len(),
        };
        ScenarioReport {
            scenario: self.scenario.name.clone(),
            seed,
            clock: self.fleet.clock().mode(),
            duration,
            devices,
            artifacts,
            notifications,
            firings,
            suppressed,
            actions,
            telemetry: self.telemetry,
            traffic: self.fleet.network().traffic(),
            totals,
        }
    }
}

/// Boots the fleet, plays the scenario and checks its expectations. A run
/// whose expectations fail returns the report inside the error.
pub fn run_scenario(
    scenario: &Scenario,
    options: &RunOptions,
) -> Result<ScenarioReport, ScenarioError> {
    scenario.validate()?;
    let seed = options.seed.unwrap_or(scenario.seed);
    let clock = match options.clock {
        ClockMode::Virtual => SimClock::virtual_time(),
        ClockMode::Wall => SimClock::wall(options.wall_unit),
    };
    let settings = AgentSettings {
        telemetry_interval_ms: (scenario.telemetry_interval * clock.unit_ms() as f64) as u64,
        ..AgentSettings::default()
    };
    let mut fleet = Fleet::with_store(clock, Store::in_memory(), settings);
    for device in &scenario.devices {
        let interpreters: Vec<&str> = device.interpreters.iter().map(String::as_str).collect();
        fleet
            .add_device(
                &device.name,
                &device.address,
                device.capabilities.clone(),
                &interpreters,
            )
            .map_err(ScenarioError::Invalid)?;
    }
    let mut runner = Runner {
        scenario,
        fleet,
        functions: BTreeMap::new(),
        telemetry: TelemetrySummary::default(),
    };
    runner.install_functions()?;
    let (steps, duration) = timeline(scenario, seed);
    for (at, step) in &steps {
        runner.fleet.clock().advance_to(*at);
        runner.step(step)?;
    }
    let report = runner.report(seed, duration);
    let diff = check(&scenario.expect, &report);
    if diff.is_empty() {
        Ok(report)
    } else {
        Err(ScenarioError::Assertion {
            report: Box::new(report),
            diff,
        })
    }
}

/// One line per unmet expectation.
pub fn check(expect: &Expectations, report: &ScenarioReport) -> Vec<String> {
    let mut diff = Vec::new();
    let mut compare = |what: String, expected: String, actual: String| {
        if expected != actual {
            diff.push(format!("{what}: expected {expected}, got {actual}"));
        }
    };
    let device = |name: &str| report.devices.iter().find(|d| d.name == name);
    for (name, count) in &expect.recordings {
        let actual = report
            .artifacts
            .iter()
            .filter(|a| &a.device == name)
            .count();
        compare(
            format!("recordings on {name}"),
            count.to_string(),
            actual.to_string(),
        );
    }
    if let Some(duration) = expect.recording_duration {
        for artifact in &report.artifacts {
            compare(
                format!("duration of {}:{}", artifact.device, artifact.path),
                duration.to_string(),
                artifact.duration.to_string(),
            );
        }
    }
    let totals = [
        (
            "notifications",
            expect.notifications,
            report.totals.notifications,
        ),
        ("firings", expect.firings, report.totals.firings),
        ("suppressed", expect.suppressed, report.totals.suppressed),
        (
            "failed actions",
            expect.failed_actions,
            report.totals.failed_actions,
        ),
    ];
    for (what, expected, actual) in totals {
        if let Some(expected) = expected {
            compare(what.into(), expected.to_string(), actual.to_string());
        }
    }
    if let Some(expected) = expect.device_records {
        compare(
            "device records".into(),
            expected.to_string(),
            report.totals.device_records.to_string(),
        );
    }
    for (name, steps) in &expect.flows {
        let actual = device(name).map(|d| d.flow.clone()).unwrap_or_default();
        compare(format!("flow of {name}"), json(steps), json(&actual));
    }
    for (name, status) in &expect.status {
        let actual = device(name).and_then(|d| d.status);
        compare(
            format!("status of {name}"),
            json(&Some(*status)),
            json(&actual),
        );
    }
    for (name, count) in &expect.running {
        let actual = device(name).map_or(0, |d| {
            d.deployments
                .iter()
                .filter(|x| x.state == DeploymentState::Running)
                .count()
        });
        compare(
            format!("running deployments on {name}"),
            count.to_string(),
            actual.to_string(),
        );
    }
    for (name, state) in &expect.relays {
        let actual = device(name).and_then(|d| d.relay.clone());
        compare(
            format!("relay of {name}"),
            json(&Some(state.clone())),
            json(&actual),
        );
    }
    diff
}

/// Compact JSON rendering for expectation diffs.
fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn smart_home() -> serde_json::Value {
        json!({
            "name": "smart-home",
            "seed": 7,
            "devices": [
                {"name": "rb1", "address": "10.0.0.11:9000", "capabilities": ["pir-motion;pir-port=4", "camera"]},
                {"name": "rb2", "address": "10.0.0.12:9000", "capabilities": ["camera", "relay"]}
            ],
            "functions": [
                {"bundled": "motion-monitor"},
                {"bundled": "camera-recorder"},
                {"bundled": "relay-switch"}
            ],
            "autodeploy": [
                {"capabilities": ["pir-motion"], "function": "motion-monitor", "bindings": {"port": {"attr": "pir-port"}, "interval": 1}},
                {"capabilities": ["camera"], "function": "camera-recorder"},
                {"capabilities": ["relay"], "function": "relay-switch"}
            ],
            "rules": [{
                "device": "rb1", "metric": "motion", "comparator": "=", "threshold": 1, "cooldown": 5,
                "actions": [
                    {"type": "device_invoke", "device": "rb1", "action": "record", "params": {"duration": 5}},
                    {"type": "device_invoke", "device": "rb2", "action": "record", "params": {"duration": 5}},
                    {"type": "notify", "message": "motion at {device}"}
                ]
            }],
            "events": [
                {"at": 10, "device": "rb1", "metric": "motion", "value": 1},
                {"at": 12, "device": "rb1", "metric": "motion", "value": 1},
                {"at": 14, "device": "rb1", "metric": "motion", "value": 0}
            ],
            "expect": {
                "recordings": {"rb1": 1, "rb2": 1},
                "recording_duration": 5,
                "notifications": 1,
                "firings": 1,
                "suppressed": 1,
                "failed_actions": 0
            }
        })
    }

    fn run(doc: &serde_json::Value) -> Result<ScenarioReport, ScenarioError> {
        run_scenario(&Scenario::parse(&doc.to_string())?, &RunOptions::default())
    }

    #[test]
    fn smart_home_records_on_both_cameras() {
        let report = run(&smart_home()).unwrap();
        assert_eq!(report.totals.recordings, 2);
        assert_eq!(
            report.notifications[0].text,
            format!("motion at {}", report.devices[0].id.as_ref().unwrap())
        );
        assert_eq!(report.firings[0].at, 10.0);
        assert_eq!(report.suppressed[0].at, 12.0);
        assert_eq!(
            report.devices[0].flow,
            vec![
                FlowStep::Register,
                FlowStep::AutoMatch,
                FlowStep::Transfer,
                FlowStep::Execute,
                FlowStep::Transfer,
                FlowStep::Execute
            ]
        );
    }

    #[test]
    fn zero_events_produce_nothing() {
        let mut doc = smart_home();
        doc["events"] = json!([]);
        doc["expect"] = json!({});
        let report = run(&doc).unwrap();
        assert_eq!(
            report.totals,
            Totals {
                device_records: 2,
                ..Totals::default()
            }
        );
        assert!(report.artifacts.is_empty());
        assert!(report.actions.is_empty());
    }

    #[test]
    fn unregistered_rule_target_fails_at_install() {
        let mut doc = smart_home();
        doc["rules"][0]["actions"][1]["device"] = json!("rb9");
        let err = run(&doc).unwrap_err();
        assert!(matches!(err, ScenarioError::Install(_)), "{err}");
        let mut doc = smart_home();
        doc["devices"][1]["boot_at"] = json!(3);
        assert!(matches!(run(&doc).unwrap_err(), ScenarioError::Install(_)));
    }

    #[test]
    fn unmet_expectations_carry_a_diff() {
        let mut doc = smart_home();
        doc["expect"]["notifications"] = json!(2);
        match run(&doc).unwrap_err() {
            ScenarioError::Assertion { diff, report } => {
                assert_eq!(diff, vec!["notifications: expected 2, got 1"]);
                assert_eq!(report.totals.notifications, 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn same_seed_same_report() {
        let mut doc = smart_home();
        doc["generators"] = json!([{"device": "rb1", "metric": "motion", "from": 20, "until": 40, "every": 1, "base": 0.5, "jitter": 0.5}]);
        doc["expect"] = json!({});
        let a = serde_json::to_string(&run(&doc).unwrap()).unwrap();
        let b = serde_json::to_string(&run(&doc).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = run_scenario(
            &Scenario::parse(&doc.to_string()).unwrap(),
            &RunOptions {
                seed: Some(8),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_ne!(a, serde_json::to_string(&other).unwrap());
    }

    #[test]
    fn timeline_orders_by_time_then_kind() {
        let scenario = Scenario::parse(&smart_home().to_string()).unwrap();
        let (steps, duration) = timeline(&scenario, 0);
        assert_eq!(duration, 15.0);
        assert!(matches!(steps[0].1, Step::Boot(_)));
        assert_eq!(steps[2].1, Step::InstallRules);
        let reading = steps
            .iter()
            .position(|(t, s)| *t == 10.0 && s.rank() == 4)
            .unwrap();
        assert_eq!(steps[reading + 1], (10.0, Step::Flush));
        assert_eq!(steps.last().unwrap(), &(15.0, Step::Flush));
    }
}
