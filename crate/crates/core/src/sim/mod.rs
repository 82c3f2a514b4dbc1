//! The in-process fleet simulator: scripted scenarios over simulated devices
//! and the deployment benchmark.

mod bench;
mod bundled;
mod fleet;
mod run;
mod scenario;

pub use bench::{measure_deployment, resident_kb, BenchError, DeploymentRow, DeploymentTable};
pub use bundled::{
    bundled, BUNDLED_NAMES, CAMERA_RECORDER, MOTION_MONITOR, RELAY_SWITCH, TEMPERATURE_MONITOR,
};
pub use fleet::{
    AgentRouter, AgentSettings, ClockMode, DirectLink, Fleet, SimClock, SimDevice, AGENT_ROOT,
    CONTROL_PLANE_URL,
};
pub use run::{
    check, run_scenario, Artifact, DeploymentSummary, DeviceReport, RuleTime, RunOptions,
    ScenarioReport, TelemetrySummary, Totals,
};
pub use scenario::{
    ActionSpec, AssignmentSpec, AutoDeploySpec, DeviceSpec, EventSpec, Expectations,
    FunctionSource, GeneratorSpec, RuleSpec, Scenario,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario setup failed: {0}")]
    Install(String),
    #[error("{} expectation(s) not met:\n  {}", diff.len(), diff.join("\n  "))]
    Assertion {
        report: Box<ScenarioReport>,
        diff: Vec<String>,
    },
}
