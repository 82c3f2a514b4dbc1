//! Function orchestration for IoT fleets: a registry of functions and
//! devices, remote deployment of function scripts, telemetry ingestion with
//! condition-action rules, the device agent and a deterministic fleet
//! simulator.

pub mod agent;
pub mod api;
pub mod clock;
pub mod control;
pub mod deploy;
pub mod model;
pub mod registry;
pub mod sim;
pub mod store;
pub mod telemetry;
pub mod template;
