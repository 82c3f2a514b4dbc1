//! Deployment benchmark: n instances of the bundled monitor function spread
//! over simulated devices, with per-deployment byte, time and memory figures.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::clock::SystemClock;
use crate::control::ControlPlane;
use crate::deploy::{MemoryConnector, SimHost, SimNetwork, DEFAULT_BASE_DIR};
use crate::model::{DeploymentState, Id, ParamValue};
use crate::registry::bindings;
use crate::store::Store;
use crate::telemetry::LogNotifier;

use super::bundled::bundled;
use super::fleet::AgentRouter;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("the benchmark needs at least one function instance")]
    NoFunctions,
    #[error("the benchmark needs at least one device")]
    NoDevices,
    #[error("benchmark setup failed: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeploymentRow {
    pub deployment_id: Option<Id>,
    pub device_id: Id,
    pub state: DeploymentState,
    pub payload_bytes: u64,
    pub command_bytes: u64,
    pub framing_bytes: u64,
    pub total_bytes: u64,
    pub wall_us: u128,
    /// Change of the process resident set across the deployment, when the
    /// platform reports it.
    pub rss_delta_kb: Option<i64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeploymentTable {
    pub rows: Vec<DeploymentRow>,
    pub rss_start_kb: Option<i64>,
    pub rss_end_kb: Option<i64>,
}

impl DeploymentTable {
    pub fn failures(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.state != DeploymentState::Running)
            .count()
    }

    pub fn total_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.total_bytes).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            writer.serialize(row).expect("rows serialize");
        }
        String::from_utf8(writer.into_inner().expect("in-memory writer")).expect("utf-8 csv")
    }
}

/// Resident set size of this process in KiB, on platforms exposing
/// `/proc/self/status`.
pub fn resident_kb() -> Option<i64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|line| line.strip_prefix("VmRSS:"))?
        .split_whitespace()
        .next()?
        .parse()
        .ok()
}

/// Deploys `n` motion monitors round-robin over `devices` simulated devices,
/// one at a time, on the system clock. Failed deployments are rows, not
/// errors.
pub fn measure_deployment(n: usize, devices: usize) -> Result<DeploymentTable, BenchError> {
    if n == 0 {
        return Err(BenchError::NoFunctions);
    }
    if devices == 0 {
        return Err(BenchError::NoDevices);
    }
    let setup = |e: &dyn std::fmt::Display| BenchError::Setup(e.to_string());
    let network = Arc::new(SimNetwork::new());
    let plane = ControlPlane::open(
        Store::in_memory(),
        Arc::new(SystemClock),
        Arc::new(MemoryConnector::new(network.clone())),
        DEFAULT_BASE_DIR,
        Arc::new(AgentRouter::new(network.clone())),
        Arc::new(LogNotifier),
    );
    let spec = bundled("motion-monitor").expect("bundled monitor");
    let function = plane
        .registry()
        .create_function(spec)
        .map_err(|e| setup(&e))?;
    let mut device_ids = Vec::with_capacity(devices);
    for index in 0..devices {
        let address = format!("10.1.{}.{}:9000", index / 250, index % 250 + 1);
        network.add_host(SimHost::new(&address, &["python"]));
        let onboarding = plane
            .register_device(&address, Vec::new())
            .map_err(|e| setup(&e))?;
        device_ids.push(onboarding.device.id);
    }
    let params = bindings([("port", ParamValue::Integer(4))]);
    let rss_start_kb = resident_kb();
    let mut rows = Vec::with_capacity(n);
    for index in 0..n {
        let device_id = device_ids[index % devices].clone();
        let before = network.traffic();
        let rss_before = resident_kb();
        let started = Instant::now();
        let result = plane.assign_deployment(&device_id, &function.id, &params);
        let wall_us = started.elapsed().as_micros();
        let rss_delta_kb = rss_before.zip(resident_kb()).map(|(a, b)| b - a);
        let traffic = network.traffic().since(&before);
        let (deployment_id, state, error) = match result {
            Ok(report) => (
                Some(report.deployment.id),
                report.deployment.state,
                report.error,
            ),
            Err(err) => (None, DeploymentState::Failed, Some(err.to_string())),
        };
        rows.push(DeploymentRow {
            deployment_id,
            device_id,
            state,
            payload_bytes: traffic.payload_bytes,
            command_bytes: traffic.command_bytes,
            framing_bytes: traffic.framing_bytes,
            total_bytes: traffic.total(),
            wall_us,
            rss_delta_kb,
            error,
        });
    }
    Ok(DeploymentTable {
        rows,
        rss_start_kb,
        rss_end_kb: resident_kb(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_deployment_moves_one_kilobyte_of_payload() {
        let table = measure_deployment(1, 1).unwrap();
        assert_eq!(table.rows.len(), 1);
        let row = &table.rows[0];
        assert_eq!(row.state, DeploymentState::Running);
        assert_eq!(row.payload_bytes, 1024);
        assert!(row.framing_bytes + row.command_bytes < 512);
    }

    #[test]
    fn zero_instances_are_rejected() {
        assert_eq!(measure_deployment(0, 3), Err(BenchError::NoFunctions));
        assert_eq!(measure_deployment(3, 0), Err(BenchError::NoDevices));
    }

    #[test]
    fn csv_has_a_header_and_one_line_per_row() {
        let table = measure_deployment(3, 2).unwrap();
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("deployment_id,device_id,state,payload_bytes"));
        assert!(lines[1].contains(",running,1024,"));
    }
}
