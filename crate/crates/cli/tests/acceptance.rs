//! Acceptance checks, run through the `fnfleet` binary where a command
//! exists. Prints one PASS or FAIL line per check and exits non-zero if any
//! check fails.

#[path = "../../core/tests/support/rule_oracle.rs"]
mod rule_oracle;

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use fnfleet_core::api::ApiClient;
use fnfleet_core::sim::MOTION_MONITOR;
use serde_json::{json, Value};

type Check = Result<String, String>;
type CheckFn = fn() -> Check;

const BIN: &str = env!("CARGO_BIN_EXE_fnfleet");

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fnfleet(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(workspace_root())
        .output()
        .expect("fnfleet runs")
}

fn ensure(condition: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if condition {
        Ok(())
    } else {
        Err(message())
    }
}

/// Runs a scenario with the virtual clock and returns its report.
fn scenario(file: &str) -> Result<(Value, Duration), String> {
    let started = Instant::now();
    let output = fnfleet(&["scenario", "run", file, "--virtual-clock"]);
    let elapsed = started.elapsed();
    ensure(output.status.success(), || {
        format!(
            "{file} exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )
    })?;
    let report = serde_json::from_slice(&output.stdout).map_err(|e| format!("{file}: {e}"))?;
    Ok((report, elapsed))
}

fn smart_home() -> Check {
    let (report, elapsed) = scenario("scenarios/smart-home.json")?;
    let totals = &report["totals"];
    let artifacts = report["artifacts"].as_array().cloned().unwrap_or_default();
    let mut cameras: Vec<&str> = artifacts
        .iter()
        .filter_map(|a| a["device"].as_str())
        .collect();
    cameras.sort();
    ensure(cameras == ["rb1", "rb2"], || {
        format!("recordings on {cameras:?}")
    })?;
    ensure(
        artifacts.iter().all(|a| a["duration"] == json!(5.0)),
        || format!("recording durations {artifacts:?}"),
    )?;
    ensure(totals["notifications"] == 1, || {
        format!("notifications {}", totals["notifications"])
    })?;
    ensure(totals["firings"] == 1, || {
        format!("firings {}", totals["firings"])
    })?;
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "2 recordings of 5 units, 1 notification, 1 firing, {} suppressed in cooldown, {:.2} s",
        totals["suppressed"],
        elapsed.as_secs_f64()
    ))
}

fn csv_rows(text: &str) -> Vec<std::collections::BTreeMap<String, String>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    lines
        .map(|line| {
            header
                .iter()
                .zip(line.split(','))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

fn number(row: &std::collections::BTreeMap<String, String>, key: &str) -> Result<u64, String> {
    row.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format!("column {key} missing or not a number in {row:?}"))
}

fn bench(
    n: usize,
    devices: usize,
) -> Result<Vec<std::collections::BTreeMap<String, String>>, String> {
    let output = fnfleet(&[
        "bench",
        "deploy",
        "--n",
        &n.to_string(),
        "--devices",
        &devices.to_string(),
    ]);
    ensure(output.status.success(), || {
        format!("bench exited with {}", output.status)
    })?;
    Ok(csv_rows(&String::from_utf8_lossy(&output.stdout)))
}

fn payload_economy() -> Check {
    ensure(MOTION_MONITOR.len() == 1024, || {
        format!("bundled script is {} bytes", MOTION_MONITOR.len())
    })?;
    let rows = bench(1, 1)?;
    let row = rows.first().ok_or("no benchmark row")?;
    let payload = number(row, "payload_bytes")?;
    let overhead = number(row, "command_bytes")? + number(row, "framing_bytes")?;
    let wall_us = number(row, "wall_us")?;
    ensure(payload == 1024, || format!("payload {payload} bytes"))?;
    ensure(overhead < 512, || format!("framing {overhead} bytes"))?;
    ensure(wall_us < 1_000_000, || {
        format!("deployment took {wall_us} us")
    })?;
    Ok(format!(
        "payload {payload} B, framing {overhead} B, deployed in {wall_us} us"
    ))
}

fn discovery_flows() -> Check {
    let expected = [
        ("scenarios/discovery-auto.json", "auto-match"),
        ("scenarios/discovery-pending.json", "pending"),
    ];
    let mut seen = Vec::new();
    for (file, branch) in expected {
        let (report, _) = scenario(file)?;
        let flow = report["devices"][0]["flow"].clone();
        let want = json!(["register", branch, "transfer", "execute"]);
        ensure(flow == want, || {
            format!("{file}: flow {flow}, expected {want}")
        })?;
        seen.push(branch);
    }
    Ok(format!(
        "register -> {{{}}} -> transfer -> execute",
        seen.join(" | ")
    ))
}

fn scale() -> Check {
    let rows = bench(100, 10)?;
    ensure(rows.len() == 100, || format!("{} rows", rows.len()))?;
    let failures = rows.iter().filter(|r| r["state"] != "running").count();
    ensure(failures == 0, || format!("{failures} failed deployments"))?;
    ensure(rows.iter().all(|r| r.contains_key("rss_delta_kb")), || {
        "no memory column".into()
    })?;
    let first = &rows[0];
    let per = number(first, "payload_bytes")?
        + number(first, "command_bytes")?
        + number(first, "framing_bytes")?;
    let mut total = 0;
    for row in &rows {
        total += number(row, "total_bytes")?;
    }
    ensure(total == 100 * per, || {
        format!("total {total} B, 100 x {per} B = {}", 100 * per)
    })?;
    Ok(format!(
        "0 failures, {total} B = 100 x {per} B, memory delta per row"
    ))
}

fn rule_oracle() -> Check {
    let started = Instant::now();
    let cases = rule_oracle::exhaustive()?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(5), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{cases} cases identical to the brute-force evaluator in {:.2} s",
        elapsed.as_secs_f64()
    ))
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(config: &Path, base: &str) -> Result<Server, String> {
    let child = Command::new(BIN)
        .args(["serve", "--config"])
        .arg(config)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| format!("cannot start the control plane: {e}"))?;
    let server = Server(child);
    let client = ApiClient::new(base, Some("t0ken"));
    let deadline = Instant::now() + Duration::from_secs(10);
    while client.get("/functions").is_err() {
        if Instant::now() > deadline {
            return Err("control plane did not come up".into());
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    Ok(server)
}

fn snapshot(client: &ApiClient, devices: &[String]) -> Result<Value, String> {
    let get = |path: &str| client.get(path).map_err(|e| format!("GET {path}: {e}"));
    let mut samples = Vec::new();
    for device in devices {
        samples.push(get(&format!(
            "/telemetry?device={device}&metric=temperature"
        ))?);
    }
    Ok(json!({
        "functions": get("/functions")?,
        "devices": get("/devices")?,
        "deployments": get("/deployments")?,
        "interop": get("/rules/interop")?,
        "autodeploy": get("/rules/autodeploy")?,
        "samples": samples,
    }))
}

fn durability() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let port = TcpListener::bind("127.0.0.1:0")
        .and_then(|l| l.local_addr())
        .map_err(|e| e.to_string())?
        .port();
    let base = format!("http://127.0.0.1:{port}");
    let config = dir.path().join("control-plane.toml");
    std::fs::write(
        &config,
        format!(
            "listen = \"127.0.0.1:{port}\"\nstorage_path = {:?}\nadmin_token = \"t0ken\"\ntransport = \"simulated\"\n",
            dir.path().join("data")
        ),
    )
    .map_err(|e| e.to_string())?;
    let admin = ApiClient::new(&base, Some("t0ken"));
    let call =
        |result: Result<Value, fnfleet_core::api::ClientError>| result.map_err(|e| e.to_string());

    let before;
    let devices: Vec<String>;
    {
        let _server = start_server(&config, &base)?;
        let mut functions = Vec::new();
        for name in ["motion-monitor", "camera-recorder", "relay-switch"] {
            let f = call(admin.post(
                "/functions",
                &json!({
                    "name": name,
                    "source": format!("# fnfleet: sensor=temperature\nprint({name:?})\n"),
                    "interpreter_template": "python {file}",
                    "params": []
                }),
            ))?;
            functions.push(f["id"].clone());
        }
        call(admin.post(
            "/rules/autodeploy",
            &json!({"capability_predicate": ["thermo"], "function_id": functions[0]}),
        ))?;
        let mut ids = Vec::new();
        for (address, caps) in [
            ("10.9.0.1:9000", json!(["thermo"])),
            ("10.9.0.2:9000", json!([])),
        ] {
            let reg = call(admin.post(
                "/devices",
                &json!({"address": address, "capabilities": caps}),
            ))?;
            ids.push(reg["device_id"].as_str().unwrap_or_default().to_owned());
        }
        call(admin.post(
            "/deployments",
            &json!({"device_id": ids[1], "function_id": functions[2], "bindings": {}}),
        ))?;
        for (i, threshold) in [30.0, -5.0].into_iter().enumerate() {
            call(admin.post(
                "/rules/interop",
                &json!({
                    "condition": {"source_device_id": ids[i], "metric": "temperature",
                                  "comparator": ">", "threshold": threshold},
                    "actions": [{"type": "notify", "message_template": "{device} {value}"}],
                    "cooldown_ms": 1000
                }),
            ))?;
        }
        let origin = chrono::DateTime::parse_from_rfc3339("2024-05-01T12:00:00Z")
            .map_err(|e| e.to_string())?;
        for batch in 0..10 {
            let device = &ids[batch % 2];
            let samples: Vec<Value> = (0..10)
                .map(|i| {
                    let n = (batch * 10 + i) as i64;
                    json!({
                        "timestamp": (origin + chrono::Duration::seconds(n)).to_rfc3339(),
                        "value": 15.0 + (n % 23) as f64,
                    })
                })
                .collect();
            call(admin.post(
                "/telemetry",
                &json!({"device_id": device, "metric": "temperature", "samples": samples}),
            ))?;
        }
        devices = ids;
        before = snapshot(&admin, &devices)?;
        // Dropping the guard kills the process without a shutdown path.
    }
    let stored: usize = before["samples"]
        .as_array()
        .map(|s| s.iter().filter_map(Value::as_array).map(Vec::len).sum())
        .unwrap_or(0);
    ensure(stored == 100, || {
        format!("{stored} samples stored before the restart")
    })?;

    let _server = start_server(&config, &base)?;
    let after = snapshot(&admin, &devices)?;
    ensure(after == before, || {
        format!("state differs after restart:\nbefore {before}\nafter  {after}")
    })?;
    let states: Vec<String> = after["deployments"]
        .as_array()
        .map(|d| d.iter().map(|x| x["state"].to_string()).collect())
        .unwrap_or_default();
    Ok(format!(
        "3 functions, 2 rules, 2 devices, 100 samples and deployments {} identical after kill and restart",
        states.join(",")
    ))
}

fn agent_idempotency() -> Check {
    let (report, _) = scenario("scenarios/agent-restart.json")?;
    let device = &report["devices"][0];
    ensure(report["totals"]["device_records"] == 1, || {
        format!("{} device records", report["totals"]["device_records"])
    })?;
    ensure(device["boots"] == 6, || {
        format!("{} boots", device["boots"])
    })?;
    let deployments = device["deployments"]
        .as_array()
        .cloned()
        .unwrap_or_default();
    ensure(
        deployments.len() == 1
            && deployments[0]["id"] == "dep-00000001"
            && deployments[0]["state"] == "running",
        || format!("deployments {deployments:?}"),
    )?;
    // A single transfer means the restarts never redeployed the function.
    let payload = &report["traffic"]["payload_bytes"];
    ensure(*payload == MOTION_MONITOR.len(), || {
        format!("payload {payload} B")
    })?;
    Ok("5 restarts, 1 device record, dep-00000001 still running, no redeploy".into())
}

fn main() {
    let checks: [(&str, CheckFn); 7] = [
        ("smart-home end-to-end", smart_home),
        ("payload economy", payload_economy),
        ("discovery flow conformance", discovery_flows),
        ("deployment scale", scale),
        ("rule engine oracle", rule_oracle),
        ("durability", durability),
        ("agent idempotency", agent_idempotency),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
