//! `fnfleet inspect`: tables of control-plane state fetched over the API.

use fnfleet_core::api::{ApiClient, ClientError};
use serde_json::Value;

use crate::{CliResult, Failure, InspectTarget};

fn fetch(client: &ApiClient, path: &str) -> Result<Value, Failure> {
    client.get(path).map_err(|err| match err {
        ClientError::Status { status: 401, .. } => Failure::usage("the admin token was rejected"),
        other => Failure::failed(other),
    })
}

fn text(value: &Value) -> String {
    match value {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(text).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Left-aligned columns separated by two spaces.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (width, cell) in widths.iter_mut().zip(row) {
            *width = (*width).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(cell, width)| format!("{cell:<width$}"))
            .collect();
        padded.join("  ").trim_end().to_owned()
    };
    let mut out = vec![line(headers.to_vec())];
    out.extend(
        rows.iter()
            .map(|r| line(r.iter().map(String::as_str).collect())),
    );
    out.join("\n")
}

fn rows(list: &Value, columns: &[&dyn Fn(&Value) -> String]) -> Vec<Vec<String>> {
    list.as_array()
        .map(|items| {
            items
                .iter()
                .map(|item| columns.iter().map(|c| c(item)).collect())
                .collect()
        })
        .unwrap_or_default()
}

fn devices(list: &Value) -> String {
    let rows = rows(
        list,
        &[
            &|d| text(&d["id"]),
            &|d| text(&d["address"]),
            &|d| text(&d["status"]),
            &|d| text(&d["capabilities"]),
        ],
    );
    table(&["ID", "ADDRESS", "STATUS", "CAPABILITIES"], &rows)
}

fn functions(list: &Value) -> String {
    let params = |f: &Value| {
        f["params"]
            .as_array()
            .map(|ps| {
                ps.iter()
                    .map(|p| format!("{}:{}", text(&p["name"]), text(&p["kind"])))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .unwrap_or_default()
    };
    let rows = rows(
        list,
        &[
            &|f| text(&f["id"]),
            &|f| text(&f["name"]),
            &|f| text(&f["version"]),
            &|f| text(&f["interpreter_template"]),
            &params,
        ],
    );
    table(&["ID", "NAME", "VERSION", "COMMAND", "PARAMS"], &rows)
}

fn interop_rules(list: &Value) -> String {
    let condition = |r: &Value| {
        let c = &r["condition"];
        format!(
            "{}.{} {} {}",
            text(&c["source_device_id"]),
            text(&c["metric"]),
            text(&c["comparator"]),
            text(&c["threshold"])
        )
    };
    let actions = |r: &Value| {
        r["actions"]
            .as_array()
            .map(|actions| {
                actions
                    .iter()
                    .map(|a| match a["type"].as_str() {
                        Some("device_invoke") => format!(
                            "{}@{}",
                            text(&a["action_name"]),
                            text(&a["target_device_id"])
                        ),
                        _ => format!("notify({})", text(&a["message_template"])),
                    })
                    .collect::<Vec<_>>()
                    .join(", ")
            })
            .unwrap_or_default()
    };
    let rows = rows(
        list,
        &[
            &|r| text(&r["id"]),
            &condition,
            &|r| text(&r["cooldown_ms"]),
            &|r| text(&r["last_fired"]),
            &actions,
        ],
    );
    table(
        &["ID", "CONDITION", "COOLDOWN_MS", "LAST_FIRED", "ACTIONS"],
        &rows,
    )
}

fn autodeploy_rules(list: &Value) -> String {
    let rows = rows(
        list,
        &[
            &|r| text(&r["id"]),
            &|r| text(&r["capability_predicate"]),
            &|r| text(&r["function_id"]),
            &|r| r["binding_template"].to_string(),
        ],
    );
    table(&["ID", "CAPABILITIES", "FUNCTION", "BINDINGS"], &rows)
}

pub fn run(target: InspectTarget, endpoint: &str, token: &str, json: bool) -> CliResult {
    let client = ApiClient::new(endpoint, Some(token));
    let output = match target {
        InspectTarget::Devices => {
            let list = fetch(&client, "/devices")?;
            if json {
                list.to_string()
            } else {
                devices(&list)
            }
        }
        InspectTarget::Functions => {
            let list = fetch(&client, "/functions")?;
            if json {
                list.to_string()
            } else {
                functions(&list)
            }
        }
        InspectTarget::Rules => {
            let interop = fetch(&client, "/rules/interop")?;
            let autodeploy = fetch(&client, "/rules/autodeploy")?;
            if json {
                serde_json::json!({"interop": interop, "autodeploy": autodeploy}).to_string()
            } else {
                format!(
                    "interop rules\n{}\n\nauto-deploy rules\n{}",
                    interop_rules(&interop),
                    autodeploy_rules(&autodeploy)
                )
            }
        }
    };
    println!("{output}");
    Ok(())
}
