//! Function scripts shipped with the simulator and the benchmarks.

use crate::model::{FunctionSpec, ParamKind, ParamSpec, ParamValue};

pub const MOTION_MONITOR: &str = include_str!("../../assets/motion-monitor.py");
pub const CAMERA_RECORDER: &str = include_str!("../../assets/camera-recorder.py");
pub const RELAY_SWITCH: &str = include_str!("../../assets/relay-switch.py");
pub const TEMPERATURE_MONITOR: &str = include_str!("../../assets/temperature-monitor.py");

pub const BUNDLED_NAMES: [&str; 4] = [
    "motion-monitor",
    "camera-recorder",
    "relay-switch",
    "temperature-monitor",
];

fn interval() -> ParamSpec {
    ParamSpec::optional(
        "interval",
        ParamKind::Integer,
        Some(ParamValue::Integer(10)),
    )
}

fn python(name: &str, source: &str, template: &str, params: Vec<ParamSpec>) -> FunctionSpec {
    FunctionSpec {
        name: name.to_owned(),
        source: source.to_owned(),
        interpreter_template: template.to_owned(),
        params,
        extension: Some("py".into()),
    }
}

/// The bundled function called `name`.
pub fn bundled(name: &str) -> Option<FunctionSpec> {
    Some(match name {
        "motion-monitor" => python(
            name,
            MOTION_MONITOR,
            "python {file} {port} {interval}",
            vec![ParamSpec::required("port", ParamKind::Integer), interval()],
        ),
        "camera-recorder" => python(name, CAMERA_RECORDER, "python {file}", Vec::new()),
        "relay-switch" => python(
            name,
            RELAY_SWITCH,
            "python {file} {pin}",
            vec![ParamSpec::optional(
                "pin",
                ParamKind::Integer,
                Some(ParamValue::Integer(17)),
            )],
        ),
        "temperature-monitor" => python(
            name,
            TEMPERATURE_MONITOR,
            "python {file} {interval}",
            vec![interval()],
        ),
        _ => return None,
    })
}
