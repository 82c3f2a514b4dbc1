//! `fnfleet`: run the control plane or a device agent, play simulator
//! scenarios, benchmark deployments and inspect a running control plane.

mod inspect;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fnfleet_core::agent::{serve_actions, Agent, AgentConfig, DirWorkspace, HttpLink};
use fnfleet_core::api::{serve, Api, ApiConfig, ConfigError};
use fnfleet_core::clock::SystemClock;
use fnfleet_core::sim::{
    measure_deployment, run_scenario, ClockMode, RunOptions, Scenario, ScenarioError,
    ScenarioReport,
};

/// Exit status of a run whose checks failed.
const EXIT_FAILED: u8 = 1;
/// Exit status of bad invocations and unusable input files.
const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "fnfleet",
    version,
    about = "Function deployment for IoT device fleets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the control plane and its HTTP API.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the device agent.
    Agent {
        #[arg(long)]
        config: PathBuf,
    },
    /// Play simulator scenarios.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Run benchmarks.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Print the state of a running control plane.
    Inspect(InspectArgs),
}

#[derive(Debug, Subcommand)]
enum ScenarioCommand {
    /// Run a scenario file and print its JSON report.
    Run {
        file: PathBuf,
        /// Overrides the seed in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        /// Step a virtual clock instead of waiting in real time.
        #[arg(long)]
        virtual_clock: bool,
        /// Real length of one scenario time-unit without --virtual-clock.
        #[arg(long, default_value_t = 1000)]
        unit_ms: u64,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    /// Deploy the bundled monitor function n times and report per-deployment metrics as CSV.
    Deploy {
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        devices: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InspectTarget {
    Devices,
    Functions,
    Rules,
}

#[derive(Debug, Args)]
struct InspectArgs {
    target: InspectTarget,
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    endpoint: String,
    #[arg(long, env = "FNFLEET_ADMIN_TOKEN")]
    token: String,
    /// Print raw JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { config } => run_serve(&config),
        Command::Agent { config } => run_agent(&config),
        Command::Scenario {
            command:
                ScenarioCommand::Run {
                    file,
                    seed,
                    virtual_clock,
                    unit_ms,
                    out,
                },
        } => {
            let options = RunOptions {
                seed,
                clock: if virtual_clock {
                    ClockMode::Virtual
                } else {
                    ClockMode::Wall
                },
                wall_unit: Duration::from_millis(unit_ms.max(1)),
            };
            run_scenario_file(&file, &options, out.as_deref())
        }
        Command::Bench {
            command: BenchCommand::Deploy { n, devices, out },
        } => run_bench(n, devices, out.as_deref()),
        Command::Inspect(args) => inspect::run(args.target, &args.endpoint, &args.token, args.json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, message }) => {
            eprintln!("fnfleet: {message}");
            ExitCode::from(code)
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.to_string(),
        }
    }

    fn failed(message: impl ToString) -> Self {
        Failure {
            code: EXIT_FAILED,
            message: message.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn config_failure(err: ConfigError) -> Failure {
    match err {
        ConfigError::Storage(_) => Failure::failed(err),
        _ => Failure::usage(err),
    }
}

fn run_serve(path: &Path) -> CliResult {
    let config = ApiConfig::load(path).map_err(config_failure)?;
    let plane = config.open_control_plane().map_err(config_failure)?;
    let api = Arc::new(Api::new(Arc::new(plane), &config.admin_token));
    let server = serve(api, &config.listen, config.workers)
        .map_err(|e| Failure::failed(format!("cannot listen on {}: {e}", config.listen)))?;
    log::warn!("control plane listening on {}", server.local_addr());
    server.wait();
    Ok(())
}

fn run_agent(path: &Path) -> CliResult {
    let config = AgentConfig::load(path).map_err(config_failure)?;
    std::fs::create_dir_all(&config.workspace).map_err(|e| {
        Failure::usage(format!("cannot create {}: {e}", config.workspace.display()))
    })?;
    let listen = format!("0.0.0.0:{}", config.listen_port());
    let interval = Duration::from_millis(config.telemetry_interval_ms.max(100));
    let agent = Arc::new(Agent::new(
        config.clone(),
        Arc::new(HttpLink::new(&config.control_plane)),
        Arc::new(SystemClock),
        Arc::new(DirWorkspace::new(&config.workspace)),
    ));
    let registered = agent.boot_register().map_err(Failure::failed)?;
    log::warn!(
        "registered as {} ({:?})",
        registered.device_id,
        registered.status
    );
    let _server = serve_actions(agent.clone(), &listen)
        .map_err(|e| Failure::failed(format!("cannot listen on {listen}: {e}")))?;
    loop {
        std::thread::sleep(interval);
        if let Some(Err(err)) = agent.tick() {
            log::warn!("{err}");
        }
    }
}

fn print_report(report: &ScenarioReport, out: Option<&Path>) -> CliResult {
    let json = serde_json::to_string_pretty(report).expect("reports serialize");
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, format!("{json}\n"))
            .map_err(|e| Failure::failed(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn run_scenario_file(path: &Path, options: &RunOptions, out: Option<&Path>) -> CliResult {
    let scenario = Scenario::load(path).map_err(Failure::usage)?;
    match run_scenario(&scenario, options) {
        Ok(report) => {
            print_report(&report, out)?;
            let t = &report.totals;
            eprintln!(
                "{}: ok ({} recordings, {} notifications, {} firings, {} suppressed)",
                report.scenario, t.recordings, t.notifications, t.firings, t.suppressed
            );
            Ok(())
        }
        Err(ScenarioError::Assertion { report, diff }) => {
            print_report(&report, out)?;
            Err(Failure::failed(format!(
                "{}: {}",
                scenario.name,
                ScenarioError::Assertion { report, diff }
            )))
        }
        Err(err @ ScenarioError::Invalid(_)) => Err(Failure::usage(err)),
        Err(err) => Err(Failure::failed(err)),
    }
}

fn run_bench(n: usize, devices: usize, out: Option<&Path>) -> CliResult {
    let table = measure_deployment(n, devices).map_err(Failure::usage)?;
    let csv = table.to_csv();
    match out {
        Some(path) => std::fs::write(path, &csv)
            .map_err(|e| Failure::failed(format!("cannot write {}: {e}", path.display())))?,
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(Failure::failed)?,
    }
    let rss = |kb: Option<i64>| kb.map_or("n/a".to_owned(), |kb| format!("{kb} KiB"));
    eprintln!(
        "{n} deployments on {devices} devices: {} failed, {} bytes transferred, resident {} -> {}",
        table.failures(),
        table.total_bytes(),
        rss(table.rss_start_kb),
        rss(table.rss_end_kb)
    );
    Ok(())
}
