use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mfcnet::runner::{run_plant_half, run_server_half, HalfOptions};
use mfcnet::scenarios::{load_scenarios, JoystickSource, ReferenceKind};
use mfcnet::{
    bridge, catalog, compute_qos, emit_plots, find, Error, Mode, Result, RunMode, RunOptions, RunTelemetry,
    ScenarioSpec, TelemetryRow, UdpEndpoint,
};

#[derive(Parser)]
#[command(name = "mfcnet", version = mfcnet::metrics::BUILD, about = "Model-free control over a lossy network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List catalog scenario ids.
    List,
    /// Print a scenario as TOML.
    Show {
        id: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a scenario and write telemetry, plots and qos.json.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_enum, default_value_t = ModeArg::Lockstep)]
        mode: ModeArg,
        /// Pace ticks against the wall clock (udp-loopback only; udp always is).
        #[arg(long)]
        realtime: bool,
        #[arg(long, default_value = "127.0.0.1:47001")]
        plant_addr: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:47002")]
        server_addr: SocketAddr,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Plant half of a two-process UDP run.
    Plant {
        #[arg(long)]
        listen: String,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Control server half of a two-process UDP run.
    Serve {
        #[arg(long)]
        plant: String,
        #[arg(long, default_value = "0.0.0.0:0")]
        bind: String,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Realtime loopback run that streams telemetry to websocket clients.
    Bridge {
        #[arg(long)]
        ws_port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        ws_host: String,
        /// Steer the reference from the first client's joystick.
        #[arg(long)]
        live: bool,
        /// Seconds to wait for a client before starting.
        #[arg(long)]
        wait_client: Option<f64>,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Rerun a joystick scenario with a recorded axis trace.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, default_value = "joy-5")]
    scenario: String,
    #[arg(long, env = "MFC_NET_SEED")]
    seed: Option<String>,
    /// Measurement loss probability.
    #[arg(long)]
    loss_p1: Option<String>,
    /// Control loss probability.
    #[arg(long)]
    loss_p2: Option<String>,
    /// Scenario file searched before the catalog.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Lockstep,
    UdpLoopback,
    Udp,
}

struct Resolved {
    spec: ScenarioSpec,
    overrides: Vec<(String, String)>,
}

fn lookup(id: &str, config: Option<&Path>) -> Result<ScenarioSpec> {
    if let Some(path) = config {
        if let Some(s) = load_scenarios(path)?.into_iter().find(|s| s.id == id) {
            return Ok(s);
        }
    }
    find(id).ok_or_else(|| Error::config("scenario", format!("unknown scenario '{id}'")))
}

fn parse_override<T: std::str::FromStr>(flag: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::config(flag, format!("cannot parse '{raw}'")))
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<Resolved> {
        let mut spec = lookup(&self.scenario, self.config.as_deref())?;
        let mut overrides = Vec::new();
        if let Some(raw) = &self.seed {
            spec.seed = parse_override("seed", raw)?;
            overrides.push(("seed".into(), raw.clone()));
        }
        if let Some(raw) = &self.loss_p1 {
            spec.faults.fault1_rate = parse_override("loss-p1", raw)?;
            overrides.push(("loss-p1".into(), raw.clone()));
        }
        if let Some(raw) = &self.loss_p2 {
            spec.faults.fault2_rate = parse_override("loss-p2", raw)?;
            overrides.push(("loss-p2".into(), raw.clone()));
        }
        spec.validate()?;
        Ok(Resolved { spec, overrides })
    }
}

fn resolve_addr(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .map_err(|e| Error::config("address", format!("{addr}: {e}")))?
        .next()
        .ok_or_else(|| Error::config("address", format!("{addr} does not resolve")))
}

fn write_outputs(tel: &RunTelemetry, spec: &ScenarioSpec, out: &Path) -> Result<()> {
    let qos = compute_qos(tel, spec);
    let mut files = emit_plots(tel, out)?;
    let path = out.join("qos.json");
    std::fs::write(&path, qos.to_json()).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    files.push(path);
    for f in &files {
        println!("wrote {}", f.display());
    }
    println!(
        "{}: rmse {:.4}  iae {:.3}  p1 {:.4}  p2 {:.4}",
        spec.id, qos.rmse_tracking, qos.iae, qos.realized_loss_plant_to_server, qos.realized_loss_server_to_plant
    );
    Ok(())
}

fn require_joystick(spec: &ScenarioSpec) -> Result<()> {
    if spec.reference.kind != ReferenceKind::FilteredJoystick {
        return Err(Error::config(
            "scenario",
            format!("'{}' does not take a joystick reference", spec.id),
        ));
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::List => {
            for s in catalog() {
                println!("{:<10} {}", s.id, s.description);
            }
        }
        Command::Show { id, config } => print!("{}", lookup(&id, config.as_deref())?.to_toml()?),
        Command::Run { scenario, mode, realtime, plant_addr, server_addr, output } => {
            let Resolved { spec, mut overrides } = scenario.resolve()?;
            let mode = match mode {
                ModeArg::Lockstep => Mode::Lockstep,
                ModeArg::UdpLoopback => Mode::UdpLoopback,
                ModeArg::Udp => Mode::UdpRemote { plant_addr, server_addr },
            };
            if realtime {
                overrides.push(("realtime".into(), "true".into()));
            }
            let mut opts = RunOptions::new(RunMode::new(mode, realtime));
            opts.overrides = overrides;
            let tel = mfcnet::run_with(&spec, opts)?;
            write_outputs(&tel, &spec, &output.out)?;
        }
        Command::Plant { listen, scenario, output } => {
            let Resolved { spec, overrides } = scenario.resolve()?;
            let ep = UdpEndpoint::bind(resolve_addr(&listen)?)?;
            log::info!("plant listening on {}", ep.local_addr()?);
            let opts = HalfOptions { overrides, ..HalfOptions::default() };
            let tel = run_plant_half(&spec, ep, &opts, None)?;
            write_outputs(&tel, &spec, &output.out)?;
        }
        Command::Serve { plant, bind, scenario } => {
            let Resolved { spec, overrides } = scenario.resolve()?;
            let mut ep = UdpEndpoint::bind(resolve_addr(&bind)?)?;
            ep.set_peer(resolve_addr(&plant)?);
            let opts = HalfOptions { overrides, ..HalfOptions::default() };
            let log = run_server_half(&spec, ep, &opts, None, None)?;
            println!(
                "{}: served {} ticks, {} measurements accepted, {} rejected",
                spec.id,
                log.outputs.iter().flatten().count(),
                log.accepted,
                log.rejected
            );
        }
        Command::Bridge { ws_port, ws_host, live, wait_client, scenario, output } => {
            let Resolved { mut spec, mut overrides } = scenario.resolve()?;
            if live {
                require_joystick(&spec)?;
                spec.reference.joystick = Some(JoystickSource::Live);
                overrides.push(("live".into(), "true".into()));
            }
            let gate = bridge::serve_bridge((ws_host.as_str(), ws_port), &spec.id, spec.sampling_period)?;
            println!("bridge listening on ws://{}", gate.local_addr());
            if let Some(secs) = wait_client {
                if !gate.wait_for_client(Duration::from_secs_f64(secs.max(0.0))) {
                    log::warn!("no client after {secs}s, starting anyway");
                }
            }
            let mut publish = |row: &TelemetryRow| gate.publish(row);
            let mut opts = RunOptions::new(RunMode::new(Mode::UdpLoopback, true));
            opts.overrides = overrides;
            opts.joystick = live.then(|| gate.joystick());
            opts.on_row = Some(&mut publish);
            let tel = mfcnet::run_with(&spec, opts)?;
            gate.shutdown();
            write_outputs(&tel, &spec, &output.out)?;
        }
        Command::Replay { trace, scenario, output } => {
            let Resolved { mut spec, mut overrides } = scenario.resolve()?;
            require_joystick(&spec)?;
            spec.reference.joystick = Some(JoystickSource::RecordedTrace(trace.clone()));
            overrides.push(("trace".into(), trace.display().to_string()));
            let mut opts = RunOptions::new(RunMode::lockstep());
            opts.overrides = overrides;
            let tel = mfcnet::run_with(&spec, opts)?;
            write_outputs(&tel, &spec, &output.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config { path, .. } = &e {
                if path == "scenario" {
                    eprintln!("available scenarios:");
                    for s in catalog() {
                        eprintln!("  {}", s.id);
                    }
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
