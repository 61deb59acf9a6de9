//! `nmqj` command-line driver.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use nmqj_core::bath::{build_rate_table, RateTableOptions};
use nmqj_core::model::{build_channels, diagonalize};
use nmqj_core::output::{write_jump_log, write_rates_csv, write_scan_csv, write_trajectory_csv};
use nmqj_core::scenarios::{run_fmo, scan_parameter, transport_measure, EngineKind, Scenario, ScenarioConfig, Trajectory};
use nmqj_core::{Error, PositivityViolation};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "nmqj", version, about = "Exciton transfer with time-dependent bath rates and non-Markovian quantum jumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tabulate γ(t, ω) for the configured bath.
    Rates(Common),
    /// Integrate the master equation with RK4.
    EvolveTcl(Common),
    /// Run a non-Markovian quantum jump ensemble.
    EvolveNmqj {
        #[command(flatten)]
        common: Common,
        /// Also write the jump events as JSON lines.
        #[arg(long)]
        jump_log: bool,
    },
    /// Scan λ, T or ω_c and report the transport measure.
    Scan(Common),
    /// Seven-site FMO populations, non-Markovian and Markovian.
    Fmo(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario JSON file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "N")]
    trajectories: Option<u64>,
    /// Time step in ps.
    #[arg(long, value_name = "PS")]
    dt: Option<f64>,
    /// Final time in ps.
    #[arg(long = "t-final", value_name = "PS")]
    t_final: Option<f64>,
    /// Use the t → ∞ rates.
    #[arg(long)]
    markovian: bool,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR", default_value = ".")]
    output: PathBuf,
    /// Worker threads; falls back to NMQJ_THREADS, then all cores.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Violation(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Other(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Other(e.into())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::Parse(_) => Self::Config(e.to_string()),
            Error::Positivity(v) => Self::Violation(describe_violation(&v)),
            other => Self::Other(other.into()),
        }
    }
}

fn describe_violation(v: &PositivityViolation) -> String {
    let fmt_state = |s: &[(f64, f64)]| {
        s.iter().map(|(re, im)| format!("{re:+.4}{im:+.4}i")).collect::<Vec<_>>().join(", ")
    };
    format!(
        "{v}\n  channel: site {} ω = {:.4} cm⁻¹, γ = {:.4e} ps⁻¹\n  target state (exciton basis): [{}]\n  source state (exciton basis): [{}]",
        v.site + 1,
        v.omega_cm,
        v.rate,
        fmt_state(&v.target),
        fmt_state(&v.source_state)
    )
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: &'static str,
    config: ScenarioConfig,
    seed: u64,
    engine: EngineKind,
    trajectories: u64,
    wall_time_s: f64,
    outputs: Vec<PathBuf>,
    /// Transport measures and similar scalar results, by name.
    measures: Vec<(String, f64)>,
    violations: Vec<String>,
}

struct Run {
    outputs: Vec<PathBuf>,
    measures: Vec<(String, f64)>,
    violations: Vec<String>,
}

impl Run {
    fn new() -> Self {
        Self { outputs: Vec::new(), measures: Vec::new(), violations: Vec::new() }
    }

    fn write(&mut self, path: PathBuf, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), Failure> {
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        f(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush()?;
        self.outputs.push(path);
        Ok(())
    }
}

fn load_config(c: &Common) -> Result<ScenarioConfig, Failure> {
    let mut cfg = ScenarioConfig::from_file(&c.config).map_err(|e| match e {
        Error::Io(io) => Failure::Config(format!("cannot read {}: {io}", c.config.display())),
        other => Failure::Config(other.to_string()),
    })?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.trajectories {
        cfg.trajectories = n;
    }
    if let Some(dt) = c.dt {
        cfg.dt = dt;
    }
    if let Some(t) = c.t_final {
        cfg.t_final = t;
        if let Some(m) = cfg.measure.as_mut() {
            m.tau = m.tau.min(t);
        }
    }
    if c.markovian {
        cfg.markovian = true;
        cfg.lamb_shift = false;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn thread_count(c: &Common) -> Result<Option<usize>, Failure> {
    if let Some(n) = c.threads {
        return if n == 0 { Err(Failure::Config("--threads must be >= 1".into())) } else { Ok(Some(n)) };
    }
    match std::env::var("NMQJ_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Config(format!("NMQJ_THREADS must be a positive integer, got {s:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn temperature_tag(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{t:.0}K")
    } else {
        format!("{t}K")
    }
}

/// Configs with a temperature list run once per temperature.
fn temperature_cases(cfg: &ScenarioConfig) -> Vec<(Option<String>, ScenarioConfig)> {
    match &cfg.temperatures {
        Some(ts) if !ts.is_empty() => ts
            .iter()
            .map(|&t| (Some(temperature_tag(t)), ScenarioConfig { temperature: t, ..cfg.clone() }))
            .collect(),
        _ => vec![(None, cfg.clone())],
    }
}

fn file_name(stem: &str, tag: &Option<String>) -> String {
    match tag {
        Some(t) => format!("{stem}_{t}.csv"),
        None => format!("{stem}.csv"),
    }
}

fn record_measure(run: &mut Run, cfg: &ScenarioConfig, traj: &Trajectory, label: &str) -> Result<(), Failure> {
    if let Some(m) = cfg.measure {
        let p = transport_measure(traj, m.target - 1, m.tau)?;
        println!("{label}: P̄_{} (τ = {} ps) = {p:.6}", m.target, m.tau);
        run.measures.push((format!("{label} pbar_{}", m.target), p));
    }
    Ok(())
}

fn check_tcl_positivity(run: &mut Run, traj: &Trajectory, label: &str) {
    if traj.violates_positivity() {
        let (k, v) = traj
            .min_eigs
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |a, (k, v)| if *v < a.1 { (k, *v) } else { a });
        run.violations.push(format!("{label}: minimum eigenvalue {v:.4e} at t = {:.4} ps", traj.times[k]));
    }
}

fn cmd_rates(cfg: &ScenarioConfig, out: &Path, run: &mut Run) -> Result<(), Failure> {
    let freqs = match &cfg.frequencies {
        Some(f) => f.clone(),
        None => {
            let basis = diagonalize(&cfg.hamiltonian.build()?);
            build_channels(&basis, cfg.degeneracy_tol).iter().map(|c| c.frequency).collect()
        }
    };
    let opts = RateTableOptions { markovian: cfg.markovian, lamb_shift: false };
    let table = build_rate_table(&cfg.bath, cfg.temperature, &freqs, cfg.dt, cfg.t_final, opts)?;
    run.write(out.join("rates.csv"), |w| write_rates_csv(&table, w))
}

fn cmd_evolve(cfg: &ScenarioConfig, engine: EngineKind, jump_log: bool, out: &Path, run: &mut Run) -> Result<(), Failure> {
    let stem = match engine {
        EngineKind::Tcl => "evolve_tcl",
        EngineKind::Nmqj => "evolve_nmqj",
    };
    for (tag, case) in temperature_cases(cfg) {
        let label = tag.clone().unwrap_or_else(|| stem.to_string());
        let scenario = Scenario::new(&case)?;
        let traj = match engine {
            EngineKind::Tcl => scenario.run_tcl()?,
            EngineKind::Nmqj => scenario.run_nmqj_with(case.trajectories, case.seed, jump_log)?,
        };
        run.write(out.join(file_name(stem, &tag)), |w| write_trajectory_csv(&traj, w))?;
        if jump_log {
            let events = &traj.ensemble.as_ref().expect("jump run has ensemble data").events;
            let name = match &tag {
                Some(t) => format!("jumps_{t}.jsonl"),
                None => "jumps.jsonl".into(),
            };
            run.write(out.join(name), |w| write_jump_log(events, w))?;
        }
        record_measure(run, &case, &traj, &label)?;
        if engine == EngineKind::Tcl {
            check_tcl_positivity(run, &traj, &label);
        }
    }
    Ok(())
}

fn cmd_scan(cfg: &ScenarioConfig, out: &Path, run: &mut Run) -> Result<(), Failure> {
    let spec = cfg.scan.as_ref().ok_or_else(|| Failure::Config("scan needs a \"scan\" section".into()))?;
    if cfg.measure.is_none() {
        return Err(Failure::Config("scan needs a \"measure\" section".into()));
    }
    let values = spec.resolved_values()?;
    let rows = scan_parameter(cfg, spec.axis, &values)?;
    for r in &rows {
        if let Some(d) = &r.diagnostic {
            let kind = if r.violation { "positivity violation" } else { "failed" };
            eprintln!("{} = {}: {kind}: {d}", spec.axis.name(), r.value);
        }
    }
    if let Some(first) = rows.iter().find(|r| r.violation) {
        run.measures.push((format!("first_violation_{}", spec.axis.name()), first.value));
    }
    run.write(out.join(format!("scan_{}.csv", spec.axis.name())), |w| write_scan_csv(&rows, w))
}

fn cmd_fmo(cfg: &ScenarioConfig, only_markovian: bool, out: &Path, run: &mut Run) -> Result<(), Failure> {
    let site = match cfg.initial_state {
        nmqj_core::scenarios::InitialState::Site(s) => s,
        _ => return Err(Failure::Config("fmo needs an initial site".into())),
    };
    let models: &[(bool, &str)] = if only_markovian { &[(true, "markov")] } else { &[(false, "nm"), (true, "markov")] };
    for (tag, case) in temperature_cases(cfg) {
        for &(markovian, name) in models {
            let traj = run_fmo(&case, site, case.temperature, markovian)?;
            let stem = format!("fmo_site{site}_{name}");
            run.write(out.join(file_name(&stem, &tag)), |w| write_trajectory_csv(&traj, w))?;
            if case.engine == EngineKind::Tcl {
                check_tcl_positivity(run, &traj, &stem);
            }
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let start = Instant::now();
    let (name, common, jump_log) = match &cli.command {
        Command::Rates(c) => ("rates", c, false),
        Command::EvolveTcl(c) => ("evolve-tcl", c, false),
        Command::EvolveNmqj { common, jump_log } => ("evolve-nmqj", common, *jump_log),
        Command::Scan(c) => ("scan", c, false),
        Command::Fmo(c) => ("fmo", c, false),
    };
    let mut cfg = load_config(common)?;
    if name == "evolve-nmqj" {
        cfg.engine = EngineKind::Nmqj;
    } else if name == "evolve-tcl" {
        cfg.engine = EngineKind::Tcl;
    }
    let threads = thread_count(common)?;
    std::fs::create_dir_all(&common.output)
        .with_context(|| format!("creating output directory {}", common.output.display()))?;
    let out = common.output.as_path();

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("starting worker threads")?;
    let mut run = Run::new();
    let result = pool.install(|| match name {
        "rates" => cmd_rates(&cfg, out, &mut run),
        "evolve-tcl" => cmd_evolve(&cfg, EngineKind::Tcl, false, out, &mut run),
        "evolve-nmqj" => cmd_evolve(&cfg, EngineKind::Nmqj, jump_log, out, &mut run),
        "scan" => cmd_scan(&cfg, out, &mut run),
        _ => cmd_fmo(&cfg, common.markovian, out, &mut run),
    });
    if let Err(Failure::Violation(v)) = &result {
        run.violations.push(v.clone());
    }
    let manifest = RunManifest {
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        engine: cfg.engine,
        trajectories: cfg.trajectories,
        config: cfg,
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs: run.outputs.clone(),
        measures: run.measures.clone(),
        violations: run.violations.clone(),
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).context("serializing manifest")?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    result?;
    if !run.violations.is_empty() {
        return Err(Failure::Violation(run.violations.join("\n")));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Violation(m)) => {
            eprintln!("positivity violation:\n{m}");
            ExitCode::from(EXIT_VIOLATION)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
