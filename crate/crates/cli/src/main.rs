use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use saltgov_core::dmdc::{replay_nmse, LtiModel};
use saltgov_core::governor::Mode;
use saltgov_core::io::{self, AdmissibleSetFile, RunManifest, RunSummary};
use saltgov_core::moas::export_slice;
use saltgov_core::scenario::{
    prepare_model, run_with_model, set_at_time, snapshot_log, ModelSpec, RunResult, ScenarioConfig,
    SchedulePreset, DEFAULT_MODEL_STATES,
};
use saltgov_core::dmdc::identify_dmdc;
use saltgov_core::Error;

#[derive(Parser)]
#[command(name = "saltgov", version, about = "Governed load-follow runs for a molten-salt loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ungoverned closed-loop run.
    Simulate(RunArgs),
    /// Identify a model from a trace CSV and print the replay error per output.
    Identify(IdentifyArgs),
    /// Governed closed-loop run.
    Govern(RunArgs),
    /// Export the admissible input slice at one state.
    MoasExport(ExportArgs),
    /// Ungoverned, constant-bound and both ramped-bound runs side by side.
    Compare(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Scenario config or a run manifest (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    constraints: Option<SchedulePreset>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Args)]
struct IdentifyArgs {
    /// Trace CSV from an ungoverned run.
    #[arg(long)]
    trace: PathBuf,
    /// Held-out trace for an extra replay check.
    #[arg(long)]
    validate: Option<PathBuf>,
    /// Comma-separated state columns.
    #[arg(long, value_delimiter = ',')]
    states: Option<Vec<String>>,
    #[arg(long)]
    rank: Option<usize>,
    /// Model JSON to write.
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Scenario config supplying the schedule, horizon, epsilon and clipping box.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    constraints: Option<SchedulePreset>,
    /// Instant whose bounds apply; also selects the trace row with --trace.
    #[arg(long, default_value_t = 0.0)]
    time: f64,
    /// Trace CSV to take the state from.
    #[arg(long, conflicts_with = "state")]
    trace: Option<PathBuf>,
    /// Comma-separated state values in physical units, in model order.
    #[arg(long, value_delimiter = ',')]
    state: Option<Vec<f64>>,
    /// Slice CSV to write.
    #[arg(long, default_value = "slice.csv")]
    out: PathBuf,
    /// Also write the admissible set as JSON.
    #[arg(long)]
    set_json: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Use the bounds at `time` for every row instead of previewing the schedule.
    #[arg(long)]
    no_preview: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
    EmptySlice(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::EmptySlice(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::EmptySlice(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e.root() {
            Error::Config { .. } | Error::Json(_) => Failure::Config(e.to_string()),
            Error::EmptySlice => Failure::EmptySlice(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn config_error(path: &Path, e: Error) -> Failure {
    Failure::Config(format!("{}: {e}", path.display()))
}

/// Config file, or the config recorded in a run manifest.
fn load_config(path: Option<&Path>) -> Result<ScenarioConfig, Failure> {
    let Some(path) = path else { return Ok(ScenarioConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| config_error(path, e.into()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| config_error(path, e.into()))?;
    let is_manifest = value.get("artifacts").is_some() && value.get("config").is_some();
    if is_manifest {
        let m: RunManifest = serde_json::from_value(value).map_err(|e| config_error(path, e.into()))?;
        Ok(m.config)
    } else {
        serde_json::from_value(value).map_err(|e| config_error(path, e.into()))
    }
}

fn apply_overrides(mut cfg: ScenarioConfig, args: &RunArgs) -> Result<ScenarioConfig, Failure> {
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(c) = args.constraints {
        cfg.constraints = c;
        cfg.schedule = None;
    }
    if let Some(h) = args.horizon {
        cfg.horizon = h;
    }
    if let Some(e) = args.epsilon {
        cfg.epsilon = e;
    }
    if let Some(r) = args.rank {
        match &mut cfg.model {
            ModelSpec::Identify { rank, .. } => *rank = Some(r),
            ModelSpec::Inline(_) => return Err(Failure::Config("--rank needs a model identified from a trajectory".into())),
        }
    }
    cfg.validate().map_err(Failure::from)?;
    Ok(cfg)
}

fn print_summary(name: &str, result: &RunResult, summary: &RunSummary) {
    println!("run {name}: mode {}, {} steps", result.config.mode, summary.steps);
    println!("  {:<18} {:>14} {:>10}", "constraint", "max violation", "steps");
    for c in &summary.constraints {
        let flag = if c.max_violation > 0.0 { "  VIOLATED" } else { "" };
        println!("  {:<18} {:>14.6} {:>10}{flag}", c.label, c.max_violation, c.steps_violated);
    }
    let flags: Vec<String> = summary.flags.iter().map(|(k, v)| format!("{k} {v}")).collect();
    println!("  governor steps: {}", flags.join(", "));
    if let Some(k) = &summary.kappa {
        println!("  kappa: min {:.6}, mean {:.6}, limited on {} steps", k.min, k.mean, k.limited_steps);
    }
    if !summary.active_rows.is_empty() {
        let mut rows: Vec<_> = summary.active_rows.iter().collect();
        rows.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        println!("  most frequently active rows:");
        for (label, n) in rows.iter().take(5) {
            println!("    {label:<32} {n}");
        }
    }
    if let Some(kkt) = summary.max_kkt_residual {
        println!("  max KKT residual {kkt:.3e}");
    }
    for w in &result.moas_warnings {
        println!("  warning: {w}");
    }
}

fn run_one(cfg: &ScenarioConfig, out: &Path, name: &str, model: Option<LtiModel>) -> Result<(), Failure> {
    let (params, gains) = cfg.resolve_loop()?;
    let model = match model {
        Some(m) => Some(m),
        None if cfg.mode == Mode::Bypass && cfg.slice_times.is_empty() => None,
        None => Some(prepare_model(cfg, &params, gains)?),
    };
    let result = run_with_model(cfg, &params, gains, model)?;
    let (artifacts, manifest) = io::write_run(out, &result)?;
    print_summary(name, &result, &manifest.summary);
    println!("  wrote {}", artifacts.manifest_json.display());
    Ok(())
}

fn cmd_run(args: &RunArgs, force_bypass: bool) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg = apply_overrides(cfg, args)?;
    if force_bypass {
        cfg.mode = Mode::Bypass;
    }
    let name = cfg.name.clone();
    run_one(&cfg, &args.out, &name, None)
}

fn thread_cap() -> usize {
    let default = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::env::var("SALTGOV_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0).unwrap_or(default)
}

fn cmd_compare(args: &RunArgs) -> Result<(), Failure> {
    let base = apply_overrides(load_config(args.config.as_deref())?, args)?;
    let governed = if base.mode == Mode::Bypass { Mode::Cg } else { base.mode };
    let (params, gains) = base.resolve_loop()?;
    let model = prepare_model(&base, &params, gains)?;
    let runs: Vec<(String, ScenarioConfig)> = [
        ("ungoverned", Mode::Bypass, SchedulePreset::Constant),
        ("constant", governed, SchedulePreset::Constant),
        ("increasing", governed, SchedulePreset::RampUp),
        ("decreasing", governed, SchedulePreset::RampDown),
    ]
    .into_iter()
    .map(|(name, mode, preset)| {
        let mut cfg = ScenarioConfig { mode, constraints: preset, schedule: None, gains: Some(gains), ..base.clone() };
        cfg.name = format!("{}-{name}", base.name);
        (name.to_string(), cfg)
    })
    .collect();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary, Failure>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    let workers = thread_cap().min(runs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= runs.len() {
                    break;
                }
                let (name, cfg) = &runs[i];
                let res = run_with_model(cfg, &params, gains, Some(model.clone()))
                    .and_then(|r| io::write_run(&args.out.join(name), &r))
                    .map(|(_, manifest)| manifest.summary)
                    .map_err(Failure::from);
                results.lock().expect("results lock")[i] = Some(res);
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    for ((name, _), res) in runs.iter().zip(results) {
        let summary = res.expect("every run finished")?;
        println!("{name}:");
        for c in &summary.constraints {
            println!("  {:<18} max violation {:>10.6}  steps {}", c.label, c.max_violation, c.steps_violated);
        }
        let flags: Vec<String> = summary.flags.iter().map(|(k, v)| format!("{k} {v}")).collect();
        println!("  governor steps: {}", flags.join(", "));
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_identify(args: &IdentifyArgs) -> Result<(), Failure> {
    let table = io::read_trace_file(&args.trace)?;
    let states: Vec<String> = args
        .states
        .clone()
        .unwrap_or_else(|| DEFAULT_MODEL_STATES.iter().map(|s| s.to_string()).collect());
    let log = snapshot_log(&table, &states)?;
    let id = identify_dmdc(&log, &saltgov_core::scenario::dmdc_options(args.rank))?;
    let mut reports = vec![("training", replay_nmse(&id.model, &log)?)];
    if let Some(path) = &args.validate {
        let held_out = snapshot_log(&io::read_trace_file(path)?, &states)?;
        reports.push(("validation", replay_nmse(&id.model, &held_out)?));
    }
    io::write_json(&args.out, &id.model)?;
    println!(
        "identified {} states, rank {}, spectral radius {:.6}",
        id.model.n_states(),
        id.diagnostics.retained_rank,
        id.model.spectral_radius()
    );
    print!("  {:<10}", "output");
    for (name, _) in &reports {
        print!(" {name:>14}");
    }
    println!();
    for (i, out) in id.model.output_names.iter().enumerate() {
        print!("  {out:<10}");
        for (_, nmse) in &reports {
            print!(" {:>14.3e}", nmse[i]);
        }
        println!();
    }
    for w in &id.diagnostics.warnings {
        println!("  warning: {w}");
    }
    println!("  wrote {}", args.out.display());
    Ok(())
}

fn cmd_moas_export(args: &ExportArgs) -> Result<(), Failure> {
    let model: LtiModel = io::read_json(&args.model).map_err(|e| config_error(&args.model, e))?;
    let state: Vec<f64> = match (&args.state, &args.trace) {
        (Some(s), _) => s.clone(),
        (None, Some(path)) => {
            let table = io::read_trace_file(path)?;
            let k = table
                .time
                .iter()
                .position(|t| (t - args.time).abs() < 1e-6)
                .ok_or_else(|| Failure::Config(format!("no trace row at t = {}", args.time)))?;
            model
                .state_names
                .iter()
                .map(|n| table.column(n).map(|c| c[k]).ok_or_else(|| Failure::Config(format!("trace has no column {n}"))))
                .collect::<Result<_, _>>()?
        }
        (None, None) => model.reference.states.clone(),
    };
    if state.len() != model.n_states() {
        return Err(Failure::Config(format!("state has {} values, model has {} states", state.len(), model.n_states())));
    }
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(c) = args.constraints {
        cfg.constraints = c;
        cfg.schedule = None;
    }
    if let Some(h) = args.horizon {
        cfg.horizon = h;
    }
    if let Some(e) = args.epsilon {
        cfg.epsilon = e;
    }
    if args.no_preview {
        cfg.bound_preview = false;
    }
    cfg.validate()?;
    let set = set_at_time(&model, &cfg.schedule(), args.time, &cfg.moas_options(), cfg.bound_preview)?;
    if let Some(path) = &args.set_json {
        io::write_json(path, &AdmissibleSetFile::new(&set, &model))?;
    }
    for w in &set.warnings {
        eprintln!("warning: {w}");
    }
    let x = model.state_deviation(&state);
    let polygon = export_slice(&set, &x, &cfg.slice_box).map_err(|e| match e {
        Error::EmptySlice => Failure::EmptySlice(format!("admissible slice at t = {} is empty", args.time)),
        other => Failure::from(other),
    })?;
    io::write_slice(std::io::BufWriter::new(std::fs::File::create(&args.out).map_err(Error::from)?), &polygon)?;
    println!("slice at t = {}: {} vertices, area {:.6}", args.time, polygon.vertices.len(), polygon.area());
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Simulate(a) => cmd_run(a, true),
        Command::Govern(a) => cmd_run(a, false),
        Command::Identify(a) => cmd_identify(a),
        Command::MoasExport(a) => cmd_moas_export(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
