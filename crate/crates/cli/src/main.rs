use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use driftforge::experiments::{
    read_records, report_csv, run_model, run_sweep, write_run_artifacts, ExperimentError, ModelTag,
    ScenarioSpec, SweepSpec, SweepSummary,
};
use driftforge::stream::{generate_stream, DriftCase, GeneratorConfig, ScheduleConfig, MIN_HORIZON};

/// Evolved ensembles for drifting data streams.
#[derive(Debug, Parser)]
#[command(name = "driftforge", version)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a stream and write `stream.csv` and `schedule.json`.
    Generate(GenerateArgs),
    /// Run one model on one seeded scenario and write its run record.
    Run(RunArgs),
    /// Run a sweep and write per-run artifacts and the report.
    Sweep(SweepArgs),
    /// Recompute a sweep report from stored run records.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory (defaults to $DRIFTFORGE_OUT, then the current directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing output.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Generator config JSON; `horizon`, `case` and `schedule` may sit next to the generator fields.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// shift, moving, mixed or random (default random).
    #[arg(long)]
    case: Option<DriftCase>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Scenario JSON.
    #[arg(long, alias = "scenario")]
    config: PathBuf,
    /// single_random, multi_random, auto_single, proposed or improved.
    #[arg(long)]
    model: ModelTag,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides the scenario's drift case.
    #[arg(long)]
    case: Option<DriftCase>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Sweep JSON.
    #[arg(long)]
    config: PathBuf,
    /// First seed; runs use `seed..seed + n_runs`.
    #[arg(long)]
    seed: Option<u64>,
    /// Restricts a comparison sweep to one case.
    #[arg(long)]
    case: Option<DriftCase>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// The sweep's `summary.json`; run records are read from its directory.
    #[arg(long)]
    config: PathBuf,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GenerateConfig {
    #[serde(flatten)]
    generator: GeneratorConfig,
    #[serde(default = "default_horizon")]
    horizon: u32,
    #[serde(default)]
    case: Option<DriftCase>,
    #[serde(default)]
    schedule: ScheduleConfig,
}

fn default_horizon() -> u32 {
    50
}

/// Exit 1 for bad input, 2 for failures while working.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn invalid(path: &Path, msg: impl std::fmt::Display) -> Failure {
    Failure::Invalid(format!("{}: {msg}", path.display()))
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn classify(path: &Path, e: ExperimentError) -> Failure {
    match e {
        ExperimentError::InvalidScenario(_) | ExperimentError::OutputExists(_) => invalid(path, e),
        other => runtime(other),
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| invalid(path, e))?;
    serde_json::from_str(&text).map_err(|e| invalid(path, e))
}

fn out_root(out: &Option<PathBuf>) -> PathBuf {
    out.clone()
        .or_else(|| std::env::var_os("DRIFTFORGE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn generate(args: GenerateArgs) -> Result<(), Failure> {
    let mut cfg: GenerateConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.generator.seed = s;
    }
    let case = args.case.or(cfg.case).unwrap_or(DriftCase::Random);
    cfg.generator.validate().map_err(|e| invalid(&args.config, e))?;
    if cfg.horizon < MIN_HORIZON {
        return Err(invalid(&args.config, format!("horizon {} < {MIN_HORIZON} steps", cfg.horizon)));
    }
    let dir = out_root(&args.common.out);
    let stream_path = dir.join("stream.csv");
    if stream_path.exists() && !args.common.overwrite {
        return Err(invalid(&stream_path, "already exists (pass --overwrite to replace it)"));
    }
    let mut state = generate_stream(&cfg.generator, case, cfg.horizon, &cfg.schedule).map_err(runtime)?;
    state.advance_to(cfg.horizon).map_err(runtime)?;
    ensure_dir(&dir)?;
    let file = fs::File::create(&stream_path).map_err(|e| runtime(format!("{}: {e}", stream_path.display())))?;
    state.data().write_csv(file).map_err(runtime)?;
    write_file(&dir.join("schedule.json"), &(state.schedule_json().map_err(runtime)? + "\n"))?;
    cfg.case = Some(case);
    write_file(&dir.join("config.json"), &to_json(&cfg))?;
    println!("wrote {} rows to {}", state.data().len(), stream_path.display());
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut sc: ScenarioSpec = read_config(&args.config)?;
    if let Some(c) = args.case {
        sc.case = c;
    }
    sc.validate().map_err(|e| classify(&args.config, e))?;
    let dir = out_root(&args.common.out).join(sc.case.name()).join(args.seed.to_string());
    let record_path = dir.join(format!("{}.record.json", args.model.name()));
    if record_path.exists() && !args.common.overwrite {
        return Err(invalid(&record_path, "already exists (pass --overwrite to replace it)"));
    }
    let rec = run_model(args.model, &sc, args.seed).map_err(runtime)?;
    ensure_dir(&dir)?;
    write_run_artifacts(&dir, &rec).map_err(runtime)?;
    println!(
        "{} on {} seed {}: θ = {:.4}, ψ at training = {:.4}",
        rec.model,
        sc.case.name(),
        rec.seed,
        rec.theta,
        rec.psi_train
    );
    Ok(())
}

fn print_cells(summary: &SweepSummary) {
    for c in &summary.cells {
        println!("{:<14} {:<24} {:<9} {}", c.model.name(), c.key, c.metric, c.cell);
    }
    for g in &summary.gaps {
        println!("gap: {g}");
    }
}

fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let mut spec: SweepSpec = read_config(&args.config)?;
    if let Some(s) = args.seed {
        spec.base.seeds = (s..s + spec.base.n_runs as u64).collect();
    }
    if let Some(c) = args.case {
        spec.cases = vec![c];
        spec.base.case = c;
    }
    spec.validate().map_err(|e| classify(&args.config, e))?;
    let root = out_root(&args.common.out);
    let out = run_sweep(&spec, Some(&root), args.common.overwrite).map_err(|e| classify(&root, e))?;
    print_cells(&out.summary);
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let summary: SweepSummary = read_config(&args.config)?;
    let dir = args.config.parent().unwrap_or(Path::new("."));
    let records = read_records(dir).map_err(runtime)?;
    let again = summary.recompute(&records).map_err(runtime)?;
    let csv = report_csv(&again);
    match &args.out {
        Some(p) => write_file(p, &csv)?,
        None => {
            std::io::stdout().write_all(csv.as_bytes()).map_err(runtime)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    if let Some(k) = cli.parallel {
        if k == 0 {
            eprintln!("error: --parallel must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Invalid(m) | Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
