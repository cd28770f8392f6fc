use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use closed_defer::config::{RunConfig, SeedStreams};
use closed_defer::experiments::{
    build_dataset, run_repetitions, run_sweep, summarize, summary_header, summary_row, write_dataset, write_trace,
    Settings, SweepPoint,
};
use closed_defer::theoryprobe::{claim1_probe, remark2_probe, theorem1_probe, theorem2_flip_probe, theorem2_probe, ProbeResult};
use closed_defer::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "closed-defer", version, about = "Closed deferral pipeline experiments")]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `output.dir` or `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task dataset as CSV.
    GenData(RunArgs),
    /// Train and evaluate one algorithm over the configured repetitions.
    Run(RunArgs),
    /// Run a parameter grid.
    Sweep(RunArgs),
    /// Monte Carlo check of one analytical result.
    Probe(ProbeArgs),
    /// Merge summary CSV files into one table.
    Report {
        /// Summary files or directories containing `summary.csv`.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ProbeArgs {
    /// claim1, remark2, theorem1, theorem2 or theorem2-flip.
    name: String,
    #[arg(long, default_value_t = 0.75)]
    alpha: f64,
    #[arg(long, default_value_t = 0.4)]
    gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 41)]
    m: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    ProbeViolation,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Core(Error::Io(_)) => 3,
        Failure::Core(Error::Numeric(_) | Error::DegenerateWeights(_)) => 4,
        Failure::Core(_) => 2,
        Failure::ProbeViolation => 5,
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    seed: u64,
    version: &'static str,
    started_at: String,
    outputs: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_default_env()
        .filter_level(if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Info })
        .init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Run(a) => run(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Probe(a) => probe(&a),
        Command::Report { inputs, out } => report(&inputs, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::ProbeViolation => eprintln!("probe result violates the stated bound"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}

fn load_settings(a: &RunArgs) -> Result<(Settings, PathBuf), Failure> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = Some(seed);
    }
    let settings = Settings::from_config(&cfg)?;
    let out = a.out.clone().or(cfg.output.dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok((settings, out))
}

fn config_hash(settings: &Settings) -> Result<String, Failure> {
    let canonical = serde_json::to_vec(settings).map_err(|e| Error::Config(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&canonical)))
}

/// Creates the output directory and writes the manifest before any result.
fn start(command: &str, settings: &Settings, out: &Path, outputs: &[&str]) -> Result<(), Failure> {
    fs::create_dir_all(out)?;
    let manifest = RunManifest {
        command: command.into(),
        config_hash: config_hash(settings)?,
        seed: settings.seed,
        version: env!("CARGO_PKG_VERSION"),
        started_at: Utc::now().to_rfc3339(),
        outputs: outputs.iter().map(|o| out.join(o)).collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn gen_data(a: &RunArgs) -> Result<(), Failure> {
    let (settings, out) = load_settings(a)?;
    start("gen-data", &settings, &out, &["dataset.csv"])?;
    let data = build_dataset(&settings, &SeedStreams::new(settings.seed).repetition(0))?;
    write_dataset(&data, fs::File::create(out.join("dataset.csv"))?)?;
    log::info!("wrote {} samples to {}", data.len(), out.join("dataset.csv").display());
    Ok(())
}

fn run(a: &RunArgs) -> Result<(), Failure> {
    let (settings, out) = load_settings(a)?;
    let traces: Vec<String> = (0..settings.repetitions).map(|r| format!("trace_{r}.csv")).collect();
    let mut outputs: Vec<&str> = traces.iter().map(String::as_str).collect();
    outputs.extend(["summary.json", "summary.csv"]);
    start("run", &settings, &out, &outputs)?;
    log::info!("{:?} on {:?}, {} repetitions", settings.algorithm, settings.task, settings.repetitions);
    let runs = run_repetitions(&settings)?;
    for (r, name) in runs.iter().zip(&traces) {
        write_trace(&r.metrics.trace, fs::File::create(out.join(name))?)?;
    }
    let summary = summarize(&runs, None, None);
    log::info!(
        "overall {:.4} ± {:.4}, group 0 {:.4}, group 1 {:.4}",
        summary.overall.mean,
        summary.overall.std,
        summary.acc_group_0.mean,
        summary.acc_group_1.mean
    );
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({ "settings": settings, "summary": summary, "runs": runs }),
    )?;
    write_summary_csv(&out.join("summary.csv"), &[SweepPoint { summary, runs: Vec::new() }])
}

fn sweep(a: &RunArgs) -> Result<(), Failure> {
    let (settings, out) = load_settings(a)?;
    if settings.sweep.is_none() {
        return Err(Error::Config("sweep needs an [experiments.sweep] section".into()).into());
    }
    start("sweep", &settings, &out, &["summary.json", "summary.csv"])?;
    let points = run_sweep(&settings)?;
    for p in &points {
        log::info!(
            "{}={}: overall {:.4} disparity {:.4}",
            p.summary.parameter.as_deref().unwrap_or(""),
            p.summary.value.unwrap_or(f64::NAN),
            p.summary.overall.mean,
            p.summary.disparity.mean
        );
    }
    write_json(&out.join("summary.json"), &serde_json::json!({ "settings": settings, "points": points }))?;
    write_summary_csv(&out.join("summary.csv"), &points)
}

fn write_summary_csv(path: &Path, points: &[SweepPoint]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(csv_failure)?;
    w.write_record(summary_header()).map_err(csv_failure)?;
    for p in points {
        w.write_record(summary_row(&p.summary)).map_err(csv_failure)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_failure(e: csv::Error) -> Failure {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Failure::Core(Error::Io(io)),
        other => Failure::Core(Error::Parse { line: 0, message: format!("{other:?}") }),
    }
}

fn probe(a: &ProbeArgs) -> Result<(), Failure> {
    let result: ProbeResult = match a.name.as_str() {
        "claim1" => {
            let (r, traj) = claim1_probe(a.alpha, a.m, a.steps, a.trials, a.seed)?;
            let mut r = r;
            r.params["trajectory"] = serde_json::json!(traj.mean);
            r
        }
        "remark2" => remark2_probe(a.gamma, a.alpha, a.m, a.trials, a.seed)?,
        "theorem1" => theorem1_probe(a.beta, a.delta, a.m, a.trials, a.seed)?,
        "theorem2" => match a.epsilon {
            Some(eps) => theorem2_probe(eps, a.k, a.m, a.trials, a.seed)?,
            None => theorem2_flip_probe(a.k, a.m, a.trials, a.seed)?,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown probe {other:?} (expected claim1, remark2, theorem1 or theorem2)"
            ))
            .into())
        }
    };
    let text = serde_json::to_string_pretty(&result).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = &a.out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    if result.pass {
        Ok(())
    } else {
        Err(Failure::ProbeViolation)
    }
}

fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<(), Failure> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one summary".into()).into());
    }
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for input in inputs {
        let file = if input.is_dir() { input.join("summary.csv") } else { input.clone() };
        let mut r = csv::Reader::from_path(&file).map_err(csv_failure)?;
        let h: Vec<String> = r.headers().map_err(csv_failure)?.iter().map(String::from).collect();
        match &header {
            None => header = Some(h),
            Some(existing) if *existing != h => {
                return Err(Error::Config(format!("{} has a different header", file.display())).into())
            }
            Some(_) => {}
        }
        for rec in r.records() {
            let rec = rec.map_err(csv_failure)?;
            let mut row = vec![file.display().to_string()];
            row.extend(rec.iter().map(String::from));
            rows.push(row);
        }
    }
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let mut full = vec!["source".to_string()];
    full.extend(header.unwrap_or_default());
    w.write_record(&full).map_err(csv_failure)?;
    for row in rows {
        w.write_record(&row).map_err(csv_failure)?;
    }
    w.flush()?;
    Ok(())
}
