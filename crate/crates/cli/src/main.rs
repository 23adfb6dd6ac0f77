//! `fxsim`: run, compare and validate scenario files.
//!
//! Exit codes: 0 success, 2 invalid scenario, 3 internal invariant
//! violation, 1 anything else (I/O, bad flags).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use fxsim_core::presets::{self, PresetKind};
use fxsim_core::{compare, run, validate, MetricsReport, RunError, Scenario};

#[derive(Parser)]
#[command(name = "fxsim", version, about = "Deterministic simulator of monolithic and microservice FX cores")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes the line-oriented trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Run the same scenario under two presets and print the deltas.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        /// Two presets, comma separated, e.g. `monolith,microservice`.
        #[arg(long, value_delimiter = ',', required = true)]
        presets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also writes the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario file and report every problem at once.
    Validate { path: PathBuf },
    /// Print the built-in architectures, or the inventory of a scenario.
    ListPresets {
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

enum Failure {
    Invalid(String),
    Invariant(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Validation(v) => Failure::Invalid(v.to_string()),
            RunError::Invariant { .. } => Failure::Invariant(e.to_string()),
            RunError::Sim(s) => Failure::Other(anyhow!(s)),
        }
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::Other)?;
    validate(&text).map_err(|e| Failure::Invalid(format!("{}:\n{e}", path.display())))
}

/// Writes through a sibling temp file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot move report into {}", path.display()))?;
    Ok(())
}

fn with_preset(base: &Scenario, name: &str) -> Result<Scenario, Failure> {
    let kind = PresetKind::parse(name).ok_or_else(|| Failure::Other(anyhow!("unknown preset `{name}`")))?;
    let mut file = base.file.clone();
    file.preset = kind;
    Scenario::from_file(file).map_err(|e| Failure::Invalid(format!("under preset {name}:\n{e}")))
}

fn cmd_run(scenario: &Path, seed: Option<u64>, trace: Option<&Path>, out: &Path, format: Format) -> Result<(), Failure> {
    let mut s = load(scenario)?;
    if let Some(seed) = seed {
        s = s.with_seed(seed);
    }
    let o = run(&s)?;
    let body = match format {
        Format::Json => o.report.to_json(),
        Format::Text => o.report.to_text(),
    };
    write_atomic(out, body.as_bytes())?;
    if let Some(t) = trace {
        write_atomic(t, o.trace.export_text().as_bytes())?;
    }
    eprintln!(
        "{}: {} of {} requests completed, {} events",
        s.name, o.report.requests_completed, o.report.requests_generated, o.report.events
    );
    Ok(())
}

fn cmd_compare(scenario: &Path, names: &[String], seed: Option<u64>, out: Option<&Path>) -> Result<(), Failure> {
    let [a, b] = names else {
        return Err(Failure::Other(anyhow!("--presets takes exactly two names")));
    };
    let mut base = load(scenario)?;
    if let Some(seed) = seed {
        base = base.with_seed(seed);
    }
    let sa = with_preset(&base, a)?;
    let sb = with_preset(&base, b)?;
    // independent runs; each stays single-threaded inside
    let (ra, rb) = std::thread::scope(|sc| {
        let ha = sc.spawn(|| run(&sa));
        let hb = sc.spawn(|| run(&sb));
        (ha.join(), hb.join())
    });
    let ra: MetricsReport = ra.map_err(|_| Failure::Other(anyhow!("run panicked")))??.report;
    let rb: MetricsReport = rb.map_err(|_| Failure::Other(anyhow!("run panicked")))??.report;
    let table = compare(&ra, &rb).map_err(|e| Failure::Other(anyhow!(e)))?;
    print!("{}", table.to_text());
    if let Some(p) = out {
        let json = serde_json::to_string_pretty(&table).context("serializing comparison")?;
        write_atomic(p, json.as_bytes())?;
    }
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let s = load(path)?;
    println!("ok: {}", s.name);
    print!("{}", s.describe());
    Ok(())
}

fn cmd_list(scenario: Option<&Path>) -> Result<(), Failure> {
    match scenario {
        Some(p) => print!("{}", load(p)?.describe()),
        None => {
            for kind in [PresetKind::Monolith, PresetKind::Microservice] {
                let parts = presets::parts(kind);
                println!("{}", presets::describe(kind, &parts.services, &parts.layout));
            }
            println!("preset custom\n  no built-in services; a scenario declares its own topology, services and bus");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            trace,
            out,
            format,
        } => cmd_run(scenario, *seed, trace.as_deref(), out, *format),
        Cmd::Compare {
            scenario,
            presets,
            seed,
            out,
        } => cmd_compare(scenario, presets, *seed, out.as_deref()),
        Cmd::Validate { path } => cmd_validate(path),
        Cmd::ListPresets { scenario } => cmd_list(scenario.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("invalid scenario: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
