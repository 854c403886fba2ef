//! `dualexp`: runs expansion, verification and entropy experiments from a
//! JSON config and writes a CSV table plus a JSON metadata record.

mod catalog;
mod config;
mod experiment;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use dualexp::Error;

/// Bumped whenever a CSV header or the metadata layout changes.
pub const SCHEMA_VERSION: u32 = 1;

/// A diagnostic with the exit code it maps to.
#[derive(Debug, Clone)]
pub struct Issue {
    pub code: u8,
    pub message: String,
}

impl Issue {
    pub const CONFIG: u8 = 2;
    pub const INCOMPATIBLE: u8 = 3;
    pub const NUMERICAL: u8 = 4;

    pub fn config(m: impl Into<String>) -> Self {
        Issue { code: Self::CONFIG, message: m.into() }
    }

    pub fn incompatible(m: impl Into<String>) -> Self {
        Issue { code: Self::INCOMPATIBLE, message: m.into() }
    }

    pub fn from_core(e: &Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) => Self::CONFIG,
            Error::Incompatible { .. } | Error::ShapeMismatch(_) => Self::INCOMPATIBLE,
            _ => Self::NUMERICAL,
        };
        Issue { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "dualexp", version, about = "Small-risk-aversion expansion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write <config stem>.csv and .json.
    Run {
        config: PathBuf,
        /// Output directory (defaults to the config's `output`, then `.`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; falls back to DUALEXP_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// List every violated constraint without simulating.
    Validate { config: PathBuf },
    ListModels,
    ListClaims,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, out, threads } => run(&config, out, threads),
        Command::Validate { config } => validate(&config),
        Command::ListModels => {
            list_models();
            0
        }
        Command::ListClaims => {
            list_claims();
            0
        }
    };
    ExitCode::from(code)
}

fn validate(path: &Path) -> u8 {
    let cfg = match config::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return Issue::CONFIG;
        }
    };
    let issues = config::violations(&cfg);
    if issues.is_empty() {
        println!("{}: ok", path.display());
        return 0;
    }
    for i in &issues {
        println!("violation: {}", i.message);
    }
    issues.iter().map(|i| i.code).min().unwrap_or(0)
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, Issue> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("DUALEXP_THREADS") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| Issue::config(format!("DUALEXP_THREADS must be a positive integer, got '{s}'"))),
        Err(_) => Ok(None),
    }
}

fn run(path: &Path, out: Option<PathBuf>, thread_flag: Option<usize>) -> u8 {
    match try_run(path, out, thread_flag) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(issues) => {
            for i in &issues {
                eprintln!("error: {}", i.message);
            }
            issues.iter().map(|i| i.code).min().unwrap_or(Issue::NUMERICAL)
        }
    }
}

fn try_run(path: &Path, out: Option<PathBuf>, thread_flag: Option<usize>) -> Result<Vec<PathBuf>, Vec<Issue>> {
    let cfg = config::load(path).map_err(|e| vec![Issue::config(e)])?;
    let issues = config::violations(&cfg);
    if !issues.is_empty() {
        return Err(issues);
    }
    let n_threads = threads(thread_flag).map_err(|e| vec![e])?;
    if let Some(n) = n_threads {
        if n == 0 {
            return Err(vec![Issue::config("threads must be positive")]);
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| vec![Issue::config(e.to_string())])?;
    }

    let start = Instant::now();
    let outcome = experiment::execute(&cfg).map_err(|e| vec![e])?;
    let wall = start.elapsed().as_secs_f64();

    let dir = out.or_else(|| cfg.output.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
    let io = |e: std::io::Error| vec![Issue { code: Issue::NUMERICAL, message: format!("cannot write output: {e}") }];
    std::fs::create_dir_all(&dir).map_err(io)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "experiment".into());
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));

    write_csv(&csv_path, &outcome.table).map_err(|e| vec![Issue { code: Issue::NUMERICAL, message: format!("cannot write {}: {e}", csv_path.display()) }])?;
    let meta = json!({
        "schema_version": SCHEMA_VERSION,
        "library_version": env!("CARGO_PKG_VERSION"),
        "kind": config::kind_name(cfg.kind),
        "config": cfg,
        "csv": csv_path.file_name().map(|s| s.to_string_lossy().into_owned()),
        "columns": outcome.table.columns,
        "threads": rayon::current_num_threads(),
        "wall_time_seconds": wall,
        "diagnostics": outcome.diagnostics,
    });
    let text = serde_json::to_string_pretty(&meta).expect("metadata serialises");
    std::fs::write(&json_path, text + "\n").map_err(io)?;
    Ok(vec![csv_path, json_path])
}

fn write_csv(path: &Path, t: &experiment::Table) -> Result<(), Box<dyn std::error::Error>> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&t.columns)?;
    for row in &t.rows {
        w.write_record(row.iter().map(|x| x.map(|v| format!("{v:?}")).unwrap_or_default()))?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_default(d: &catalog::ParamDefault) -> String {
    match d {
        catalog::ParamDefault::Num(x) => x.to_string(),
        catalog::ParamDefault::List(v) => format!("{v:?}"),
    }
}

fn list_models() {
    for m in catalog::MODELS {
        println!("{} - {}", m.name, m.about);
        for (k, d) in m.params {
            println!("    {k} = {}", fmt_default(d));
        }
    }
}

fn list_claims() {
    for c in catalog::CLAIMS {
        let on = if c.needs_market { "market model" } else { "brownian" };
        println!("{} - {} ({on})", c.label, c.about);
        for (k, d) in c.params {
            println!("    {k} = {}", fmt_default(d));
        }
    }
}
