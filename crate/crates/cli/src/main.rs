use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use laissez_core::engine::{run, RunStatus};
use laissez_core::report::{summarize, summarize_run};
use laissez_core::scenario::{self, Scenario};
use laissez_core::trace::{emit_trace, parse_trace, TraceFormat};
use laissez_core::units::{SimDuration, SimTime};

const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NON_QUIESCENT: u8 = 3;

/// Market-based accelerator allocation simulator.
#[derive(Debug, Parser)]
#[command(name = "laissez", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file or a bundled scenario by name.
    Run {
        scenario: String,
        /// Stop at this simulated time, e.g. `10m` or `90s`.
        #[arg(long)]
        until: Option<String>,
        /// Write the event trace here (`-` for stdout).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: TraceFormat,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a scenario and report every problem found.
    Validate { scenario: String },
    /// Summarize a trace written by `run`.
    Report { trace: PathBuf },
    /// List the bundled scenarios.
    Scenarios {
        /// Print the named scenario's source instead.
        #[arg(long)]
        print: Option<String>,
    },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn io_err(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_IO,
        error: error.into(),
    }
}

fn invalid(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_VALIDATION,
        error: error.into(),
    }
}

/// A path that exists wins over a bundled name.
fn scenario_source(arg: &str) -> Result<String, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        return fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(io_err);
    }
    scenario::bundled_text(arg).map(str::to_string).ok_or_else(|| {
        io_err(anyhow!(
            "`{arg}` is neither a readable file nor a bundled scenario ({})",
            scenario::bundled_names().collect::<Vec<_>>().join(", ")
        ))
    })
}

fn load(arg: &str) -> Result<Scenario, Failure> {
    let text = scenario_source(arg)?;
    scenario::parse_scenario(&text).map_err(invalid)
}

fn execute(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Run {
            scenario,
            until,
            trace,
            format,
            seed,
        } => {
            let mut scenario = load(&scenario)?;
            if let Some(seed) = seed {
                scenario.engine.seed = seed;
            }
            let until = until
                .map(|u| SimDuration::parse(&u).map(|d| SimTime::ZERO + d))
                .transpose()
                .context("--until")
                .map_err(invalid)?;
            let output = run(&scenario, until).map_err(invalid)?;
            if let Some(path) = trace {
                if path.as_os_str() == "-" {
                    emit_trace(&output.trace, format, &mut io::stdout().lock()).map_err(io_err)?;
                } else {
                    let mut file = io::BufWriter::new(
                        fs::File::create(&path)
                            .with_context(|| format!("creating {}", path.display()))
                            .map_err(io_err)?,
                    );
                    emit_trace(&output.trace, format, &mut file).map_err(io_err)?;
                    file.flush().map_err(io_err)?;
                    println!("{}", summarize_run(&output));
                }
            } else {
                println!("{}", summarize_run(&output));
            }
            if output.status == RunStatus::NonQuiescent {
                eprintln!("stopped at {} with tenants still live", output.end_time);
                return Ok(EXIT_NON_QUIESCENT);
            }
            Ok(0)
        }
        Command::Validate { scenario } => {
            let s = load(&scenario)?;
            println!("ok: {} ({} tenants, {} accelerator types)", s.name, s.tenants.len(), s.cluster.types().len());
            Ok(0)
        }
        Command::Report { trace } => {
            let file = fs::File::open(&trace)
                .with_context(|| format!("opening {}", trace.display()))
                .map_err(io_err)?;
            let parsed = parse_trace(BufReader::new(file)).map_err(invalid)?;
            println!("{}", summarize(&parsed));
            Ok(0)
        }
        Command::Scenarios { print } => {
            if let Some(name) = print {
                let text = scenario::bundled_text(&name)
                    .ok_or_else(|| invalid(anyhow!("no bundled scenario `{name}`")))?;
                print!("{text}");
                return Ok(0);
            }
            for name in scenario::bundled_names() {
                let s = scenario::bundled(name).expect("bundled scenarios parse");
                println!("{name:<18} {}", s.description);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
