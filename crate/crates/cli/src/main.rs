mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use relperf_core::Error;

#[derive(Parser)]
#[command(name = "relperf", version, about = "Relative-performance investment games on graphs and graphons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides the seed in the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// directory for artifacts; without it the artifact goes to stdout
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// run the Monte Carlo cross-checks (best-response oracle, bisection)
    #[arg(long, global = true)]
    verify: bool,
    /// size of the worker pool; results do not depend on it
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Nash equilibrium of the n-agent game on a graph
    SolveFinite,
    /// Graphon equilibrium on a label grid, optionally with the Picard BSDE solver
    SolveGraphon,
    /// Finite-vs-graphon error rates over an n schedule
    Chaos,
    /// Indifference capital, finite and graphon, with an optional bisection check
    Indifference,
    /// Sample an interaction graph from a graphon
    SampleGraph,
    /// Cut distance between two step graphons
    CutNorm,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SolveFinite => "solve-finite",
            Command::SolveGraphon => "solve-graphon",
            Command::Chaos => "chaos",
            Command::Indifference => "indifference",
            Command::SampleGraph => "sample-graph",
            Command::CutNorm => "cut-norm",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

enum Failure {
    Config { message: String, field: Option<String> },
    Solver(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config { .. } => 2,
            Failure::Solver(_) => 1,
        }
    }

    fn report(&self) -> String {
        let v = match self {
            Failure::Config { message, field } => serde_json::json!({"error": {"kind": "config", "message": message, "field": field}}),
            Failure::Solver(message) => serde_json::json!({"error": {"kind": "solver", "message": message}}),
        };
        v.to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parameter(_) | Error::Domain(_) | Error::RowSum { .. } | Error::ExactInfeasible { .. } | Error::Capability(_) | Error::Json(_) => {
                Failure::Config { message: e.to_string(), field: None }
            }
            other => Failure::Solver(other.to_string()),
        }
    }
}

/// Field named in a serde "missing field `x`" or "unknown field `x`" message.
fn field_of(message: &str) -> Option<String> {
    for pat in ["missing field `", "unknown field `"] {
        if let Some(start) = message.find(pat) {
            let rest = &message[start + pat.len()..];
            return rest.find('`').map(|end| rest[..end].to_string());
        }
    }
    None
}

struct Loaded<T> {
    config: T,
    sha256: String,
}

fn load<T: DeserializeOwned>(path: Option<&Path>) -> Result<Loaded<T>, Failure> {
    let path = path.ok_or_else(|| Failure::Config { message: "--config is required".into(), field: None })?;
    let bytes = std::fs::read(path).map_err(|e| Failure::Config { message: format!("cannot read {}: {e}", path.display()), field: None })?;
    let config = serde_json::from_slice(&bytes).map_err(|e| {
        let message = e.to_string();
        Failure::Config { field: field_of(&message), message }
    })?;
    Ok(Loaded { config, sha256: hex(&Sha256::digest(&bytes)) })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct Artifact<'a, T> {
    command: &'a str,
    config_sha256: &'a str,
    seed: u64,
    result: &'a T,
}

struct Emitter<'a> {
    cli: &'a Cli,
    sha256: String,
    seed: u64,
}

impl Emitter<'_> {
    fn emit<T: Serialize>(&self, result: &T, csv: impl FnOnce(&T) -> String, summary: &str) -> Result<(), Failure> {
        let name = self.cli.command.name();
        let body = match self.cli.format {
            Format::Json => {
                let a = Artifact { command: name, config_sha256: &self.sha256, seed: self.seed, result };
                serde_json::to_string_pretty(&a).map_err(|e| Failure::Solver(e.to_string()))? + "\n"
            }
            Format::Csv => format!("# command={name}\n# config_sha256={}\n# seed={}\n{}", self.sha256, self.seed, csv(result)),
        };
        match &self.cli.out {
            Some(dir) => {
                let ext = if self.cli.format == Format::Json { "json" } else { "csv" };
                self.write(dir, &format!("{name}.{ext}"), &body)?;
                println!("{summary}");
            }
            None => print!("{body}"),
        }
        Ok(())
    }

    fn write(&self, dir: &Path, file: &str, body: &str) -> Result<(), Failure> {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Config { message: format!("cannot create {}: {e}", dir.display()), field: None })?;
        let path = dir.join(file);
        std::fs::write(&path, body).map_err(|e| Failure::Solver(format!("cannot write {}: {e}", path.display())))
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Config { message: "--threads must be positive".into(), field: Some("threads".into()) });
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| Failure::Solver(e.to_string()))?;
    }
    let cfg_path = cli.config.as_deref();
    match cli.command {
        Command::SolveFinite => {
            let l: Loaded<commands::FiniteConfig> = load(cfg_path)?;
            let seed = cli.seed.unwrap_or(l.config.seed);
            let (out, ok) = commands::solve_finite(&l.config, seed, cli.verify)?;
            let e = Emitter { cli, sha256: l.sha256, seed };
            let summary = format!("solved n={} residual={:e}{}", out.equilibrium.n, out.equilibrium.residual, if cli.verify { format!(" verified={ok}") } else { String::new() });
            e.emit(&out, commands::finite_csv, &summary)?;
            if !ok {
                return Err(Failure::Solver("best-response oracle found a profitable deviation".into()));
            }
        }
        Command::SolveGraphon => {
            let l: Loaded<commands::GraphonConfig> = load(cfg_path)?;
            let seed = cli.seed.unwrap_or(l.config.seed);
            let out = commands::solve_graphon(&l.config, seed)?;
            let e = Emitter { cli, sha256: l.sha256, seed };
            e.emit(&out, commands::graphon_csv, &format!("solved labels={} residual={:e}", out.equilibrium.labels.len(), out.equilibrium.residual))?;
        }
        Command::Chaos => {
            let l: Loaded<relperf_core::chaos_lab::ChaosConfig> = load(cfg_path)?;
            let seed = cli.seed.unwrap_or(l.config.seed);
            let report = commands::chaos(&l.config, seed)?;
            let e = Emitter { cli, sha256: l.sha256, seed };
            let mut summary = String::from("n strategy_error value_error gamma_error bound");
            for p in &report.per_n {
                summary.push_str(&format!("\n{} {:.4e} {:.4e} {:.4e} {:.4e}", p.n, p.strategy_error, p.value_error, p.gamma_error, p.bound_value));
            }
            e.emit(&report, |r| r.to_csv(), &summary)?;
            if let Some(dir) = &cli.out {
                e.write(dir, "chaos.dat", &report.to_dat())?;
            }
        }
        Command::Indifference => {
            let l: Loaded<commands::IndifferenceConfig> = load(cfg_path)?;
            let seed = cli.seed.unwrap_or(l.config.seed);
            let (out, ok) = commands::indifference(&l.config, seed, cli.verify)?;
            let e = Emitter { cli, sha256: l.sha256, seed };
            let p: Vec<String> = out.finite.p.iter().map(|p| format!("{p:.10}")).collect();
            e.emit(&out, commands::indifference_csv, &format!("p = [{}]", p.join(", ")))?;
            if !ok {
                return Err(Failure::Solver("closed form and bisection disagree".into()));
            }
        }
        Command::SampleGraph => {
            let l: Loaded<commands::SampleConfig> = load(cfg_path)?;
            let seed = cli.seed.unwrap_or(l.config.seed);
            let g = commands::sample_graph(&l.config, seed)?;
            let e = Emitter { cli, sha256: l.sha256, seed };
            e.emit(&g, commands::graph_csv, &format!("n={} edges={}", g.n(), g.edge_count()))?;
        }
        Command::CutNorm => {
            let l: Loaded<commands::CutConfig> = load(cfg_path)?;
            let seed = cli.seed.unwrap_or(l.config.seed);
            let c = commands::cut(&l.config)?;
            let e = Emitter { cli, sha256: l.sha256, seed };
            e.emit(&c, |c| format!("value,exact,blocks\n{:e},{},{}\n", c.value, c.exact, c.blocks), &format!("{}", c.value))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.report());
            ExitCode::from(f.code())
        }
    }
}
