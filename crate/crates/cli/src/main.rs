use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wienerlab::registry::{Entry, DRIFTS, FUNCTIONALS};
use wienerlab_cli::config::{ExperimentConfig, Ini};
use wienerlab_cli::error::{CliError, EXIT_OK};
use wienerlab_cli::experiment::Artifact;
use wienerlab_cli::{experiment, output, sweep};

#[derive(Parser)]
#[command(name = "wienerlab", version, about = "Monte Carlo experiments on adapted shifts of Wiener space")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Run the template once per value of `[sweep] param`.
    Sweep(RunArgs),
    /// List the drift registry.
    ListDrifts,
    /// List the functional registry.
    ListFunctionals,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `[experiment] seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn print_entries(entries: &[Entry]) {
    println!("{:<12} {:<24} {:<8} description", "name", "parameters", "bounded");
    for e in entries {
        let params: Vec<String> = e.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{:<12} {:<24} {:<8} {}", e.name, params.join(" "), if e.bounded { "yes" } else { "no" }, e.description);
    }
}

fn load(args: &RunArgs) -> Result<Ini, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut ini = Ini::parse(&text)?;
    if let Some(seed) = args.seed {
        ini.set("experiment", "seed", seed.to_string());
    }
    Ok(ini)
}

fn out_dir(args: &RunArgs, ini: &Ini) -> PathBuf {
    args.out
        .clone()
        .or_else(|| ini.get("output", "dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("wienerlab-out"))
}

fn finish(dir: &Path, report: &serde_json::Value, summary: &str, mut artifacts: Vec<Artifact>) -> Result<(), CliError> {
    let mut json = serde_json::to_vec_pretty(report).map_err(wienerlab::Error::from)?;
    json.push(b'\n');
    artifacts.push(Artifact { name: "report.json".into(), bytes: json });
    artifacts.push(Artifact { name: "summary.txt".into(), bytes: summary.as_bytes().to_vec() });
    output::write_all(dir, &artifacts)?;
    print!("{summary}");
    println!("\nwrote {} files to {}", artifacts.len(), dir.display());
    Ok(())
}

fn run(args: &RunArgs) -> Result<(), CliError> {
    let ini = load(args)?;
    let cfg = ExperimentConfig::from_ini(&ini)?;
    let dir = out_dir(args, &ini);
    let out = experiment::run(&cfg)?;
    finish(&dir, &out.report, &out.summary, out.artifacts)
}

fn run_sweep(args: &RunArgs) -> Result<(), CliError> {
    let ini = load(args)?;
    let dir = out_dir(args, &ini);
    let out = sweep::run(&ini)?;
    if out.failures > 0 {
        log::warn!("{} sweep points failed", out.failures);
    }
    finish(&dir, &out.report, &out.summary, out.artifacts)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Sweep(args) => run_sweep(args),
        Command::ListDrifts => {
            print_entries(DRIFTS);
            Ok(())
        }
        Command::ListFunctionals => {
            print_entries(FUNCTIONALS);
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
