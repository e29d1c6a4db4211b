use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedrecon_core::experiment::{self, ExperimentConfig, RunMode};
use fedrecon_core::gradcheck;

#[derive(Parser)]
#[command(name = "fedrecon", version, about = "Reconstruct federated training data from unlearning gradient pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, unlearn, capture and attack as described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory.
        #[arg(long, env = "FEDRECON_OUT_DIR")]
        out: Option<PathBuf>,
        /// Validate and print the resolved config without running.
        #[arg(long)]
        dry_run: bool,
        /// Comma-separated attack modes, e.g. `dlg_baseline,dragd,dragdp`.
        #[arg(long)]
        modes: Option<String>,
    },
    /// Finite-difference checks of the gradient engine.
    Gradcheck {
        /// Random model configurations per suite.
        #[arg(long, default_value_t = 100)]
        configs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the comparison table of a finished run.
    Report { run_dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, seed, out, dry_run, modes } => cmd_run(config, seed, out, dry_run, modes),
        Command::Gradcheck { configs, seed } => cmd_gradcheck(configs, seed),
        Command::Report { run_dir } => cmd_report(run_dir),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type Outcome = Result<ExitCode, fedrecon_core::Error>;

fn cmd_run(path: PathBuf, seed: Option<u64>, out: Option<PathBuf>, dry_run: bool, modes: Option<String>) -> Outcome {
    let mut config = ExperimentConfig::load(&path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(o) = out {
        config.out_dir = o.to_string_lossy().into_owned();
    }
    if let Some(m) = modes {
        config.modes = RunMode::parse_list(&m)?;
    }
    let prepared = experiment::prepare(&config)?;
    if dry_run {
        print!("{}", config.to_json()?);
        return Ok(ExitCode::SUCCESS);
    }
    let report = experiment::run_prepared(&prepared)?;
    print!("{}", experiment::format_table(&report.table));
    println!("artifacts: {}", config.out_dir);
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(configs: usize, seed: u64) -> Outcome {
    let results = gradcheck::run_all(configs, seed)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{:<4} {:<28} checks {:>6}  skipped {:>4}  max rel err {:.3e}  (tol {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.checks,
            r.skipped,
            r.max_rel_err,
            r.tolerance
        );
        if !r.passed() {
            println!("     worst: {}", r.worst);
        }
    }
    println!("{}", if ok { "all gradient checks passed" } else { "gradient check FAILED" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_report(run_dir: PathBuf) -> Outcome {
    let table = experiment::load_report_table(&run_dir)?;
    print!("{}", experiment::format_table(&table));
    Ok(ExitCode::SUCCESS)
}
