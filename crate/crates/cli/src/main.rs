use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tdmr::harness::artifacts::TrainedPoint;
use tdmr::harness::{emit_results, evaluate_point, run_selftest, run_sweep, train_point, BerRecord, ExperimentConfig, SystemId};
use tdmr::Error;

#[derive(Parser)]
#[command(name = "tdmr", version, about = "Two-track TDMR read-channel lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every system at every sweep point and save the artifacts.
    Train(RunArgs),
    /// Measure BER with previously trained artifacts.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Artifact directory written by `train` (default: <out>/artifacts).
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Train and evaluate the whole sweep, writing ber.csv and run_meta.txt.
    Sweep(RunArgs),
    /// Run the built-in oracle and invariant checks.
    Selftest {
        /// Only run checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides run.output_dir).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Test-data seed override.
    #[arg(long)]
    test_seed: Option<u64>,
    /// Systems to run (repeatable or comma-separated).
    #[arg(long = "system", value_delimiter = ',')]
    systems: Vec<SystemId>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.run.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.run.master_seed = seed;
        }
        if let Some(seed) = self.test_seed {
            cfg.run.test_seed = Some(seed);
        }
        if !self.systems.is_empty() {
            cfg.run.systems = self.systems.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn artifact_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("point-{i:04}.toml"))
}

fn print_records(records: &[BerRecord]) {
    for r in records {
        println!(
            "{}",
            json!({
                "system": r.system.as_str(),
                "spacing_tp": r.spacing_tp,
                "sigma_awgn": r.sigma_awgn,
                "ber": r.avg_ber(),
                "bits": r.bits(),
                "flag": r.flag,
            })
        );
    }
}

fn train(args: &RunArgs) -> Result<(), Error> {
    let cfg = args.config()?;
    let dir = cfg.run.output_dir.join("artifacts");
    for (i, p) in cfg.points().into_iter().enumerate() {
        let trained = train_point(&cfg, p)?;
        let path = artifact_path(&dir, i);
        trained.save(&path)?;
        println!("{}", json!({ "point": i, "spacing_tp": p.spacing, "sigma_awgn": p.sigma_awgn, "artifact": path }));
    }
    Ok(())
}

fn evaluate(args: &RunArgs, artifacts: Option<&Path>) -> Result<(), Error> {
    let cfg = args.config()?;
    let dir = artifacts.map_or_else(|| cfg.run.output_dir.join("artifacts"), Path::to_path_buf);
    let mut records = Vec::new();
    for (i, p) in cfg.points().into_iter().enumerate() {
        let trained = TrainedPoint::load(&artifact_path(&dir, i))?;
        if trained.point != p || !trained.covers(&cfg.run.systems) {
            return Err(Error::InvalidArgument(format!("artifact {i} was trained for a different point or system set; rerun train")));
        }
        records.extend(evaluate_point(&cfg, &trained)?);
    }
    emit_results(&records, &cfg, &cfg.run.output_dir)?;
    print_records(&records);
    Ok(())
}

fn sweep(args: &RunArgs) -> Result<(), Error> {
    let cfg = args.config()?;
    let records = run_sweep(&cfg, &cfg.run.output_dir)?;
    print_records(&records);
    Ok(())
}

fn selftest(filter: Option<&str>) -> Result<(), Error> {
    let results = run_selftest(filter);
    for r in &results {
        println!("{}", json!({ "check": r.name, "passed": r.passed, "detail": r.detail }));
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("failed checks: {}", failed.join(", "))))
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    let result = match &cli.command {
        Command::Train(args) => train(args),
        Command::Evaluate { run, artifacts } => evaluate(run, artifacts.as_deref()),
        Command::Sweep(args) => sweep(args),
        Command::Selftest { filter } => selftest(filter.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
