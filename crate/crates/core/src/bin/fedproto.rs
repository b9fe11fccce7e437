use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedproto::config::{parse_config, ExperimentManifest, OUTPUT_DIR_ENV};
use fedproto::experiment::{load_summaries, prepare_dataset, report_csv, report_text, run_experiment};
use fedproto::selftest;

/// Federated learning simulator: FedAvg, FedProx, Fairness and FedProto.
#[derive(Parser)]
#[command(name = "fedproto", version)]
struct Cli {
    /// Worker threads for running cells in parallel (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML manifest. Defaults: rounds=200, local_epochs=20, clients_per_round=10,
    /// lr=0.01, batch_size=10, seeds=[1], output_dir="runs".
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the manifest.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output: Option<PathBuf>,
    /// Run every cell with this single seed instead of the manifest's list.
    #[arg(long)]
    seed_override: Option<u64>,
}

impl Common {
    fn manifest(&self) -> fedproto::Result<ExperimentManifest> {
        let mut m = parse_config(&self.config)?;
        if let Some(out) = &self.output {
            m.output_dir = out.clone();
        }
        if let Some(seed) = self.seed_override {
            m.seeds = vec![seed];
        }
        Ok(m)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build (or load from cache) the federated dataset of a manifest.
    GenerateData(Common),
    /// Run every selected cell and write rounds.csv, summary.json and plotdata/.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated cell filter, e.g. "fedavg,fedproto@0.5".
        #[arg(long)]
        cells: Option<String>,
    },
    /// Summarize finished runs as mean±std tables.
    Report {
        /// Manifest whose output directory should be read.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of finished runs.
        #[arg(long, env = OUTPUT_DIR_ENV)]
        output: Option<PathBuf>,
        /// Emit CSV instead of plain text.
        #[arg(long)]
        csv: bool,
    },
    /// Run the built-in oracle and property suites.
    Selftest,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> fedproto::Result<ExitCode> {
    match command {
        Command::GenerateData(common) => {
            let m = common.manifest()?;
            let ds = prepare_dataset(&m)?;
            println!(
                "{} clients, {} samples ({} train), {} classes, input dim {}; cached under {}",
                ds.num_clients(),
                ds.total_samples(),
                ds.total_train(),
                ds.num_classes,
                ds.input_dim,
                m.cache_dir().display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { common, cells } => {
            let m = common.manifest()?;
            let outcome = run_experiment(&m, cells.as_deref())?;
            print!("{}", report_text(&outcome.summaries));
            for (name, err) in &outcome.failures {
                eprintln!("FAILED {name}: {err}");
            }
            Ok(if outcome.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Report { config, output, csv } => {
            let dir = match (output, config) {
                (Some(d), _) => d,
                (None, Some(c)) => parse_config(&c)?.output_dir,
                (None, None) => PathBuf::from("runs"),
            };
            let summaries = if dir.exists() {
                load_summaries(&dir)?
            } else {
                Vec::new()
            };
            if csv {
                print!("{}", report_csv(&summaries));
            } else {
                print!("{}", report_text(&summaries));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            let results = selftest::run_all();
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                println!(
                    "{} ({}) {} [{:.2}s]: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.id,
                    r.name,
                    r.elapsed.as_secs_f64(),
                    r.detail
                );
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
