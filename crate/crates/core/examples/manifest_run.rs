//! Runs a small experiment grid from a TOML manifest and prints the report
//! tables, as the `fedproto run` command does.
//!
//!     cargo run --release --example manifest_run

use std::fs;
use std::path::Path;

use fedproto::config::ExperimentManifest;
use fedproto::experiment::{load_summaries, report_text, run_experiment};

const MANIFEST: &str = r#"
seeds = [1, 2]

[dataset]
scheme = "synthetic"
num_clients = 12
total_samples = 1200

[model]
hidden_dims = [32]

[sim]
rounds = 10
local_epochs = 5
clients_per_round = 5

[centralized]
epochs = 5

[[cells]]
strategy = "fedavg"
deltas = [0.0, 0.5]

[[cells]]
strategy = "fedproto"
deltas = [0.0, 0.5]
"#;

fn main() -> fedproto::Result<()> {
    let out = std::env::temp_dir().join("fedproto-manifest-example");
    let _ = fs::remove_dir_all(&out);
    let mut manifest = ExperimentManifest::from_toml(MANIFEST, Path::new("inline.toml"))?;
    manifest.output_dir = out.clone();

    let outcome = run_experiment(&manifest, None)?;
    println!(
        "{} runs, {} failures, artifacts in {}\n",
        outcome.summaries.len(),
        outcome.failures.len(),
        out.display()
    );
    print!("{}", report_text(&load_summaries(&out)?));

    let cell = out.join("fedproto_d0.5_s1");
    let csv = fs::read_to_string(cell.join("rounds.csv")).map_err(|e| fedproto::Error::Usage(e.to_string()))?;
    println!("\n{}:", cell.join("rounds.csv").display());
    csv.lines().take(4).for_each(|l| println!("  {l}"));
    Ok(())
}
