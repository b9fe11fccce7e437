//! FedAvg, FedProx, Fairness and FedProto on the synthetic benchmark.
//!
//!     cargo run --release --example synthetic_benchmark -- [rounds] [delta]
//!
//! The full benchmark uses 200 rounds; the default here is a short run.

use std::time::Instant;

use fedproto::agg::{FedProtoVariant, StrategyConfig};
use fedproto::data::{build_dataset, PartitionScheme, PartitionSpec};
use fedproto::engine::{run_simulation, SimConfig};
use fedproto::nn::ModelSpec;

fn main() -> fedproto::Result<()> {
    let mut args = std::env::args().skip(1);
    let rounds: usize = args.next().map_or(20, |a| a.parse().expect("rounds"));
    let delta: f64 = args.next().map_or(0.5, |a| a.parse().expect("delta"));

    let partition = PartitionSpec {
        scheme: PartitionScheme::Synthetic { phi1: 1.0, phi2: 1.0 },
        num_clients: 30,
        total_samples: 9600,
        power_law_gamma: 1.9,
        min_per_client: 2,
        seed: 1,
    };
    let dataset = build_dataset(&partition, None)?;
    let spec = ModelSpec::mlp(dataset.input_dim, &[128, 256], dataset.num_classes);

    let strategies = [
        StrategyConfig::fedavg(),
        StrategyConfig::fedprox(0.1),
        StrategyConfig::fairness(),
        StrategyConfig::fedproto(FedProtoVariant::Full),
    ];
    println!("{rounds} rounds (+10% tail), delta = {delta}");
    println!(
        "{:<10} {:>9} {:>8} {:>10} {:>8}",
        "strategy", "accuracy", "loss", "grad diss", "time"
    );
    for strategy in strategies {
        let config = SimConfig {
            rounds,
            delta,
            eval_every: rounds.max(1),
            ..SimConfig::new(strategy)
        };
        let start = Instant::now();
        let log = run_simulation(&config, &spec, &dataset, None)?;
        let last = log.records.last().expect("at least one record");
        println!(
            "{:<10} {:>8.1}% {:>8.3} {:>10.1} {:>7.1}s",
            strategy.label(),
            100.0 * last.accuracy,
            last.loss,
            last.grad_dissimilarity,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
