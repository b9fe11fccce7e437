//! Dropping versus aggregating partial work when 80% of selected clients
//! stop early.
//!
//!     cargo run --release --example straggler_toleration -- [rounds]

use fedproto::agg::{FedProtoVariant, StrategyConfig};
use fedproto::data::{build_dataset, PartitionScheme, PartitionSpec};
use fedproto::engine::{assign_stragglers, run_simulation, SimConfig};
use fedproto::nn::ModelSpec;

fn main() -> fedproto::Result<()> {
    let rounds: usize = std::env::args().nth(1).map_or(30, |a| a.parse().expect("rounds"));
    let dataset = build_dataset(
        &PartitionSpec {
            scheme: PartitionScheme::Synthetic { phi1: 1.0, phi2: 1.0 },
            num_clients: 30,
            total_samples: 3000,
            power_law_gamma: 1.0,
            min_per_client: 2,
            seed: 2,
        },
        None,
    )?;
    let spec = ModelSpec::mlp(dataset.input_dim, &[64], dataset.num_classes);

    let selected: Vec<usize> = (0..10).collect();
    let epochs = assign_stragglers(&selected, 0.8, 20, 7, 0);
    println!("stragglers at delta = 0.8, F = 20 (client: epochs done): {epochs:?}\n");

    for strategy in [
        StrategyConfig::fedavg(),
        StrategyConfig::fedavg().with_toleration(true),
        StrategyConfig::fedproto(FedProtoVariant::Full).with_toleration(false),
        StrategyConfig::fedproto(FedProtoVariant::Full),
    ] {
        let config = SimConfig {
            rounds,
            local_epochs: 20,
            delta: 0.8,
            eval_every: rounds,
            ..SimConfig::new(strategy)
        };
        let log = run_simulation(&config, &spec, &dataset, None)?;
        let last = log.records.last().expect("records");
        println!("{:<16} accuracy {:.1}%", strategy.label(), 100.0 * last.accuracy);
    }
    Ok(())
}
