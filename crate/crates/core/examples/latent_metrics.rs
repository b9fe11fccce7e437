//! Latent-space diagnostics: margin between aggregate class prototypes
//! (AMM), discrepancy from a centrally trained model (MMD) and the relative
//! gain of one strategy over FedAvg (FFD).
//!
//!     cargo run --release --example latent_metrics -- [rounds]

use fedproto::agg::{FedProtoVariant, StrategyConfig};
use fedproto::data::{build_dataset, PartitionScheme, PartitionSpec};
use fedproto::engine::{run_simulation, train_centralized, SimConfig};
use fedproto::metrics::{accuracy, ffd, moving_average, MmdReference};
use fedproto::nn::ModelSpec;

fn main() -> fedproto::Result<()> {
    let rounds: usize = std::env::args().nth(1).map_or(30, |a| a.parse().expect("rounds"));
    let dataset = build_dataset(
        &PartitionSpec {
            scheme: PartitionScheme::Synthetic { phi1: 1.0, phi2: 1.0 },
            num_clients: 20,
            total_samples: 4000,
            power_law_gamma: 1.2,
            min_per_client: 2,
            seed: 5,
        },
        None,
    )?;
    let spec = ModelSpec::mlp(dataset.input_dim, &[64, 64], dataset.num_classes);

    let central = train_centralized(&dataset, &spec, 10, 0.01, 10, 1)?;
    println!(
        "centralized accuracy {:.1}%",
        100.0 * accuracy(&central, &spec, &dataset)?
    );
    let reference = MmdReference::new(&central, &spec, &dataset, 1)?;

    let mut finals = Vec::new();
    for strategy in [
        StrategyConfig::fedavg(),
        StrategyConfig::fedproto(FedProtoVariant::Full),
    ] {
        let config = SimConfig {
            rounds,
            local_epochs: 10,
            mmd_every: 5,
            ..SimConfig::new(strategy)
        };
        let log = run_simulation(&config, &spec, &dataset, Some(&reference))?;
        let amm: Vec<f64> = log.records.iter().map(|r| r.amm).collect();
        let smooth = moving_average(&amm, 0.1);
        let last = log.records.last().expect("records");
        let mmd = last.mmd.expect("mmd on the last round");
        println!(
            "{:<9} accuracy {:.1}%, AMM {:.3} (smoothed {:.3}), MMD {:.4}",
            strategy.label(),
            100.0 * last.accuracy,
            last.amm,
            smooth.last().expect("series"),
            mmd
        );
        finals.push(mmd);
    }
    println!("FFD(fedproto vs fedavg) = {:.1}%", ffd(finals[1], finals[0])?);
    Ok(())
}
