//! One round of prototype exchange by hand: client prototypes before and
//! after local training, their margins against each other and against the
//! server aggregate, and the attention weights that follow.
//!
//!     cargo run --release --example prototype_margins

use std::collections::BTreeMap;

use fedproto::agg::{deviation, federated_attention, normalize_attention};
use fedproto::data::{build_dataset, PartitionScheme, PartitionSpec};
use fedproto::nn::{local_train, ModelSpec, ParamSet, TrainOptions};
use fedproto::proto::{aggregate_prototypes, apm, extract_prototypes, lpm, minmax_normalize};

fn main() -> fedproto::Result<()> {
    let dataset = build_dataset(
        &PartitionSpec {
            scheme: PartitionScheme::Synthetic { phi1: 1.0, phi2: 1.0 },
            num_clients: 6,
            total_samples: 1200,
            power_law_gamma: 1.0,
            min_per_client: 2,
            seed: 4,
        },
        None,
    )?;
    let spec = ModelSpec::mlp(dataset.input_dim, &[32, 16], dataset.num_classes);
    let global = ParamSet::init(&spec, 0);
    let opts = TrainOptions {
        epochs: 5,
        lr: 0.01,
        batch_size: 10,
        proximal: None,
    };

    let mut before = BTreeMap::new();
    let mut after = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    for c in &dataset.clients {
        let local = local_train(&global, &spec, &c.train, &opts, c.client_id as u64)?;
        before.insert(
            c.client_id,
            minmax_normalize(&extract_prototypes(&global, &spec, &c.train)?),
        );
        after.insert(
            c.client_id,
            minmax_normalize(&extract_prototypes(&local, &spec, &c.train)?),
        );
        sizes.insert(c.client_id, c.n_train());
    }
    let aggregate = aggregate_prototypes(after.values())?;

    let lpms: BTreeMap<_, _> = after.iter().map(|(&k, p)| (k, lpm(&before[&k], p))).collect();
    let apms: BTreeMap<_, _> = after.iter().map(|(&k, p)| (k, apm(p, &aggregate))).collect();
    for (k, m) in &lpms {
        let mean = |v: &BTreeMap<usize, f64>| v.values().sum::<f64>() / v.len().max(1) as f64;
        println!(
            "client {k}: {:>4} train samples, {} classes, mean LPM {:+.3}, mean APM {:+.3}",
            sizes[k],
            m.len(),
            mean(m),
            mean(&apms[k])
        );
    }

    let a_loc = normalize_attention(&deviation(&lpms))?;
    let a_agg = normalize_attention(&deviation(&apms))?;
    let first = federated_attention(&a_loc, &a_agg, 0, &sizes)?;
    let later = federated_attention(&a_loc, &a_agg, 1, &sizes)?;
    println!("\nclient  round 0 (size)  later rounds");
    for (k, w) in first.iter() {
        println!("{k:>6}  {w:>14.4}  {:>12.4}", later.get(k).unwrap_or_default());
    }
    Ok(())
}
