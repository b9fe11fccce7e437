//! Power-law label sharding of an IDX image set across 1000 clients.
//!
//!     python3 scripts/mnist_from_npm.py <digits dir> data/mnist
//!     cargo run --release --example mnist_shards -- data/mnist

use std::collections::BTreeMap;
use std::path::PathBuf;

use fedproto::data::{label_shard_partition, load_idx, power_law_counts};

fn main() -> fedproto::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/mnist".into()));
    let pool = load_idx(&dir.join("images.idx.gz"), &dir.join("labels.idx.gz"))?;
    println!("{} images in the pool", pool.len());

    let counts = power_law_counts(1000, pool.len(), 0.8, 2, 1)?;
    let dataset = label_shard_partition(&pool, 1000, 2, &counts, 1)?;

    let sizes: Vec<usize> = dataset.clients.iter().map(|c| c.len()).collect();
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    let var = sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / (sizes.len() - 1) as f64;
    println!(
        "samples per client: mean {mean:.1}, std {:.1}, max {}",
        var.sqrt(),
        sizes.iter().max().expect("clients")
    );

    let mut label_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for c in &dataset.clients {
        *label_counts.entry(c.train_labels().len()).or_default() += 1;
    }
    for (labels, clients) in label_counts {
        println!("{clients:>5} clients train on {labels} digit(s)");
    }
    let biggest = dataset.clients.iter().max_by_key(|c| c.len()).expect("clients");
    println!(
        "largest client {}: digits {:?}",
        biggest.client_id,
        biggest.train_labels()
    );
    Ok(())
}
