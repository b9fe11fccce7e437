//! How the Dirichlet concentration controls per-client class mixes.
//!
//!     cargo run --release --example dirichlet_partition -- data/mnist

use std::path::PathBuf;

use fedproto::data::{dirichlet_partition, load_idx, power_law_counts};

fn main() -> fedproto::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/mnist".into()));
    let pool = load_idx(&dir.join("images.idx.gz"), &dir.join("labels.idx.gz"))?;
    let clients = 100;
    let counts = power_law_counts(clients, pool.len(), 0.8, 2, 3)?;

    println!(
        "{:>8} {:>22} {:>18}",
        "alpha", "classes with >=1% share", "top-class share"
    );
    for alpha in [0.01, 0.1, 1.0, 10.0, 1000.0] {
        let ds = dirichlet_partition(&pool, clients, alpha, &counts, 3)?;
        let mut present = Vec::new();
        let mut top = Vec::new();
        for c in &ds.clients {
            let mut hist = [0usize; 10];
            c.train.iter().chain(&c.test).for_each(|s| hist[s.label] += 1);
            let n = c.len() as f64;
            present.push(hist.iter().filter(|&&h| h as f64 >= 0.01 * n).count());
            top.push(*hist.iter().max().expect("ten classes") as f64 / n);
        }
        present.sort_unstable();
        let mean_top = top.iter().sum::<f64>() / top.len() as f64;
        println!(
            "{alpha:>8} {:>15} (median) {:>17.2}",
            present[present.len() / 2],
            mean_top
        );
    }
    Ok(())
}
