//! Heterogeneous logistic-regression data. Each client draws its own label
//! model and its own input mean; `phi1` spreads the label models across
//! clients and `phi2` spreads the input distributions.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{ClientDataset, FederatedDataset, Sample};
use crate::error::{Error, Result};
use crate::seed::{rng_for, Stream};

pub const SYNTHETIC_DIM: usize = 60;
pub const SYNTHETIC_CLASSES: usize = 10;

fn normal(mean: f64, variance: f64) -> Normal<f64> {
    Normal::new(mean, variance.sqrt()).expect("finite non-negative variance")
}

/// Generates one client per entry of `samples_per_client`. The hyper-prior
/// variances are `phi1` (label model mean) and `phi2` (input mean).
pub fn gen_synthetic(phi1: f64, phi2: f64, samples_per_client: &[usize], seed: u64) -> Result<FederatedDataset> {
    if !(phi1 >= 0.0 && phi2 >= 0.0) {
        return Err(Error::Usage(format!(
            "phi1 and phi2 must be non-negative, got {phi1}, {phi2}"
        )));
    }
    if samples_per_client.iter().any(|&n| n < 2) {
        return Err(Error::Usage(
            "every client needs at least 2 samples for a train/test split".into(),
        ));
    }
    // Σ_jj = j^-1.2 with j counted from 1
    let std_dev: Array1<f64> = Array1::from_iter((1..=SYNTHETIC_DIM).map(|j| (j as f64).powf(-1.2).sqrt()));

    let mut clients = Vec::with_capacity(samples_per_client.len());
    for (k, &n) in samples_per_client.iter().enumerate() {
        let mut rng = rng_for(seed, Stream::Synthetic, &[k as u64]);
        let u_k = normal(0.0, phi1).sample(&mut rng);
        let big_b = normal(0.0, phi2).sample(&mut rng);
        let model_dist = normal(u_k, 1.0);
        let w = Array2::from_shape_fn((SYNTHETIC_CLASSES, SYNTHETIC_DIM), |_| model_dist.sample(&mut rng));
        let b = Array1::from_shape_fn(SYNTHETIC_CLASSES, |_| model_dist.sample(&mut rng));
        let mean_dist = normal(big_b, 1.0);
        let v = Array1::from_shape_fn(SYNTHETIC_DIM, |_| mean_dist.sample(&mut rng));

        let samples = (0..n)
            .map(|_| {
                let x: Array1<f64> = Array1::from_shape_fn(SYNTHETIC_DIM, |j| {
                    let z: f64 = rng.sample(StandardNormal);
                    v[j] + std_dev[j] * z
                });
                let scores = w.dot(&x) + &b;
                // softmax is monotone, so argmax of the scores is the label
                let label = scores
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (c, &s)| {
                            if s > best.1 {
                                (c, s)
                            } else {
                                best
                            }
                        },
                    )
                    .0;
                Sample::new(x.to_vec(), label)
            })
            .collect();
        clients.push(ClientDataset::from_samples(k, samples, seed)?);
    }
    FederatedDataset::new(clients, SYNTHETIC_CLASSES, SYNTHETIC_DIM)
}
