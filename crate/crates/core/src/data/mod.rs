//! Federated dataset construction: synthetic generation, label-sharded and
//! Dirichlet partitioning of a sample pool, local train/test splits, IDX
//! ingestion and a JSONL cache.

mod cache;
mod idx;
mod partition;
mod synthetic;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use cache::{load_dataset, save_dataset, DatasetCache};
pub use idx::{load_idx, load_idx_images, load_idx_labels, write_idx_pair};
pub use partition::{
    build_dataset, dirichlet_partition, dirichlet_proportions, label_shard_partition, power_law_counts,
    PartitionScheme, PartitionSpec,
};
pub use synthetic::{gen_synthetic, SYNTHETIC_CLASSES, SYNTHETIC_DIM};

use crate::error::{Error, Result};
use crate::seed::{rng_for, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, label: usize) -> Self {
        Sample { x, label }
    }
}

/// A labeled sample pool, e.g. a loaded IDX file pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePool {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl SamplePool {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Usage("sample pool is empty".into()))?;
        let input_dim = first.x.len();
        if samples.iter().any(|s| s.x.len() != input_dim) {
            return Err(Error::Shape("pool samples differ in dimensionality".into()));
        }
        let num_classes = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
        Ok(SamplePool {
            samples,
            num_classes,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples per class, in pool order.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label].push(i);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ClientDataset {
    /// Splits `samples` 80/20 after a shuffle seeded by `(seed, client_id)`.
    pub fn from_samples(client_id: usize, samples: Vec<Sample>, seed: u64) -> Result<Self> {
        let (train, test) = split_80_20(
            samples,
            crate::seed::derive_seed(seed, Stream::Split, &[client_id as u64]),
        )?;
        Ok(ClientDataset { client_id, train, test })
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train_labels(&self) -> std::collections::BTreeSet<usize> {
        self.train.iter().map(|s| s.label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub clients: Vec<ClientDataset>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl FederatedDataset {
    pub fn new(clients: Vec<ClientDataset>, num_classes: usize, input_dim: usize) -> Result<Self> {
        let ds = FederatedDataset {
            clients,
            num_classes,
            input_dim,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.clients.iter().enumerate() {
            if c.client_id != i {
                return Err(Error::Usage(format!(
                    "client ids must be dense; position {i} holds id {}",
                    c.client_id
                )));
            }
            if c.train.is_empty() {
                return Err(Error::Usage(format!("client {i} has an empty training split")));
            }
            for s in c.train.iter().chain(&c.test) {
                if s.label >= self.num_classes {
                    return Err(Error::Usage(format!(
                        "client {i} has label {} outside 0..{}",
                        s.label, self.num_classes
                    )));
                }
                if s.x.len() != self.input_dim {
                    return Err(Error::Shape(format!(
                        "client {i} has a sample of length {}, expected {}",
                        s.x.len(),
                        self.input_dim
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Total sample count, train and test.
    pub fn total_samples(&self) -> usize {
        self.clients.iter().map(ClientDataset::len).sum()
    }

    pub fn total_train(&self) -> usize {
        self.clients.iter().map(ClientDataset::n_train).sum()
    }

    pub fn pooled_train(&self) -> Vec<Sample> {
        self.clients.iter().flat_map(|c| c.train.iter().cloned()).collect()
    }

    pub fn pooled_test(&self) -> Vec<Sample> {
        self.clients.iter().flat_map(|c| c.test.iter().cloned()).collect()
    }
}

/// Shuffles and splits at `min(⌈0.8·n⌉, n − 1)` so the test split is never
/// empty.
pub fn split_80_20(mut samples: Vec<Sample>, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Usage(format!(
            "need at least 2 samples for a train/test split, got {n}"
        )));
    }
    let mut rng = rng_for(seed, Stream::Split, &[]);
    samples.shuffle(&mut rng);
    let cut = ((4 * n).div_ceil(5)).min(n - 1);
    let test = samples.split_off(cut);
    Ok((samples, test))
}
