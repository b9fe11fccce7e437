use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{gen_synthetic, ClientDataset, FederatedDataset, Sample, SamplePool};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for, SimRng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Synthetic { phi1: f64, phi2: f64 },
    LabelShard { shards_per_client: usize },
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub scheme: PartitionScheme,
    pub num_clients: usize,
    /// Samples across all clients, train and test.
    pub total_samples: usize,
    pub power_law_gamma: f64,
    #[serde(default = "default_min_per_client")]
    pub min_per_client: usize,
    pub seed: u64,
}

fn default_min_per_client() -> usize {
    2
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Usage("num_clients must be positive".into()));
        }
        match self.scheme {
            PartitionScheme::Synthetic { phi1, phi2 } if phi1 < 0.0 || phi2 < 0.0 => {
                Err(Error::Usage("phi1/phi2 must be non-negative".into()))
            }
            PartitionScheme::LabelShard { shards_per_client: 0 } => {
                Err(Error::Usage("shards_per_client must be >= 1".into()))
            }
            PartitionScheme::Dirichlet { alpha } if !(alpha > 0.0) => {
                Err(Error::Usage(format!("dirichlet alpha must be > 0, got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    pub fn needs_pool(&self) -> bool {
        !matches!(self.scheme, PartitionScheme::Synthetic { .. })
    }
}

/// Sample counts per client following a rank power law: a seeded random
/// permutation assigns rank `r` to each client, rank weights are
/// `(r + 1)^-gamma`, and everything above `min_per_client` is apportioned by
/// largest remainder so the counts sum to `total` exactly.
pub fn power_law_counts(
    num_clients: usize,
    total: usize,
    gamma: f64,
    min_per_client: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(Error::Usage("num_clients must be positive".into()));
    }
    let floor = num_clients * min_per_client;
    if total < floor {
        return Err(Error::Usage(format!(
            "cannot give {num_clients} clients at least {min_per_client} samples from {total}"
        )));
    }
    let mut rng = rng_for(seed, Stream::Partition, &[0]);
    let mut ranks: Vec<usize> = (0..num_clients).collect();
    ranks.shuffle(&mut rng);
    let weights: Vec<f64> = ranks.iter().map(|&r| ((r + 1) as f64).powf(-gamma)).collect();
    let mut counts = apportion(total - floor, &weights);
    counts.iter_mut().for_each(|c| *c += min_per_client);
    Ok(counts)
}

/// Largest-remainder apportionment of `total` by non-negative `weights`.
/// Ties in the remainder go to the lower index.
pub(crate) fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if !(sum > 0.0) {
        let mut out = vec![total / weights.len(); weights.len()];
        for slot in out.iter_mut().take(total % weights.len()) {
            *slot += 1;
        }
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Draws samples class by class, without replacement until a class runs
/// dry and with replacement afterwards.
struct ClassDrawer<'a> {
    pool: &'a SamplePool,
    remaining: Vec<Vec<usize>>,
    all: Vec<Vec<usize>>,
    warned: Vec<bool>,
}

impl<'a> ClassDrawer<'a> {
    fn new(pool: &'a SamplePool, rng: &mut SimRng) -> Self {
        let all = pool.by_class();
        let remaining = all
            .iter()
            .map(|idx| {
                let mut v = idx.clone();
                v.shuffle(rng);
                v
            })
            .collect();
        ClassDrawer {
            pool,
            remaining,
            warned: vec![false; all.len()],
            all,
        }
    }

    fn present_classes(&self) -> Vec<usize> {
        (0..self.all.len()).filter(|&c| !self.all[c].is_empty()).collect()
    }

    fn draw(&mut self, class: usize, rng: &mut SimRng) -> Sample {
        let idx = match self.remaining[class].pop() {
            Some(i) => i,
            None => {
                if !self.warned[class] {
                    warn!("class {class} exhausted; sampling it with replacement");
                    self.warned[class] = true;
                }
                *self.all[class].choose(rng).expect("class present in pool")
            }
        };
        self.pool.samples[idx].clone()
    }
}

fn finish(pool: &SamplePool, per_client: Vec<Vec<Sample>>, seed: u64) -> Result<FederatedDataset> {
    let clients = per_client
        .into_iter()
        .enumerate()
        .map(|(k, s)| ClientDataset::from_samples(k, s, seed))
        .collect::<Result<Vec<_>>>()?;
    FederatedDataset::new(clients, pool.num_classes, pool.input_dim)
}

/// Each client draws its quota from `shards_per_client` classes picked
/// uniformly at random; classes may be shared between clients.
pub fn label_shard_partition(
    pool: &SamplePool,
    num_clients: usize,
    shards_per_client: usize,
    counts: &[usize],
    seed: u64,
) -> Result<FederatedDataset> {
    if pool.is_empty() {
        return Err(Error::Usage("sample pool is empty".into()));
    }
    if shards_per_client == 0 {
        return Err(Error::Usage("shards_per_client must be >= 1".into()));
    }
    if counts.len() != num_clients {
        return Err(Error::Usage(format!(
            "{} counts given for {num_clients} clients",
            counts.len()
        )));
    }
    let mut rng = rng_for(seed, Stream::Partition, &[1]);
    let mut drawer = ClassDrawer::new(pool, &mut rng);
    let classes = drawer.present_classes();
    let s = shards_per_client.min(classes.len());

    let mut per_client = Vec::with_capacity(num_clients);
    for &quota in counts {
        let mut picked: Vec<usize> = classes.choose_multiple(&mut rng, s).copied().collect();
        picked.sort_unstable();
        let share = apportion(quota, &vec![1.0; picked.len()]);
        let mut samples = Vec::with_capacity(quota);
        for (&class, &m) in picked.iter().zip(&share) {
            for _ in 0..m {
                samples.push(drawer.draw(class, &mut rng));
            }
        }
        per_client.push(samples);
    }
    finish(pool, per_client, seed)
}

/// A point on the probability simplex drawn from `Dirichlet(alpha · 1)`.
/// Sampled in log space so tiny `alpha` does not underflow to all zeros.
pub fn dirichlet_proportions(dim: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::Usage(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    // G(alpha) = G(alpha + 1) · U^(1/alpha)
    let gamma = Gamma::new(alpha + 1.0, 1.0).map_err(|e| Error::Usage(e.to_string()))?;
    let logs: Vec<f64> = (0..dim)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Each client's class mix is drawn from a symmetric Dirichlet; its quota is
/// apportioned across classes by that mix.
pub fn dirichlet_partition(
    pool: &SamplePool,
    num_clients: usize,
    alpha: f64,
    counts: &[usize],
    seed: u64,
) -> Result<FederatedDataset> {
    Ok(dirichlet_partition_with_mix(pool, num_clients, alpha, counts, seed)?.0)
}

pub(crate) fn dirichlet_partition_with_mix(
    pool: &SamplePool,
    num_clients: usize,
    alpha: f64,
    counts: &[usize],
    seed: u64,
) -> Result<(FederatedDataset, Vec<Vec<f64>>)> {
    if pool.is_empty() {
        return Err(Error::Usage("sample pool is empty".into()));
    }
    if counts.len() != num_clients {
        return Err(Error::Usage(format!(
            "{} counts given for {num_clients} clients",
            counts.len()
        )));
    }
    let mut rng = rng_for(seed, Stream::Partition, &[2]);
    let mut drawer = ClassDrawer::new(pool, &mut rng);
    let classes = drawer.present_classes();

    let mut per_client = Vec::with_capacity(num_clients);
    let mut mixes = Vec::with_capacity(num_clients);
    for &quota in counts {
        let q = dirichlet_proportions(classes.len(), alpha, &mut rng)?;
        let share = apportion(quota, &q);
        let mut samples = Vec::with_capacity(quota);
        for (&class, &m) in classes.iter().zip(&share) {
            for _ in 0..m {
                samples.push(drawer.draw(class, &mut rng));
            }
        }
        per_client.push(samples);
        mixes.push(q);
    }
    Ok((finish(pool, per_client, seed)?, mixes))
}

/// Builds the federated dataset described by `spec`. Pool-based schemes
/// require `pool`.
pub fn build_dataset(spec: &PartitionSpec, pool: Option<&SamplePool>) -> Result<FederatedDataset> {
    spec.validate()?;
    let counts = power_law_counts(
        spec.num_clients,
        spec.total_samples,
        spec.power_law_gamma,
        spec.min_per_client,
        derive_seed(spec.seed, Stream::Partition, &[10]),
    )?;
    let need_pool = || pool.ok_or_else(|| Error::Usage("this partition scheme needs a sample pool".into()));
    match spec.scheme {
        PartitionScheme::Synthetic { phi1, phi2 } => gen_synthetic(phi1, phi2, &counts, spec.seed),
        PartitionScheme::LabelShard { shards_per_client } => {
            label_shard_partition(need_pool()?, spec.num_clients, shards_per_client, &counts, spec.seed)
        }
        PartitionScheme::Dirichlet { alpha } => {
            dirichlet_partition(need_pool()?, spec.num_clients, alpha, &counts, spec.seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn pool(per_class: usize, classes: usize) -> SamplePool {
        let samples = (0..per_class * classes)
            .map(|i| Sample::new(vec![i as f64, 0.5], i % classes))
            .collect();
        SamplePool::new(samples).unwrap()
    }

    #[test]
    fn flat_law_is_uniform() {
        let c = power_law_counts(7, 100, 0.0, 2, 9).unwrap();
        let (lo, hi) = (c.iter().min().unwrap(), c.iter().max().unwrap());
        assert!(hi - lo <= 1, "{c:?}");
        assert_eq!(c.iter().sum::<usize>(), 100);
    }

    #[test]
    fn single_client_takes_everything() {
        assert_eq!(power_law_counts(1, 57, 3.0, 2, 0).unwrap(), vec![57]);
    }

    #[test]
    fn counts_always_sum_to_total() {
        for seed in 0..100u64 {
            let k = 1 + (seed as usize % 40);
            let min = seed as usize % 4;
            let total = k * min + (seed as usize * 37) % 5000;
            let gamma = (seed % 5) as f64 * 0.7;
            let c = power_law_counts(k, total, gamma, min, seed).unwrap();
            assert_eq!(c.iter().sum::<usize>(), total);
            assert!(c.iter().all(|&x| x >= min));
        }
    }

    #[test]
    fn infeasible_total_is_rejected() {
        assert!(matches!(power_law_counts(10, 19, 1.0, 2, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn label_shards_limit_client_labels() {
        let p = pool(200, 10);
        let counts = power_law_counts(50, 1500, 1.5, 5, 1).unwrap();
        let ds = label_shard_partition(&p, 50, 2, &counts, 4).unwrap();
        for c in &ds.clients {
            let labels: std::collections::BTreeSet<usize> = c.train.iter().chain(&c.test).map(|s| s.label).collect();
            assert!(labels.len() <= 2);
        }
    }

    #[test]
    fn label_shards_without_exhaustion_draw_a_sub_multiset() {
        let p = pool(500, 10);
        let counts = vec![30; 20];
        let ds = label_shard_partition(&p, 20, 2, &counts, 8).unwrap();
        let mut available: HashMap<u64, usize> = HashMap::new();
        for s in &p.samples {
            *available.entry(s.x[0].to_bits()).or_default() += 1;
        }
        for c in &ds.clients {
            for s in c.train.iter().chain(&c.test) {
                let slot = available.get_mut(&s.x[0].to_bits()).expect("sample from pool");
                assert!(*slot > 0, "sample drawn twice");
                *slot -= 1;
            }
        }
    }

    #[test]
    fn full_shards_may_cover_all_classes() {
        let p = pool(100, 4);
        let ds = label_shard_partition(&p, 3, 4, &[40, 40, 40], 2).unwrap();
        for c in &ds.clients {
            let labels: std::collections::BTreeSet<usize> = c.train.iter().chain(&c.test).map(|s| s.label).collect();
            assert_eq!(labels.len(), 4);
        }
    }

    #[test]
    fn empty_pool_is_rejected() {
        let p = SamplePool {
            samples: Vec::new(),
            num_classes: 0,
            input_dim: 0,
        };
        assert!(label_shard_partition(&p, 1, 1, &[1], 0).is_err());
        assert!(dirichlet_partition(&p, 1, 1.0, &[1], 0).is_err());
    }

    #[test]
    fn dirichlet_mix_is_on_the_simplex() {
        let mut rng = rng_for(3, Stream::Partition, &[]);
        for alpha in [0.001, 0.01, 0.5, 1.0, 1000.0] {
            for _ in 0..50 {
                let q = dirichlet_proportions(10, alpha, &mut rng).unwrap();
                assert!(q.iter().all(|&v| v >= 0.0));
                assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    fn classes_over_one_percent(ds: &FederatedDataset) -> Vec<usize> {
        ds.clients
            .iter()
            .map(|c| {
                let n = c.len() as f64;
                let mut per = vec![0usize; ds.num_classes];
                c.train.iter().chain(&c.test).for_each(|s| per[s.label] += 1);
                per.iter().filter(|&&m| m as f64 / n >= 0.01).count()
            })
            .collect()
    }

    #[test]
    fn dirichlet_concentration_orders_heterogeneity() {
        let p = pool(2000, 10);
        let counts = vec![200; 40];
        let (_, mixes) = dirichlet_partition_with_mix(&p, 40, 1000.0, &counts, 5).unwrap();
        let mean_dev: f64 = mixes
            .iter()
            .map(|q| q.iter().map(|v| (v - 0.1).abs() / 0.1).sum::<f64>() / q.len() as f64)
            .sum::<f64>()
            / mixes.len() as f64;
        assert!(mean_dev < 0.05, "mean relative deviation {mean_dev}");

        let iid = dirichlet_partition(&p, 40, 1000.0, &counts, 5).unwrap();
        let skew = dirichlet_partition(&p, 40, 0.01, &counts, 5).unwrap();
        let mut a = classes_over_one_percent(&iid);
        let mut b = classes_over_one_percent(&skew);
        a.sort_unstable();
        b.sort_unstable();
        let (ma, mb) = (a[a.len() / 2], b[b.len() / 2]);
        assert!(mb <= 2, "median classes at alpha=0.01: {mb}");
        assert!(mb < ma);
    }

    #[test]
    fn partitions_are_deterministic() {
        let p = pool(50, 10);
        let spec = PartitionSpec {
            scheme: PartitionScheme::Dirichlet { alpha: 0.5 },
            num_clients: 12,
            total_samples: 400,
            power_law_gamma: 1.0,
            min_per_client: 2,
            seed: 77,
        };
        assert_eq!(
            build_dataset(&spec, Some(&p)).unwrap(),
            build_dataset(&spec, Some(&p)).unwrap()
        );
    }
}
