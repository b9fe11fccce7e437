//! Evaluation instruments: accuracy, loss, gradient dissimilarity, prototype
//! margins of the aggregate, feature-distribution discrepancy and smoothing.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{FederatedDataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{backprop_into, embed, predict, ModelSpec, ParamSet};
use crate::proto::{euclidean, margin_distances, PrototypeSet};
use crate::seed::{rng_for, Stream};

/// Cap on feature samples per side of an MMD estimate.
pub const MMD_MAX_SAMPLES: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub grad_dissimilarity: f64,
    pub amm: f64,
    pub mmd: Option<f64>,
    pub attention_entropy: f64,
}

/// Fraction of correctly classified test samples over all clients, so each
/// client counts in proportion to its test split.
pub fn accuracy(params: &ParamSet, spec: &ModelSpec, dataset: &FederatedDataset) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for c in &dataset.clients {
        if c.test.is_empty() {
            continue;
        }
        correct += count_correct(params, spec, &c.test)?;
        total += c.test.len();
    }
    if total == 0 {
        return Err(Error::Usage("no test samples to evaluate".into()));
    }
    Ok(correct as f64 / total as f64)
}

pub fn count_correct(params: &ParamSet, spec: &ModelSpec, samples: &[Sample]) -> Result<usize> {
    Ok(predict(params, spec, samples)?
        .into_iter()
        .zip(samples)
        .filter(|(p, s)| *p == s.label)
        .count())
}

/// Training loss and gradient dissimilarity of one model, computed from the
/// same full-batch client gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingDiagnostics {
    /// Size-weighted mean training loss.
    pub loss: f64,
    pub grad_dissimilarity: f64,
}

pub fn training_diagnostics(
    params: &ParamSet,
    spec: &ModelSpec,
    dataset: &FederatedDataset,
) -> Result<TrainingDiagnostics> {
    // two passes so only one client gradient is alive at a time
    let n_total = dataset.total_train() as f64;
    let mut g = ParamSet::zeros(spec);
    let mut global = ParamSet::zeros(spec);
    let mut loss = 0.0;
    for c in &dataset.clients {
        let w = c.n_train() as f64 / n_total;
        loss += w * backprop_into(params, spec, c.train.iter(), &mut g)?;
        global.add_scaled(&g, w)?;
    }
    let mut total = 0.0;
    for c in &dataset.clients {
        backprop_into(params, spec, c.train.iter(), &mut g)?;
        total += g.iter().zip(global.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(TrainingDiagnostics {
        loss,
        grad_dissimilarity: total / dataset.num_clients() as f64,
    })
}

/// `(1/|K|) Σ_k ‖∇L_k − ∇L‖²` with `∇L` the size-weighted mean gradient.
pub fn grad_dissimilarity(params: &ParamSet, spec: &ModelSpec, dataset: &FederatedDataset) -> Result<f64> {
    Ok(training_diagnostics(params, spec, dataset)?.grad_dissimilarity)
}

/// Mean inter-class distance between the prototypes of `protos`, which are
/// expected unnormalized. Zero with fewer than two classes.
pub fn amm(protos: &PrototypeSet) -> f64 {
    let classes: Vec<&[f64]> = protos
        .iter()
        .filter(|(_, p)| p.count > 0)
        .map(|(_, p)| p.vector.as_slice())
        .collect();
    let k = classes.len();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, a) in classes.iter().enumerate() {
        let d_minus: f64 = classes
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, b)| euclidean(a, b))
            .sum::<f64>()
            / (k - 1) as f64;
        total += d_minus;
    }
    total / k as f64
}

/// The ratio-form margin of a set against itself, averaged over classes. The
/// same-class distance is zero, so this is 1 whenever two classes differ.
pub fn amm_literal(protos: &PrototypeSet) -> f64 {
    let margins = margin_distances(protos, protos);
    if margins.is_empty() {
        return 0.0;
    }
    let total: f64 = margins
        .values()
        .map(|&(d_plus, d_minus)| match d_minus {
            Some(d) if d + d_plus > 0.0 => (d - d_plus) / (d + d_plus),
            _ => 0.0,
        })
        .sum();
    total / margins.len() as f64
}

fn sq_dists(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let na: Vec<f64> = a.outer_iter().map(|r| r.dot(&r)).collect();
    let nb: Vec<f64> = b.outer_iter().map(|r| r.dot(&r)).collect();
    let mut g = a.dot(&b.t());
    for ((i, j), v) in g.indexed_iter_mut() {
        *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
    }
    g
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, hi, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo + hi) / 2.0
    }
}

struct KernelSums {
    xx: f64,
    yy: f64,
    xy: f64,
    xx_diag: f64,
    yy_diag: f64,
}

/// Squared distances within one sample, plus its distinct pairwise
/// distances.
#[derive(Debug)]
struct SelfDistances {
    sq: Array2<f64>,
    pairs: Vec<f64>,
}

impl SelfDistances {
    fn new(x: ArrayView2<f64>) -> Self {
        let sq = sq_dists(x, x);
        let mut pairs = Vec::with_capacity(sq.nrows() * sq.nrows().saturating_sub(1) / 2);
        for i in 0..sq.nrows() {
            pairs.extend((i + 1..sq.ncols()).map(|j| sq[[i, j]].sqrt()));
        }
        SelfDistances { sq, pairs }
    }
}

fn kernel_sums(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<KernelSums> {
    kernel_sums_against(p, q, &SelfDistances::new(q))
}

fn kernel_sums_against(p: ArrayView2<f64>, q: ArrayView2<f64>, qq: &SelfDistances) -> Result<KernelSums> {
    if p.ncols() != q.ncols() {
        return Err(Error::Shape(format!(
            "feature samples differ in dimension: {} vs {}",
            p.ncols(),
            q.ncols()
        )));
    }
    let pp = SelfDistances::new(p);
    let dxy = sq_dists(p, q);
    // median heuristic over all distinct pooled pairs
    let mut pairwise: Vec<f64> = Vec::with_capacity(pp.pairs.len() + qq.pairs.len() + dxy.len());
    pairwise.extend_from_slice(&pp.pairs);
    pairwise.extend_from_slice(&qq.pairs);
    pairwise.extend(dxy.iter().map(|v| v.sqrt()));
    let h = median(&mut pairwise).max(1e-12);
    let gamma = 1.0 / (2.0 * h * h);
    let k = |d: &Array2<f64>| d.iter().map(|&v| (-gamma * v).exp()).sum::<f64>();
    let diag = |d: &Array2<f64>| d.diag().iter().map(|&v| (-gamma * v).exp()).sum::<f64>();
    Ok(KernelSums {
        xx: k(&pp.sq),
        yy: k(&qq.sq),
        xy: k(&dxy),
        xx_diag: diag(&pp.sq),
        yy_diag: diag(&qq.sq),
    })
}

fn check_sizes(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<()> {
    if p.nrows() < 2 || q.nrows() < 2 {
        return Err(Error::Usage(format!(
            "MMD needs at least 2 samples per side, got {} and {}",
            p.nrows(),
            q.nrows()
        )));
    }
    Ok(())
}

/// Unbiased squared MMD with a Gaussian kernel and median-heuristic
/// bandwidth. May be slightly negative.
pub fn mmd(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<f64> {
    check_sizes(p, q)?;
    Ok(unbiased(p, q, &kernel_sums(p, q)?))
}

fn unbiased(p: ArrayView2<f64>, q: ArrayView2<f64>, s: &KernelSums) -> f64 {
    let (m, n) = (p.nrows() as f64, q.nrows() as f64);
    (s.xx - s.xx_diag) / (m * (m - 1.0)) + (s.yy - s.yy_diag) / (n * (n - 1.0)) - 2.0 * s.xy / (m * n)
}

/// Biased (V-statistic) squared MMD with the same kernel. Zero for identical
/// samples.
pub fn mmd_biased(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<f64> {
    check_sizes(p, q)?;
    let s = kernel_sums(p, q)?;
    let (m, n) = (p.nrows() as f64, q.nrows() as f64);
    Ok(s.xx / (m * m) + s.yy / (n * n) - 2.0 * s.xy / (m * n))
}

fn subsample(samples: &[Sample], cap: usize, seed: u64, tag: u64) -> Vec<Sample> {
    if samples.len() <= cap {
        return samples.to_vec();
    }
    let mut rng = rng_for(seed, Stream::MmdSubsample, &[tag]);
    let mut idx = sample(&mut rng, samples.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| samples[i].clone()).collect()
}

/// Centralized-model features of the pooled test data, the fixed reference
/// side of every federated MMD estimate.
#[derive(Debug, Clone)]
pub struct MmdReference {
    features: Array2<f64>,
    distances: Arc<SelfDistances>,
    seed: u64,
}

impl MmdReference {
    pub fn new(centralized: &ParamSet, spec: &ModelSpec, dataset: &FederatedDataset, seed: u64) -> Result<Self> {
        let pooled = dataset.pooled_test();
        let q = subsample(&pooled, MMD_MAX_SAMPLES, seed, u64::MAX);
        if q.len() < 2 {
            return Err(Error::Usage("pooled test data has fewer than 2 samples".into()));
        }
        let features = embed(centralized, spec, &q)?;
        Ok(MmdReference {
            distances: Arc::new(SelfDistances::new(features.view())),
            features,
            seed,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    /// Mean over `clients` of `mmd(P_k, Q)`, where `P_k` are the features of
    /// `global` on client k's test split. Clients with fewer than two test
    /// samples are skipped; `None` if none remain.
    pub fn federated_mmd(
        &self,
        global: &ParamSet,
        spec: &ModelSpec,
        dataset: &FederatedDataset,
        clients: &[usize],
    ) -> Result<Option<f64>> {
        let mut values = Vec::with_capacity(clients.len());
        for &k in clients {
            let client = dataset
                .clients
                .get(k)
                .ok_or_else(|| Error::Usage(format!("unknown client {k}")))?;
            if client.test.len() < 2 {
                continue;
            }
            let p = subsample(&client.test, MMD_MAX_SAMPLES, self.seed, k as u64);
            let feats = embed(global, spec, &p)?;
            let sums = kernel_sums_against(feats.view(), self.features.view(), &self.distances)?;
            values.push(unbiased(feats.view(), self.features.view(), &sums));
        }
        if values.is_empty() {
            return Ok(None);
        }
        Ok(Some(values.iter().sum::<f64>() / values.len() as f64))
    }
}

/// One-shot federated MMD; builds the reference features first.
pub fn federated_mmd(
    global: &ParamSet,
    centralized: &ParamSet,
    spec: &ModelSpec,
    dataset: &FederatedDataset,
    clients: &[usize],
    seed: u64,
) -> Result<Option<f64>> {
    MmdReference::new(centralized, spec, dataset, seed)?.federated_mmd(global, spec, dataset, clients)
}

/// Relative MMD gain of `a` over the baseline `b`, in percent.
pub fn ffd(mmd_a: f64, mmd_b: f64) -> Result<f64> {
    if mmd_b == 0.0 || !mmd_b.is_finite() || !mmd_a.is_finite() {
        return Err(Error::Usage(format!(
            "FFD undefined for baseline MMD {mmd_b} (candidate {mmd_a})"
        )));
    }
    Ok((mmd_b - mmd_a) / mmd_b * 100.0)
}

/// Trailing mean with window `max(1, ⌈frac·len⌉)`; the first entries average
/// over the available prefix.
pub fn moving_average(series: &[f64], window_frac: f64) -> Vec<f64> {
    let w = ((window_frac * series.len() as f64).ceil() as usize).max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for i in 0..series.len() {
        sum += series[i];
        if i >= w {
            sum -= series[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}
