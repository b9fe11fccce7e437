//! Oracle and property suites that can run from the command line in a few
//! seconds. Each suite checks the library against an independent
//! re-derivation rather than against itself.

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agg::{
    deviation, fairness_attention, fedavg_attention, federated_attention, normalize_attention, FedProtoVariant,
    StrategyConfig,
};
use crate::config::{CellGroup, CentralizedSettings, DatasetConfig, ExperimentManifest, SimSettings, SyntheticDataset};
use crate::data::{gen_synthetic, ClientDataset, FederatedDataset, Sample};
use crate::engine::{aggregate_round, run_round, run_simulation, RoundState, SimConfig};
use crate::experiment::run_experiment;
use crate::metrics::{mmd, mmd_biased, moving_average};
use crate::nn::{local_train, loss_and_grad, ModelSpec, ParamSet, TrainOptions};
use crate::proto::{aggregate_prototypes, spm, MarginVector, NormalizedPrototypeSet, PrototypeSet};

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub id: char,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<T>(r: crate::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Runs every suite in order.
pub fn run_all() -> Vec<SuiteResult> {
    let suites: [(char, &'static str, fn() -> Check); 10] = [
        ('a', "finite-difference gradient", gradient_check),
        ('b', "prototype margin oracle", margin_oracle),
        ('c', "attention sums to one", attention_sums),
        (
            'd',
            "prototype aggregation is a convex combination",
            prototype_aggregation,
        ),
        ('e', "first-round attention equals size weights", first_round_attention),
        ('f', "uniform margins reduce to fairness", uniform_margins),
        ('g', "single-client federation equals centralized SGD", single_client),
        ('h', "byte-identical reruns", determinism),
        ('i', "MMD identity and two-sample ordering", mmd_checks),
        ('j', "moving average prefix-sum oracle", moving_average_oracle),
    ];
    suites
        .into_iter()
        .map(|(id, name, f)| {
            let start = Instant::now();
            let outcome = f();
            SuiteResult {
                id,
                name,
                passed: outcome.is_ok(),
                detail: outcome.unwrap_or_else(|e| e),
                elapsed: start.elapsed(),
            }
        })
        .collect()
}

// -- (a) ----------------------------------------------------------------

fn naive_loss(params: &ParamSet, batch: &[Sample]) -> (f64, Vec<bool>) {
    let last = params.layers().len() - 1;
    let mut pattern = Vec::new();
    let mut total = 0.0;
    for s in batch {
        let mut act = s.x.clone();
        for (i, l) in params.layers().iter().enumerate() {
            act = (0..l.weight.nrows())
                .map(|r| {
                    let z = l.bias[r] + (0..l.weight.ncols()).map(|c| l.weight[[r, c]] * act[c]).sum::<f64>();
                    if i < last {
                        pattern.push(z > 0.0);
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
        }
        let max = act.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + act.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - act[s.label];
    }
    (total / batch.len() as f64, pattern)
}

fn gradient_check() -> Check {
    let spec = ModelSpec::mlp(4, &[6, 5], 3);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut checked = 0;
    for seed in 0..20u64 {
        let params = ParamSet::init(&spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let batch: Vec<Sample> = (0..5)
            .map(|_| {
                Sample::new(
                    (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    rng.random_range(0..3),
                )
            })
            .collect();
        let (_, grad) = e2s(loss_and_grad(&params, &spec, &batch))?;
        let analytic = grad.to_flat();
        let base_pattern = naive_loss(&params, &batch).1;
        let flat = params.to_flat();
        for i in 0..flat.len() {
            let mut p = params.clone();
            let mut f = flat.clone();
            f[i] += eps;
            e2s(p.set_flat(&f))?;
            let (up, pu) = naive_loss(&p, &batch);
            f[i] -= 2.0 * eps;
            e2s(p.set_flat(&f))?;
            let (down, pd) = naive_loss(&p, &batch);
            if pu != base_pattern || pd != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!(
        "{checked} coordinates over 20 seeds, max rel err {worst:.2e}, {skipped} at ReLU kinks"
    ))
}

// -- (b) ----------------------------------------------------------------

fn random_normalized(rng: &mut ChaCha8Rng, dim: usize, classes: usize) -> NormalizedPrototypeSet {
    let set = PrototypeSet::from_classes(
        dim,
        (0..classes)
            .filter(|_| rng.random_bool(0.8))
            .collect::<Vec<_>>()
            .into_iter()
            .map(|c| {
                (
                    c,
                    (0..dim).map(|_| rng.random_range(0.0..=1.0)).collect(),
                    rng.random_range(1..20),
                )
            }),
    )
    .expect("valid set");
    NormalizedPrototypeSet::new(set).expect("entries in [0, 1]")
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn margin_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut compared = 0;
    for _ in 0..200 {
        let p = random_normalized(&mut rng, 5, 6);
        let q = random_normalized(&mut rng, 5, 6);
        let got = spm(&p, &q);
        let shared: Vec<usize> = (0..6).filter(|&c| p.get(c).is_some() && q.get(c).is_some()).collect();
        ensure(got.keys().copied().eq(shared.iter().copied()), || {
            "margin keys differ from shared classes".into()
        })?;
        for &c in &shared {
            let pc = &p.get(c).expect("shared").vector;
            let d_plus = dist(pc, &q.get(c).expect("shared").vector);
            let expected = if shared.len() < 2 {
                0.0
            } else {
                let d_minus = shared
                    .iter()
                    .filter(|&&o| o != c)
                    .map(|&o| dist(pc, &q.get(o).expect("shared").vector))
                    .sum::<f64>()
                    / (shared.len() - 1) as f64;
                if d_minus + d_plus == 0.0 {
                    0.0
                } else {
                    (d_minus - d_plus) / (d_minus + d_plus)
                }
            };
            let v = got[&c];
            ensure((v - expected).abs() <= 1e-12, || {
                format!("class {c}: {v} vs oracle {expected}")
            })?;
            ensure((-1.0..=1.0).contains(&v), || format!("margin {v} outside [-1, 1]"))?;
            compared += 1;
        }
    }
    Ok(format!("200 pairs, {compared} class margins"))
}

// -- (c) ----------------------------------------------------------------

fn attention_sums() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let k = rng.random_range(1..=20);
        let margins: BTreeMap<usize, MarginVector> = (0..k)
            .map(|c| {
                let m = (0..rng.random_range(0..10))
                    .map(|cls| (cls, rng.random_range(-1.0..=1.0)))
                    .collect();
                (c, m)
            })
            .collect();
        let a = e2s(normalize_attention(&deviation(&margins)))?;
        let sum: f64 = a.iter().map(|(_, w)| w).sum();
        ensure(a.iter().all(|(_, w)| w >= 0.0), || "negative weight".into())?;
        worst = worst.max((sum - 1.0).abs());
    }
    ensure(worst <= 1e-9, || format!("sum off by {worst:e}"))?;
    Ok(format!("500 vectors, max |Σa − 1| = {worst:.1e}"))
}

// -- (d) ----------------------------------------------------------------

fn prototype_aggregation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let sets: Vec<NormalizedPrototypeSet> = (0..rng.random_range(1..6))
            .map(|_| random_normalized(&mut rng, 4, 5))
            .collect();
        let agg = e2s(aggregate_prototypes(&sets))?;
        for c in 0..5 {
            let members: Vec<(&[f64], usize)> = sets
                .iter()
                .filter_map(|s| s.get(c).map(|p| (p.vector.as_slice(), p.count)))
                .collect();
            let Some(out) = agg.get(c) else {
                ensure(members.is_empty(), || format!("class {c} missing from aggregate"))?;
                continue;
            };
            let n: usize = members.iter().map(|m| m.1).sum();
            ensure(out.count == n, || format!("class {c} count {} vs {n}", out.count))?;
            for j in 0..4 {
                let expected: f64 = members.iter().map(|(v, k)| *k as f64 / n as f64 * v[j]).sum();
                let lo = members.iter().map(|m| m.0[j]).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|m| m.0[j]).fold(f64::NEG_INFINITY, f64::max);
                let v = out.vector[j];
                ensure((v - expected).abs() <= 1e-12, || {
                    format!("class {c}: {v} vs {expected}")
                })?;
                ensure(v >= lo - 1e-12 && v <= hi + 1e-12, || {
                    format!("class {c}: {v} outside hull")
                })?;
            }
        }
    }
    Ok("100 random aggregations".into())
}

// -- (e) ----------------------------------------------------------------

fn first_round_attention() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let sizes: BTreeMap<usize, usize> = (0..rng.random_range(1..12))
            .map(|k| (k * 3, rng.random_range(1..5000)))
            .collect();
        let dummy = e2s(fairness_attention(sizes.keys().copied()))?;
        let fed = e2s(federated_attention(&dummy, &dummy, 0, &sizes))?;
        let avg = e2s(fedavg_attention(&sizes))?;
        ensure(fed == avg, || format!("{fed:?} != {avg:?}"))?;
    }
    Ok("200 size maps, bitwise equal".into())
}

// -- (f), (g), (h) ------------------------------------------------------

fn small_dataset(sizes: &[usize], seed: u64) -> std::result::Result<FederatedDataset, String> {
    e2s(gen_synthetic(1.0, 1.0, sizes, seed))
}

fn uniform_margins() -> Check {
    let ds = small_dataset(&[12, 15, 9, 20], 2)?;
    let spec = ModelSpec::mlp(60, &[8], 10);
    let config = SimConfig {
        clients_per_round: 4,
        local_epochs: 2,
        lr: 0.05,
        ..SimConfig::new(StrategyConfig::fedproto(FedProtoVariant::Full))
    };
    let state = RoundState::begin(
        2,
        ParamSet::init(&spec, 4),
        NormalizedPrototypeSet::empty(8),
        &config,
        &ds,
    )
    .map_err(|e| e.to_string())?;
    let mut reports = e2s(run_round(&state, &config, &spec, &ds))?.reports;
    for r in &mut reports {
        r.lpm = MarginVector::from([(1, 0.25), (4, -0.5)]);
    }
    let proto = e2s(aggregate_round(&state, &config, reports.clone()))?;
    let fair_cfg = SimConfig {
        strategy: StrategyConfig::fairness(),
        ..config
    };
    let fair = e2s(aggregate_round(&state, &fair_cfg, reports))?;
    ensure(proto.attention == fair.attention, || "attention differs".into())?;
    ensure(proto.global_params == fair.global_params, || {
        "aggregated parameters differ".into()
    })?;
    Ok("attention and parameters bitwise equal".into())
}

fn single_client() -> Check {
    let base = small_dataset(&[40], 6)?;
    let train = base.clients[0].train.clone();
    let ds = e2s(FederatedDataset::new(
        vec![ClientDataset {
            client_id: 0,
            train: train.clone(),
            test: base.clients[0].test.clone(),
        }],
        10,
        60,
    ))?;
    let spec = ModelSpec::mlp(60, &[8], 10);
    let config = SimConfig {
        rounds: 3,
        local_epochs: 2,
        clients_per_round: 1,
        batch_size: train.len(),
        lr: 0.05,
        seed: 3,
        ..SimConfig::new(StrategyConfig::fedavg())
    };
    let fed = e2s(run_simulation(&config, &spec, &ds, None))?.final_params;
    let opts = TrainOptions {
        epochs: config.total_rounds() * config.local_epochs,
        lr: config.lr,
        batch_size: train.len(),
        proximal: None,
    };
    let central = e2s(local_train(
        &ParamSet::init(&spec, config.seed),
        &spec,
        &train,
        &opts,
        0,
    ))?;
    let diff = fed.max_abs_diff(&central);
    ensure(diff < 1e-12, || format!("max parameter difference {diff:e}"))?;
    Ok(format!("max parameter difference {diff:.1e}"))
}

fn determinism() -> Check {
    let root = std::env::temp_dir().join(format!("fedproto-selftest-{}", std::process::id()));
    let manifest = |dir: &str| ExperimentManifest {
        output_dir: root.join(dir),
        cache_dir: Some(root.join("cache")),
        seeds: vec![5],
        dataset: DatasetConfig::Synthetic(SyntheticDataset {
            phi1: 1.0,
            phi2: 1.0,
            num_clients: 6,
            total_samples: 120,
            power_law_gamma: 1.0,
            min_per_client: 4,
            seed: 2,
        }),
        model: crate::config::ModelSettings { hidden_dims: vec![8] },
        sim: SimSettings {
            rounds: 3,
            local_epochs: 2,
            clients_per_round: 3,
            lr: 0.05,
            mmd_every: 1,
            ..SimSettings::default()
        },
        centralized: CentralizedSettings {
            epochs: 2,
            ..CentralizedSettings::default()
        },
        cells: vec![CellGroup {
            strategy: crate::agg::StrategyKind::Fedproto,
            deltas: vec![0.5],
            tolerate_stragglers: None,
            variant: None,
            prox_mu: None,
        }],
    };
    let result = (|| {
        let mut files = Vec::new();
        for dir in ["first", "second"] {
            let m = manifest(dir);
            let outcome = e2s(run_experiment(&m, None))?;
            ensure(outcome.failures.is_empty(), || format!("{:?}", outcome.failures))?;
            let path = m.output_dir.join("fedproto_d0.5_s5").join("rounds.csv");
            files.push(fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?);
        }
        ensure(files[0] == files[1], || "rounds.csv differs between runs".into())?;
        Ok(format!("{} bytes identical", files[0].len()))
    })();
    let _ = fs::remove_dir_all(&root);
    result
}

// -- (i), (j) -----------------------------------------------------------

fn gaussian(rng: &mut ChaCha8Rng, n: usize, dim: usize, shift: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |_| rng.sample::<f64, _>(StandardNormal) + shift)
}

fn mmd_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = gaussian(&mut rng, 60, 3, 0.0);
    let p2 = gaussian(&mut rng, 60, 3, 0.0);
    let q = gaussian(&mut rng, 60, 3, 2.0);
    let same = e2s(mmd_biased(p.view(), p.view()))?;
    ensure(same.abs() < 1e-12, || format!("biased mmd(p, p) = {same:e}"))?;
    let near = e2s(mmd(p.view(), p2.view()))?;
    let far = e2s(mmd(p.view(), q.view()))?;
    ensure(far > near, || {
        format!("mmd(p, q) = {far} not above mmd(p, p') = {near}")
    })?;
    ensure(mmd(p.view().slice(ndarray::s![..1, ..]), q.view()).is_err(), || {
        "single sample accepted".into()
    })?;
    Ok(format!("mmd(p,p)={same:.1e}, mmd(p,p')={near:.4}, mmd(p,q)={far:.4}"))
}

fn moving_average_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let len = rng.random_range(1..80);
        let series: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let frac = rng.random_range(0.0..1.0);
        let w = ((frac * len as f64).ceil() as usize).max(1);
        let mut prefix = vec![0.0];
        for v in &series {
            prefix.push(prefix.last().expect("non-empty") + v);
        }
        let got = moving_average(&series, frac);
        for i in 0..len {
            let lo = (i + 1usize).saturating_sub(w);
            let expected = (prefix[i + 1] - prefix[lo]) / (i + 1 - lo) as f64;
            ensure((got[i] - expected).abs() < 1e-9, || {
                format!("index {i}: {} vs {expected}", got[i])
            })?;
        }
    }
    Ok("200 random series".into())
}
