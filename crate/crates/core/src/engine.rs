//! The federated round loop: client sampling, straggler simulation, local
//! training, prototype exchange and server aggregation.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::index::{sample, sample_weighted};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agg::{
    aggregate_weights, deviation, dplus_deviation, fairness_attention, fedavg_attention, federated_attention,
    normalize_attention, AttentionVector, ClientId, DeviationVector, FedProtoVariant, StrategyConfig, StrategyKind,
};
use crate::data::FederatedDataset;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, amm, training_diagnostics, MmdReference, RoundRecord};
use crate::nn::{local_train, ModelSpec, ParamSet, Proximal, TrainOptions};
use crate::proto::{
    aggregate_prototypes, aggregate_raw, apm, extract_prototypes, lpm, minmax_normalize, MarginVector,
    NormalizedPrototypeSet, PrototypeSet,
};
use crate::seed::{derive_seed, rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Probability proportional to the client's training-set size.
    #[default]
    Proportional,
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub strategy: StrategyConfig,
    /// Nominal round count; the loop runs `⌈1.1·rounds⌉` rounds.
    pub rounds: usize,
    pub local_epochs: usize,
    pub clients_per_round: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub delta: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// MMD is costly; it is estimated every `mmd_every` rounds and on the
    /// final round.
    pub mmd_every: usize,
    pub moving_avg_window_frac: f64,
    #[serde(default)]
    pub sampling: Sampling,
}

impl SimConfig {
    pub fn new(strategy: StrategyConfig) -> Self {
        SimConfig {
            strategy,
            rounds: 200,
            local_epochs: 20,
            clients_per_round: 10,
            lr: 0.01,
            lr_schedule: LrSchedule::Constant,
            batch_size: 10,
            delta: 0.0,
            seed: 0,
            eval_every: 1,
            mmd_every: 10,
            moving_avg_window_frac: 0.1,
            sampling: Sampling::Proportional,
        }
    }

    /// Rounds actually executed, 10% beyond the nominal count.
    pub fn total_rounds(&self) -> usize {
        (self.rounds * 11).div_ceil(10)
    }

    pub fn validate(&self, dataset: &FederatedDataset) -> Result<()> {
        self.strategy.validate()?;
        let fail = |m: String| Err(Error::Usage(m));
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return fail("local_epochs must be at least 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > dataset.num_clients() {
            return fail(format!(
                "clients_per_round must be in 1..={}, got {}",
                dataset.num_clients(),
                self.clients_per_round
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return fail(format!("delta must be in [0, 1], got {}", self.delta));
        }
        if self.eval_every == 0 || self.mmd_every == 0 {
            return fail("eval_every and mmd_every must be at least 1".into());
        }
        if !(self.moving_avg_window_frac >= 0.0 && self.moving_avg_window_frac <= 1.0) {
            return fail("moving_avg_window_frac must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// Server state at the start of round `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    pub t: usize,
    pub global_params: ParamSet,
    /// Aggregate prototypes from the previous round.
    pub global_protos: NormalizedPrototypeSet,
    pub selected: Vec<ClientId>,
    pub straggler_epochs: BTreeMap<ClientId, usize>,
}

impl RoundState {
    /// Draws the round's clients and stragglers.
    pub fn begin(
        t: usize,
        global_params: ParamSet,
        global_protos: NormalizedPrototypeSet,
        config: &SimConfig,
        dataset: &FederatedDataset,
    ) -> Result<Self> {
        let selected = sample_clients(dataset, config.clients_per_round, config.sampling, config.seed, t)?;
        let straggler_epochs = assign_stragglers(&selected, config.delta, config.local_epochs, config.seed, t);
        Ok(RoundState {
            t,
            global_params,
            global_protos,
            selected,
            straggler_epochs,
        })
    }
}

/// Everything a client sends back after local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: ClientId,
    pub updated_params: ParamSet,
    pub lpm: MarginVector,
    /// `σ(Σ d⁺)` between the client's prototypes before and after training.
    pub lpm_dplus: f64,
    pub local_protos: NormalizedPrototypeSet,
    /// Unnormalized prototypes, used only for the margin metric.
    pub raw_protos: PrototypeSet,
    pub epochs_done: usize,
    pub n_train: usize,
}

/// Result of one server step.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub global_params: ParamSet,
    pub global_protos: NormalizedPrototypeSet,
    /// Count-weighted unnormalized prototypes of the aggregated reports.
    pub raw_protos: Option<PrototypeSet>,
    pub reports: Vec<ClientReport>,
    /// `None` when every report was discarded.
    pub attention: Option<AttentionVector>,
}

/// Weighted draw of `k` distinct clients, returned in ascending order.
pub fn sample_clients(
    population: &FederatedDataset,
    k: usize,
    weighting: Sampling,
    seed: u64,
    t: usize,
) -> Result<Vec<ClientId>> {
    let n = population.num_clients();
    if k > n {
        return Err(Error::Usage(format!("cannot sample {k} of {n} clients")));
    }
    let mut rng = rng_for(seed, Stream::Sampling, &[t as u64]);
    let picked = match weighting {
        Sampling::Proportional => {
            let total = population.total_train() as f64;
            sample_weighted(&mut rng, n, |i| population.clients[i].n_train() as f64 / total, k)
                .map_err(|e| Error::Usage(format!("client sampling failed: {e}")))?
        }
        Sampling::Iid => sample(&mut rng, n, k),
    };
    let mut ids = picked.into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Picks `⌊delta·|selected|⌋` stragglers, each with a reduced epoch budget
/// drawn uniformly from `0..local_epochs`.
pub fn assign_stragglers(
    selected: &[ClientId],
    delta: f64,
    local_epochs: usize,
    seed: u64,
    t: usize,
) -> BTreeMap<ClientId, usize> {
    // the epsilon keeps e.g. 0.8·10 from rounding down to 7
    let count = ((delta * selected.len() as f64) + 1e-9).floor() as usize;
    let count = count.min(selected.len());
    if count == 0 || local_epochs == 0 {
        return BTreeMap::new();
    }
    let mut rng = rng_for(seed, Stream::Stragglers, &[t as u64]);
    let mut chosen = sample(&mut rng, selected.len(), count).into_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|i| (selected[i], rng.random_range(0..local_epochs)))
        .collect()
}

fn client_update(
    state: &RoundState,
    config: &SimConfig,
    spec: &ModelSpec,
    dataset: &FederatedDataset,
    k: ClientId,
) -> Result<ClientReport> {
    let client = &dataset.clients[k];
    let epochs = state.straggler_epochs.get(&k).copied().unwrap_or(config.local_epochs);
    let before = minmax_normalize(&extract_prototypes(&state.global_params, spec, &client.train)?);
    let proximal = (config.strategy.kind == StrategyKind::Fedprox).then_some(Proximal {
        mu: config.strategy.prox_mu,
        anchor: &state.global_params,
    });
    let opts = TrainOptions {
        epochs,
        lr: config.lr,
        batch_size: config.batch_size,
        proximal,
    };
    let seed = derive_seed(config.seed, Stream::LocalTrain, &[state.t as u64, k as u64]);
    let updated = local_train(&state.global_params, spec, &client.train, &opts, seed)?;
    let raw = extract_prototypes(&updated, spec, &client.train)?;
    let after = minmax_normalize(&raw);
    Ok(ClientReport {
        client_id: k,
        updated_params: updated,
        lpm: lpm(&before, &after),
        lpm_dplus: dplus_deviation(&before, &after),
        local_protos: after,
        raw_protos: raw,
        epochs_done: epochs,
        n_train: client.n_train(),
    })
}

/// Attention of the margin pipeline over the given reports.
pub fn fedproto_attention(
    reports: &[&ClientReport],
    global_protos: &NormalizedPrototypeSet,
    variant: FedProtoVariant,
    t: usize,
) -> Result<AttentionVector> {
    let (v_loc, v_agg) = match variant {
        FedProtoVariant::DplusOnly => {
            let loc = reports.iter().map(|r| (r.client_id, r.lpm_dplus)).collect();
            let agg = reports
                .iter()
                .map(|r| (r.client_id, dplus_deviation(&r.local_protos, global_protos)))
                .collect();
            (DeviationVector { values: loc }, DeviationVector { values: agg })
        }
        _ => {
            let loc: BTreeMap<ClientId, MarginVector> = reports.iter().map(|r| (r.client_id, r.lpm.clone())).collect();
            let agg: BTreeMap<ClientId, MarginVector> = reports
                .iter()
                .map(|r| (r.client_id, apm(&r.local_protos, global_protos)))
                .collect();
            (deviation(&loc), deviation(&agg))
        }
    };
    let a_loc = normalize_attention(&v_loc)?;
    let a_agg = normalize_attention(&v_agg)?;
    let (x, y) = variant.slots(&a_loc, &a_agg);
    let sizes = reports.iter().map(|r| (r.client_id, r.n_train)).collect();
    federated_attention(x, y, t, &sizes)
}

/// Server step over collected reports.
pub fn aggregate_round(state: &RoundState, config: &SimConfig, reports: Vec<ClientReport>) -> Result<RoundOutcome> {
    let survivors: Vec<&ClientReport> = reports
        .iter()
        .filter(|r| config.strategy.tolerate_stragglers || r.epochs_done == config.local_epochs)
        .collect();
    if survivors.is_empty() {
        debug!("round {}: every report discarded", state.t);
        return Ok(RoundOutcome {
            global_params: state.global_params.clone(),
            global_protos: state.global_protos.clone(),
            raw_protos: None,
            reports,
            attention: None,
        });
    }
    let sizes: BTreeMap<ClientId, usize> = survivors.iter().map(|r| (r.client_id, r.n_train)).collect();
    let attention = match config.strategy.kind {
        StrategyKind::Fedavg | StrategyKind::Fedprox => fedavg_attention(&sizes)?,
        StrategyKind::Fairness => fairness_attention(sizes.keys().copied())?,
        StrategyKind::Fedproto => fedproto_attention(
            &survivors,
            &state.global_protos,
            config.strategy.fedproto_variant,
            state.t,
        )?,
    };
    let params: BTreeMap<ClientId, ParamSet> = survivors
        .iter()
        .map(|r| (r.client_id, r.updated_params.clone()))
        .collect();
    let global_params = aggregate_weights(&params, &attention)?;
    let global_protos = aggregate_prototypes(survivors.iter().map(|r| &r.local_protos))?;
    let raw_protos = aggregate_raw(survivors.iter().map(|r| &r.raw_protos))?;
    Ok(RoundOutcome {
        global_params,
        global_protos,
        raw_protos: Some(raw_protos),
        reports,
        attention: Some(attention),
    })
}

/// One full round: every selected client trains from `state.global_params`,
/// then the server aggregates.
pub fn run_round(
    state: &RoundState,
    config: &SimConfig,
    spec: &ModelSpec,
    dataset: &FederatedDataset,
) -> Result<RoundOutcome> {
    let reports = state
        .selected
        .par_iter()
        .map(|&k| client_update(state, config, spec, dataset, k))
        .collect::<Result<Vec<_>>>()?;
    aggregate_round(state, config, reports)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationLog {
    pub records: Vec<RoundRecord>,
    pub final_params: ParamSet,
    /// Unnormalized aggregate prototypes of the last round that aggregated.
    pub final_protos: Option<PrototypeSet>,
}

/// Runs `config.total_rounds()` rounds from a seeded initialization.
/// `reference` enables the feature-discrepancy metric.
pub fn run_simulation(
    config: &SimConfig,
    spec: &ModelSpec,
    dataset: &FederatedDataset,
    reference: Option<&MmdReference>,
) -> Result<SimulationLog> {
    config.validate(dataset)?;
    spec.validate()?;
    let mut params = ParamSet::init(spec, config.seed);
    let mut protos = NormalizedPrototypeSet::empty(spec.embedding_dim());
    let mut last_raw: Option<PrototypeSet> = None;
    let mut records = Vec::new();
    let total = config.total_rounds();
    for t in 0..total {
        let state = RoundState::begin(t, params, protos, config, dataset)?;
        let outcome = run_round(&state, config, spec, dataset)?;
        params = outcome.global_params;
        protos = outcome.global_protos;
        if outcome.raw_protos.is_some() {
            last_raw = outcome.raw_protos;
        }
        if !params.is_finite() {
            return Err(Error::Usage(format!(
                "global parameters diverged in round {t}; try a smaller learning rate"
            )));
        }
        let last = t + 1 == total;
        if (t + 1) % config.eval_every == 0 || last {
            let diag = training_diagnostics(&params, spec, dataset)?;
            let mmd = match reference {
                Some(r) if (t + 1) % config.mmd_every == 0 || last => r
                    .federated_mmd(&params, spec, dataset, &state.selected)?
                    .map(|v| v.max(0.0)),
                _ => None,
            };
            let record = RoundRecord {
                t,
                accuracy: accuracy(&params, spec, dataset)?,
                loss: diag.loss,
                grad_dissimilarity: diag.grad_dissimilarity,
                amm: last_raw.as_ref().map_or(0.0, amm),
                mmd,
                attention_entropy: outcome.attention.as_ref().map_or(0.0, AttentionVector::entropy),
            };
            debug!("round {t}: acc {:.4} loss {:.4}", record.accuracy, record.loss);
            records.push(record);
        }
    }
    if let Some(r) = records.last() {
        info!(
            "{} δ={} finished: accuracy {:.4}",
            config.strategy.label(),
            config.delta,
            r.accuracy
        );
    }
    Ok(SimulationLog {
        records,
        final_params: params,
        final_protos: last_raw,
    })
}

/// Plain SGD on the union of all training splits.
pub fn train_centralized(
    dataset: &FederatedDataset,
    spec: &ModelSpec,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ParamSet> {
    let init = ParamSet::init(spec, seed);
    let pooled = dataset.pooled_train();
    let opts = TrainOptions {
        epochs,
        lr,
        batch_size,
        proximal: None,
    };
    local_train(&init, spec, &pooled, &opts, derive_seed(seed, Stream::Centralized, &[]))
}
