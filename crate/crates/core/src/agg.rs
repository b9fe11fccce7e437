//! Client deviations, attention vectors and weight aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::proto::{same_class_distances, MarginVector, NormalizedPrototypeSet};

pub type ClientId = usize;

const SUM_TOLERANCE: f64 = 1e-9;

/// Per-client score in `(0, 1)`, the sigmoid of a summed margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationVector {
    pub values: BTreeMap<ClientId, f64>,
}

/// Aggregation weights over the clients of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<ClientId, f64>", into = "BTreeMap<ClientId, f64>")]
pub struct AttentionVector {
    weights: BTreeMap<ClientId, f64>,
}

impl AttentionVector {
    pub fn new(weights: BTreeMap<ClientId, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Usage("attention vector needs at least one client".into()));
        }
        if weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Usage("attention weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.values().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Usage(format!("attention weights sum to {sum}, not 1")));
        }
        Ok(AttentionVector { weights })
    }

    pub fn get(&self, client: ClientId) -> Option<f64> {
        self.weights.get(&client).copied()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.weights.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClientId, f64)> + '_ {
        self.weights.iter().map(|(&k, &w)| (k, w))
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .weights
            .values()
            .filter(|&&w| w > 0.0)
            .map(|&w| w * w.ln())
            .sum::<f64>()
    }

    fn from_proportions(raw: BTreeMap<ClientId, f64>) -> Result<Self> {
        let total: f64 = raw.values().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Usage("attention proportions must have a positive sum".into()));
        }
        // equal scores give exactly the uniform vector, independent of rounding in the sum
        let first = *raw.values().next().expect("non-empty");
        if raw.values().all(|&v| v == first) {
            let w = 1.0 / raw.len() as f64;
            return Self::new(raw.into_keys().map(|k| (k, w)).collect());
        }
        Self::new(raw.into_iter().map(|(k, v)| (k, v / total)).collect())
    }
}

impl TryFrom<BTreeMap<ClientId, f64>> for AttentionVector {
    type Error = Error;

    fn try_from(weights: BTreeMap<ClientId, f64>) -> Result<Self> {
        Self::new(weights)
    }
}

impl From<AttentionVector> for BTreeMap<ClientId, f64> {
    fn from(a: AttentionVector) -> Self {
        a.weights
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Fedavg,
    Fairness,
    Fedprox,
    Fedproto,
}

/// Which margin terms drive the FedProto attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FedProtoVariant {
    #[default]
    Full,
    LpmOnly,
    ApmOnly,
    DplusOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub tolerate_stragglers: bool,
    #[serde(default)]
    pub fedproto_variant: FedProtoVariant,
    #[serde(default)]
    pub prox_mu: f64,
}

impl StrategyConfig {
    /// Defaults per strategy: only FedAvg discards partial work.
    pub fn new(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            tolerate_stragglers: kind != StrategyKind::Fedavg,
            fedproto_variant: FedProtoVariant::Full,
            prox_mu: 0.0,
        }
    }

    pub fn fedavg() -> Self {
        Self::new(StrategyKind::Fedavg)
    }

    pub fn fairness() -> Self {
        Self::new(StrategyKind::Fairness)
    }

    pub fn fedprox(mu: f64) -> Self {
        StrategyConfig {
            prox_mu: mu,
            ..Self::new(StrategyKind::Fedprox)
        }
    }

    pub fn fedproto(variant: FedProtoVariant) -> Self {
        StrategyConfig {
            fedproto_variant: variant,
            ..Self::new(StrategyKind::Fedproto)
        }
    }

    pub fn with_toleration(mut self, tolerate: bool) -> Self {
        self.tolerate_stragglers = tolerate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::Usage(format!("prox_mu must be >= 0, got {}", self.prox_mu)));
        }
        if self.kind != StrategyKind::Fedprox && self.prox_mu != 0.0 {
            return Err(Error::Usage("prox_mu is only meaningful for fedprox".into()));
        }
        if self.kind != StrategyKind::Fedproto && self.fedproto_variant != FedProtoVariant::Full {
            return Err(Error::Usage("fedproto_variant is only meaningful for fedproto".into()));
        }
        Ok(())
    }

    /// Short stable label, e.g. `fedproto-lpm_only` or `fedavg-notol`.
    pub fn label(&self) -> String {
        let mut s = match self.kind {
            StrategyKind::Fedavg => "fedavg".to_string(),
            StrategyKind::Fairness => "fairness".to_string(),
            StrategyKind::Fedprox => "fedprox".to_string(),
            StrategyKind::Fedproto => match self.fedproto_variant {
                FedProtoVariant::Full => "fedproto".to_string(),
                FedProtoVariant::LpmOnly => "fedproto-lpm_only".to_string(),
                FedProtoVariant::ApmOnly => "fedproto-apm_only".to_string(),
                FedProtoVariant::DplusOnly => "fedproto-dplus_only".to_string(),
            },
        };
        let default_tol = self.kind != StrategyKind::Fedavg;
        if self.tolerate_stragglers != default_tol {
            s.push_str(if self.tolerate_stragglers { "-tol" } else { "-notol" });
        }
        s
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `v[k] = σ(Σ_c μ_k[c])`; an empty margin vector scores 0.5.
pub fn deviation(margins: &BTreeMap<ClientId, MarginVector>) -> DeviationVector {
    DeviationVector {
        values: margins.iter().map(|(&k, m)| (k, sigmoid(m.values().sum()))).collect(),
    }
}

pub fn normalize_attention(v: &DeviationVector) -> Result<AttentionVector> {
    if v.values.is_empty() {
        return Err(Error::Usage("cannot normalize an empty deviation vector".into()));
    }
    AttentionVector::from_proportions(v.values.clone())
}

/// Size-proportional weights at `t = 0`, the mean of both attentions after.
pub fn federated_attention(
    a_loc: &AttentionVector,
    a_agg: &AttentionVector,
    t: usize,
    sizes: &BTreeMap<ClientId, usize>,
) -> Result<AttentionVector> {
    if t == 0 {
        return fedavg_attention(sizes);
    }
    if !a_loc.clients().eq(a_agg.clients()) {
        return Err(Error::Usage("attention vectors cover different clients".into()));
    }
    AttentionVector::new(
        a_loc
            .iter()
            .zip(a_agg.iter())
            .map(|((k, l), (_, g))| (k, (l + g) / 2.0))
            .collect(),
    )
}

/// `Σ_k a[k] · W_k`, accumulated in ascending client order.
pub fn aggregate_weights(params: &BTreeMap<ClientId, ParamSet>, a: &AttentionVector) -> Result<ParamSet> {
    if !params.keys().copied().eq(a.clients()) {
        return Err(Error::Usage(
            "parameter sets and attention cover different clients".into(),
        ));
    }
    let mut iter = a.iter();
    let (k0, w0) = iter.next().expect("attention is non-empty");
    let mut out = params[&k0].clone();
    out.scale(w0);
    for (k, w) in iter {
        out.add_scaled(&params[&k], w)?;
    }
    Ok(out)
}

pub fn fedavg_attention(sizes: &BTreeMap<ClientId, usize>) -> Result<AttentionVector> {
    if sizes.is_empty() {
        return Err(Error::Usage("no clients to weight".into()));
    }
    if let Some((k, _)) = sizes.iter().find(|(_, &n)| n == 0) {
        return Err(Error::Usage(format!("client {k} has no training samples")));
    }
    AttentionVector::from_proportions(sizes.iter().map(|(&k, &n)| (k, n as f64)).collect())
}

pub fn fairness_attention(clients: impl IntoIterator<Item = ClientId>) -> Result<AttentionVector> {
    let clients: Vec<ClientId> = clients.into_iter().collect();
    if clients.is_empty() {
        return Err(Error::Usage("no clients to weight".into()));
    }
    let w = 1.0 / clients.len() as f64;
    AttentionVector::new(clients.into_iter().map(|k| (k, w)).collect())
}

/// `σ(Σ_c d⁺[c])` over the classes shared by both sets.
pub fn dplus_deviation(p_i: &NormalizedPrototypeSet, p_j: &NormalizedPrototypeSet) -> f64 {
    sigmoid(same_class_distances(p_i, p_j).values().sum())
}

impl FedProtoVariant {
    /// The two attention vectors averaged by [`federated_attention`].
    pub fn slots<'a>(
        self,
        a_loc: &'a AttentionVector,
        a_agg: &'a AttentionVector,
    ) -> (&'a AttentionVector, &'a AttentionVector) {
        match self {
            FedProtoVariant::Full | FedProtoVariant::DplusOnly => (a_loc, a_agg),
            FedProtoVariant::LpmOnly => (a_loc, a_loc),
            FedProtoVariant::ApmOnly => (a_agg, a_agg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, ModelSpec};
    use crate::proto::PrototypeSet;
    use ndarray::array;
    use proptest::prelude::*;

    fn att(pairs: &[(usize, f64)]) -> AttentionVector {
        AttentionVector::new(pairs.iter().copied().collect()).unwrap()
    }

    fn close(a: &AttentionVector, b: &AttentionVector) -> bool {
        a.clients().eq(b.clients()) && a.iter().zip(b.iter()).all(|((_, x), (_, y))| (x - y).abs() < 1e-12)
    }

    #[test]
    fn deviation_examples() {
        let mut m = BTreeMap::new();
        m.insert(0, MarginVector::from([(0, 0.0), (1, 0.0)]));
        m.insert(1, MarginVector::from([(0, 0.25), (3, 0.75)]));
        m.insert(2, MarginVector::new());
        let v = deviation(&m).values;
        assert_eq!(v[&0], 0.5);
        assert!((v[&1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((v[&1] - 0.7310585786).abs() < 1e-10);
        assert_eq!(v[&2], 0.5);
    }

    #[test]
    fn normalize_examples() {
        let equal = DeviationVector {
            values: (0..4).map(|k| (k, 0.6)).collect(),
        };
        let a = normalize_attention(&equal).unwrap();
        assert!(a.iter().all(|(_, w)| (w - 0.25).abs() < 1e-15));
        let v = DeviationVector {
            values: BTreeMap::from([(0, 0.25), (1, 0.75)]),
        };
        assert!(close(&normalize_attention(&v).unwrap(), &att(&[(0, 0.25), (1, 0.75)])));
        assert!(normalize_attention(&DeviationVector {
            values: BTreeMap::new()
        })
        .is_err());
    }

    #[test]
    fn federated_attention_examples() {
        let sizes = BTreeMap::from([(0, 30), (1, 70)]);
        let dummy = att(&[(0, 0.5), (1, 0.5)]);
        assert!(close(
            &federated_attention(&dummy, &dummy, 0, &sizes).unwrap(),
            &att(&[(0, 0.3), (1, 0.7)])
        ));
        let a = att(&[(0, 0.2), (1, 0.8)]);
        assert!(close(&federated_attention(&a, &a, 1, &sizes).unwrap(), &a));
        let b = att(&[(0, 0.6), (1, 0.4)]);
        assert!(close(
            &federated_attention(&a, &b, 1, &sizes).unwrap(),
            &att(&[(0, 0.4), (1, 0.6)])
        ));
        let c = att(&[(0, 0.5), (2, 0.5)]);
        assert!(federated_attention(&a, &c, 1, &sizes).is_err());
    }

    fn scalar(v: f64) -> ParamSet {
        ParamSet::from_layers(vec![Layer {
            weight: array![[v]],
            bias: array![0.0],
        }])
        .unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let params = BTreeMap::from([(0, scalar(0.0)), (1, scalar(4.0))]);
        let out = aggregate_weights(&params, &att(&[(0, 0.25), (1, 0.75)])).unwrap();
        assert_eq!(out.layers()[0].weight[[0, 0]], 3.0);

        let one = BTreeMap::from([(5, scalar(2.5))]);
        assert_eq!(aggregate_weights(&one, &att(&[(5, 1.0)])).unwrap(), scalar(2.5));

        assert!(aggregate_weights(&params, &att(&[(0, 1.0)])).is_err());
        let spec = ModelSpec::mlp(2, &[3], 2);
        let bad = BTreeMap::from([(0, scalar(0.0)), (1, ParamSet::zeros(&spec))]);
        assert!(aggregate_weights(&bad, &att(&[(0, 0.5), (1, 0.5)])).is_err());
    }

    #[test]
    fn fedavg_and_fairness_examples() {
        let a = fedavg_attention(&BTreeMap::from([(0, 1), (1, 1)])).unwrap();
        assert!(close(&a, &att(&[(0, 0.5), (1, 0.5)])));
        assert!(fedavg_attention(&BTreeMap::from([(0, 0), (1, 1)])).is_err());
        assert!(fedavg_attention(&BTreeMap::new()).is_err());
        let f = fairness_attention(0..10).unwrap();
        assert!(f.iter().all(|(_, w)| (w - 0.1).abs() < 1e-15));
        assert!(fairness_attention(std::iter::empty()).is_err());
    }

    fn nset(classes: &[(usize, Vec<f64>)]) -> NormalizedPrototypeSet {
        NormalizedPrototypeSet::new(
            PrototypeSet::from_classes(2, classes.iter().map(|(c, v)| (*c, v.clone(), 1))).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn dplus_examples() {
        let a = nset(&[(0, vec![0.0, 1.0]), (1, vec![1.0, 0.0])]);
        assert_eq!(dplus_deviation(&a, &a), 0.5);
        let b = nset(&[(2, vec![0.5, 0.5])]);
        assert_eq!(dplus_deviation(&a, &b), 0.5);
        let c = nset(&[(0, vec![0.0, 0.0]), (1, vec![0.0, 0.0])]);
        let expected = sigmoid(1.0 + 1.0);
        assert!((dplus_deviation(&a, &c) - expected).abs() < 1e-15);
    }

    #[test]
    fn variant_slots() {
        let l = att(&[(0, 0.2), (1, 0.8)]);
        let g = att(&[(0, 0.6), (1, 0.4)]);
        let (x, y) = FedProtoVariant::LpmOnly.slots(&l, &g);
        assert!(std::ptr::eq(x, &l) && std::ptr::eq(y, &l));
        let (x, y) = FedProtoVariant::ApmOnly.slots(&l, &g);
        assert!(std::ptr::eq(x, &g) && std::ptr::eq(y, &g));
        let (x, y) = FedProtoVariant::Full.slots(&l, &g);
        assert!(std::ptr::eq(x, &l) && std::ptr::eq(y, &g));
    }

    #[test]
    fn strategy_defaults_and_labels() {
        assert!(!StrategyConfig::fedavg().tolerate_stragglers);
        assert!(StrategyConfig::fedproto(FedProtoVariant::Full).tolerate_stragglers);
        assert_eq!(StrategyConfig::fedavg().with_toleration(true).label(), "fedavg-tol");
        assert_eq!(
            StrategyConfig::fedproto(FedProtoVariant::Full)
                .with_toleration(false)
                .label(),
            "fedproto-notol"
        );
        assert!(StrategyConfig::fedprox(0.1).validate().is_ok());
        assert!(StrategyConfig {
            prox_mu: 0.1,
            ..StrategyConfig::fedavg()
        }
        .validate()
        .is_err());
        assert!(StrategyConfig::fedprox(-1.0).validate().is_err());
    }

    #[test]
    fn entropy_of_uniform_is_ln_k() {
        let a = fairness_attention(0..8).unwrap();
        assert!((a.entropy() - 8f64.ln()).abs() < 1e-12);
        assert_eq!(att(&[(3, 1.0)]).entropy(), 0.0);
    }

    fn margins_strategy() -> impl Strategy<Value = BTreeMap<ClientId, MarginVector>> {
        prop::collection::btree_map(
            0usize..50,
            prop::collection::btree_map(0usize..10, -1.0f64..=1.0, 0..10),
            1..12,
        )
    }

    proptest! {
        #[test]
        fn attention_sums_to_one(margins in margins_strategy()) {
            let v = deviation(&margins);
            prop_assert!(v.values.values().all(|&x| x > 0.0 && x < 1.0));
            let a = normalize_attention(&v).unwrap();
            let sum: f64 = a.iter().map(|(_, w)| w).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|(_, w)| w >= 0.0));
        }

        #[test]
        fn equal_margin_sums_degenerate_to_fairness(s in -5.0f64..5.0, k in 1usize..12) {
            let margins: BTreeMap<ClientId, MarginVector> =
                (0..k).map(|c| (c, MarginVector::from([(0, s)]))).collect();
            let a = normalize_attention(&deviation(&margins)).unwrap();
            let sizes = (0..k).map(|c| (c, c + 1)).collect();
            let fed = federated_attention(&a, &a, 3, &sizes).unwrap();
            prop_assert!(close(&fed, &fairness_attention(0..k).unwrap()));
        }

        #[test]
        fn aggregating_identical_params_is_identity(raw in prop::collection::vec(0.01f64..1.0, 1..8), seed in 0u64..100) {
            let spec = ModelSpec::mlp(3, &[4], 2);
            let p = ParamSet::init(&spec, seed);
            let a = AttentionVector::from_proportions(raw.iter().copied().enumerate().collect()).unwrap();
            let params: BTreeMap<ClientId, ParamSet> = (0..raw.len()).map(|k| (k, p.clone())).collect();
            let out = aggregate_weights(&params, &a).unwrap();
            prop_assert!(out.max_abs_diff(&p) < 1e-12);
        }

        #[test]
        fn fedavg_weights_sum_to_one(sizes in prop::collection::btree_map(0usize..100, 1usize..10_000, 1..20)) {
            let a = fedavg_attention(&sizes).unwrap();
            let sum: f64 = a.iter().map(|(_, w)| w).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
