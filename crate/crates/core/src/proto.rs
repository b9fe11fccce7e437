//! Class prototypes and semantic prototype margins.
//!
//! A prototype is the mean embedding of one class. The margin of class `c`
//! between two prototype sets compares the same-class distance `d⁺` against
//! the mean distance to the other classes `d⁻`:
//! `μ[c] = (d⁻ − d⁺) / (d⁻ + d⁺)`, computed only over classes present in
//! both sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{embed, ModelSpec, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub vector: Vec<f64>,
    pub count: usize,
}

/// Per-class mean embeddings with their support counts. Classes without
/// support are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    dim: usize,
    classes: BTreeMap<usize, ClassPrototype>,
}

impl PrototypeSet {
    pub fn empty(dim: usize) -> Self {
        PrototypeSet {
            dim,
            classes: BTreeMap::new(),
        }
    }

    pub fn from_classes(dim: usize, classes: impl IntoIterator<Item = (usize, Vec<f64>, usize)>) -> Result<Self> {
        let mut set = Self::empty(dim);
        for (c, vector, count) in classes {
            set.insert(c, vector, count)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, class: usize, vector: Vec<f64>, count: usize) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "prototype for class {class} has length {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if count == 0 {
            return Err(Error::Usage(format!("class {class} needs a positive count")));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Usage(format!("class {class} prototype is not finite")));
        }
        self.classes.insert(class, ClassPrototype { vector, count });
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&ClassPrototype> {
        self.classes.get(&class)
    }

    pub fn count(&self, class: usize) -> usize {
        self.classes.get(&class).map_or(0, |p| p.count)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ClassPrototype)> + '_ {
        self.classes.iter().map(|(&c, p)| (c, p))
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    /// Same classes, vectors mapped through `f`.
    pub fn map_vectors(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Self {
        PrototypeSet {
            dim: self.dim,
            classes: self
                .classes
                .iter()
                .map(|(&c, p)| {
                    (
                        c,
                        ClassPrototype {
                            vector: f(&p.vector),
                            count: p.count,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// A prototype set whose vectors all lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PrototypeSet", into = "PrototypeSet")]
pub struct NormalizedPrototypeSet(PrototypeSet);

impl NormalizedPrototypeSet {
    /// Wraps a set already in `[0, 1]`; anything outside is rejected.
    pub fn new(set: PrototypeSet) -> Result<Self> {
        let ok = set
            .classes
            .values()
            .all(|p| p.vector.iter().all(|v| (0.0..=1.0).contains(v)));
        if ok {
            Ok(NormalizedPrototypeSet(set))
        } else {
            Err(Error::Usage("normalized prototypes must lie in [0, 1]".into()))
        }
    }

    pub fn empty(dim: usize) -> Self {
        NormalizedPrototypeSet(PrototypeSet::empty(dim))
    }

    pub fn as_set(&self) -> &PrototypeSet {
        &self.0
    }
}

impl TryFrom<PrototypeSet> for NormalizedPrototypeSet {
    type Error = Error;
    fn try_from(set: PrototypeSet) -> Result<Self> {
        Self::new(set)
    }
}

impl From<NormalizedPrototypeSet> for PrototypeSet {
    fn from(n: NormalizedPrototypeSet) -> Self {
        n.0
    }
}

impl std::ops::Deref for NormalizedPrototypeSet {
    type Target = PrototypeSet;
    fn deref(&self) -> &PrototypeSet {
        &self.0
    }
}

/// Per-class margins, each in `[-1, 1]`.
pub type MarginVector = BTreeMap<usize, f64>;

/// Mean embedding per ground-truth class over `data`.
pub fn extract_prototypes(params: &ParamSet, spec: &ModelSpec, data: &[Sample]) -> Result<PrototypeSet> {
    if data.is_empty() {
        return Err(Error::Usage("prototypes need at least one sample".into()));
    }
    let dim = spec.embedding_dim();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for block in data.chunks(1024) {
        let emb = embed(params, spec, block)?;
        for (row, s) in emb.outer_iter().zip(block) {
            let entry = sums.entry(s.label).or_insert_with(|| (vec![0.0; dim], 0));
            entry.0.iter_mut().zip(row.iter()).for_each(|(a, &e)| *a += e);
            entry.1 += 1;
        }
    }
    PrototypeSet::from_classes(
        dim,
        sums.into_iter().map(|(c, (mut sum, n))| {
            let inv = 1.0 / n as f64;
            sum.iter_mut().for_each(|v| *v *= inv);
            (c, sum, n)
        }),
    )
}

/// Rescales each class vector to span `[0, 1]` across its channels. A
/// constant vector maps to zeros.
pub fn minmax_normalize(p: &PrototypeSet) -> NormalizedPrototypeSet {
    NormalizedPrototypeSet(p.map_vectors(|v| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 {
            v.iter().map(|&x| ((x - lo) / range).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; v.len()]
        }
    }))
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn shared_classes(a: &PrototypeSet, b: &PrototypeSet) -> Vec<usize> {
    a.classes().filter(|c| b.count(*c) > 0).collect()
}

/// `(d⁺, d⁻)` for every class present in both sets. `d⁻` is `None` when
/// only one class is shared.
pub(crate) fn margin_distances(p_i: &PrototypeSet, p_j: &PrototypeSet) -> BTreeMap<usize, (f64, Option<f64>)> {
    let shared = shared_classes(p_i, p_j);
    let vec_i = |c: usize| p_i.get(c).expect("shared").vector.as_slice();
    let vec_j = |c: usize| p_j.get(c).expect("shared").vector.as_slice();
    shared
        .iter()
        .map(|&c| {
            let d_plus = euclidean(vec_i(c), vec_j(c));
            let d_minus = (shared.len() > 1).then(|| {
                let total: f64 = shared
                    .iter()
                    .filter(|&&o| o != c)
                    .map(|&o| euclidean(vec_i(c), vec_j(o)))
                    .sum();
                total / (shared.len() - 1) as f64
            });
            (c, (d_plus, d_minus))
        })
        .collect()
}

fn spm_raw(p_i: &PrototypeSet, p_j: &PrototypeSet) -> MarginVector {
    margin_distances(p_i, p_j)
        .into_iter()
        .map(|(c, (d_plus, d_minus))| {
            let mu = match d_minus {
                Some(d_minus) if d_minus + d_plus > 0.0 => (d_minus - d_plus) / (d_minus + d_plus),
                _ => 0.0,
            };
            (c, mu)
        })
        .collect()
}

/// Semantic prototype margin of every class of `p_i` against the set `p_j`.
pub fn spm(p_i: &NormalizedPrototypeSet, p_j: &NormalizedPrototypeSet) -> MarginVector {
    spm_raw(p_i, p_j)
}

/// Margin of a client's prototypes after local training against the
/// prototypes it had before.
pub fn lpm(before: &NormalizedPrototypeSet, after: &NormalizedPrototypeSet) -> MarginVector {
    spm(before, after)
}

/// Margin of a client's prototypes against the server's aggregate.
pub fn apm(local: &NormalizedPrototypeSet, aggregate: &NormalizedPrototypeSet) -> MarginVector {
    spm(local, aggregate)
}

/// Same-class distances `d⁺` over the shared classes.
pub fn same_class_distances(p_i: &PrototypeSet, p_j: &PrototypeSet) -> BTreeMap<usize, f64> {
    margin_distances(p_i, p_j)
        .into_iter()
        .map(|(c, (d_plus, _))| (c, d_plus))
        .collect()
}

/// Count-weighted per-class mean of prototype sets.
pub fn aggregate_raw<'a>(locals: impl IntoIterator<Item = &'a PrototypeSet>) -> Result<PrototypeSet> {
    let mut iter = locals.into_iter().peekable();
    let dim = iter
        .peek()
        .ok_or_else(|| Error::Usage("cannot aggregate an empty list of prototype sets".into()))?
        .dim;
    let locals: Vec<&PrototypeSet> = iter.collect();
    if locals.iter().any(|p| p.dim != dim) {
        return Err(Error::Shape("prototype sets differ in dimensionality".into()));
    }
    let mut totals: BTreeMap<usize, usize> = BTreeMap::new();
    for p in &locals {
        for (c, proto) in p.iter() {
            *totals.entry(c).or_default() += proto.count;
        }
    }
    let mut out = PrototypeSet::empty(dim);
    for (&c, &n_agg) in &totals {
        let mut v = vec![0.0; dim];
        for p in &locals {
            if let Some(proto) = p.get(c) {
                let w = proto.count as f64 / n_agg as f64;
                v.iter_mut().zip(&proto.vector).for_each(|(a, &x)| *a += w * x);
            }
        }
        out.insert(c, v, n_agg)?;
    }
    Ok(out)
}

/// Server-side aggregate of normalized client prototypes.
pub fn aggregate_prototypes<'a>(
    locals: impl IntoIterator<Item = &'a NormalizedPrototypeSet>,
) -> Result<NormalizedPrototypeSet> {
    let agg = aggregate_raw(locals.into_iter().map(|n| &n.0))?;
    // convex combinations of [0, 1] vectors stay in [0, 1] up to rounding
    Ok(NormalizedPrototypeSet(
        agg.map_vectors(|v| v.iter().map(|x| x.clamp(0.0, 1.0)).collect()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(classes: &[(usize, &[f64], usize)]) -> NormalizedPrototypeSet {
        let dim = classes.first().map_or(2, |c| c.1.len());
        NormalizedPrototypeSet::new(
            PrototypeSet::from_classes(dim, classes.iter().map(|(c, v, n)| (*c, v.to_vec(), *n))).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn minmax_examples() {
        let p = PrototypeSet::from_classes(3, [(0, vec![2.0, 3.0, 4.0], 1)]).unwrap();
        assert_eq!(minmax_normalize(&p).get(0).unwrap().vector, vec![0.0, 0.5, 1.0]);
        let c = PrototypeSet::from_classes(2, [(4, vec![5.0, 5.0], 3)]).unwrap();
        let n = minmax_normalize(&c);
        assert_eq!(n.get(4).unwrap().vector, vec![0.0, 0.0]);
        assert_eq!(n.count(4), 3);
    }

    #[test]
    fn minmax_is_idempotent_on_spanning_vectors() {
        let p = PrototypeSet::from_classes(4, [(0, vec![0.0, 0.3, 1.0, 0.7], 2)]).unwrap();
        let once = minmax_normalize(&p);
        let twice = minmax_normalize(once.as_set());
        assert_eq!(once, twice);
        assert_eq!(once.as_set(), &p);
    }

    #[test]
    fn self_comparison_has_maximal_margin() {
        let p = norm(&[(1, &[0.0, 0.0], 4), (2, &[1.0, 0.0], 4)]);
        let mu = spm(&p, &p);
        assert_eq!(mu.get(&1), Some(&1.0));
        assert_eq!(mu.get(&2), Some(&1.0));
    }

    #[test]
    fn swapped_assignment_has_minimal_margin() {
        let p_i = norm(&[(1, &[0.0, 0.0], 1)]);
        let p_j = norm(&[(1, &[0.6, 0.8], 1), (2, &[0.0, 0.0], 1)]);
        // only class 1 is shared, so d⁻ is an empty mean
        assert_eq!(spm(&p_i, &p_j).get(&1), Some(&0.0));
        // with class 2 also known to p_i, d⁺ = 1 and d⁻ from p_i[1] to p_j[2] = 0
        let p_i = norm(&[(1, &[0.0, 0.0], 1), (2, &[0.6, 0.8], 1)]);
        let mu = spm(&p_i, &p_j);
        assert!((mu[&1] - (-1.0)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_margins_are_zero() {
        let a = norm(&[(0, &[0.5, 0.5], 1)]);
        let b = norm(&[(0, &[0.1, 0.9], 1)]);
        assert_eq!(spm(&a, &b), MarginVector::from([(0, 0.0)]));
        let z = norm(&[(0, &[0.0, 0.0], 1), (1, &[0.0, 0.0], 1)]);
        assert_eq!(spm(&z, &z), MarginVector::from([(0, 0.0), (1, 0.0)]));
    }

    #[test]
    fn unchanged_prototypes_give_unit_local_margin() {
        let p = norm(&[(0, &[0.0, 1.0], 2), (1, &[1.0, 0.0], 2), (3, &[0.5, 0.5], 1)]);
        assert!(lpm(&p, &p).values().all(|&m| m == 1.0));
    }

    #[test]
    fn zero_initialized_before_gives_empty_margin() {
        let before = NormalizedPrototypeSet::empty(2);
        let after = norm(&[(0, &[0.0, 1.0], 2), (1, &[1.0, 0.0], 2)]);
        assert!(lpm(&before, &after).is_empty());
        assert!(apm(&after, &before).is_empty());
    }

    #[test]
    fn aggregate_is_count_weighted() {
        let a = PrototypeSet::from_classes(2, [(0, vec![0.0, 0.0], 1)]).unwrap();
        let b = PrototypeSet::from_classes(2, [(0, vec![4.0, 4.0], 3)]).unwrap();
        let agg = aggregate_raw([&a, &b]).unwrap();
        assert_eq!(agg.get(0).unwrap().vector, vec![3.0, 3.0]);
        assert_eq!(agg.count(0), 4);
        let single = aggregate_raw([&a]).unwrap();
        assert_eq!(single, a);
        assert!(aggregate_raw(std::iter::empty()).is_err());
    }

    #[test]
    fn prototypes_are_class_means() {
        let spec = ModelSpec::mlp(2, &[], 2);
        let mut params = ParamSet::zeros(&spec);
        // identity weights: embedding = relu(x)
        params.set_flat(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let data = vec![
            Sample::new(vec![1.0, 2.0], 1),
            Sample::new(vec![3.0, 4.0], 1),
            Sample::new(vec![5.0, 6.0], 0),
        ];
        let p = extract_prototypes(&params, &spec, &data).unwrap();
        assert_eq!(p.get(1).unwrap().vector, vec![2.0, 3.0]);
        assert_eq!(p.count(1), 2);
        assert_eq!(p.get(0).unwrap().vector, vec![5.0, 6.0]);
        assert!(p.get(2).is_none());
    }

    #[test]
    fn json_round_trip() {
        let p = norm(&[(0, &[0.0, 0.25], 2), (7, &[1.0, 0.5], 9)]);
        let text = serde_json::to_string(&p).unwrap();
        let back: NormalizedPrototypeSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        let bad = text.replace("0.25", "1.5");
        assert!(serde_json::from_str::<NormalizedPrototypeSet>(&bad).is_err());
    }
}
