//! Dense feed-forward network with ReLU hidden layers and a softmax
//! cross-entropy head.
//!
//! The model is split as `classifier ∘ encoder`: the encoder is every layer up
//! to and including `feature_layer_index`, and its post-ReLU output is the
//! embedding used for prototypes and feature-distribution metrics.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::kernels;
use crate::seed::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Layer whose post-activation output is the embedding.
    pub feature_layer_index: usize,
}

impl ModelSpec {
    /// Builds an MLP spec whose embedding is the last hidden layer. With no
    /// hidden layers the single dense layer doubles as the feature layer.
    pub fn mlp(input_dim: usize, hidden_dims: &[usize], num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            num_classes,
            activation: Activation::Relu,
            feature_layer_index: hidden_dims.len().saturating_sub(1),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `(fan_in, fan_out)` for each dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.num_layers() + 1);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layer_dims()[self.feature_layer_index].1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Usage("model dimensions must be positive".into()));
        }
        let expected = self.hidden_dims.len().saturating_sub(1);
        if self.feature_layer_index != expected {
            return Err(Error::Usage(format!(
                "feature_layer_index must address the last hidden layer ({expected}), got {}",
                self.feature_layer_index
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All trainable parameters of a model, layer by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    layers: Vec<Layer>,
}

/// Gradients share the parameter layout.
pub type Gradient = ParamSet;

impl ParamSet {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| Layer {
                weight: Array2::zeros((fan_out, fan_in)),
                bias: Array1::zeros(fan_out),
            })
            .collect();
        ParamSet { layers }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::Init, &[]);
        let mut params = Self::zeros(spec);
        for layer in &mut params.layers {
            let (fan_out, fan_in) = layer.weight.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer
                .weight
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-limit..=limit));
        }
        params
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.nrows() != pair[1].weight.ncols() {
                return Err(Error::Shape(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].weight.nrows(),
                    i + 1,
                    pair[1].weight.ncols()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::Shape(format!("layer {i} bias length mismatch")));
            }
        }
        Ok(ParamSet { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn total_dim(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len());
        if same {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets have different layouts".into()))
        }
    }

    pub fn matches_spec(&self, spec: &ModelSpec) -> Result<()> {
        let dims = spec.layer_dims();
        let ok = dims.len() == self.layers.len()
            && dims
                .iter()
                .zip(&self.layers)
                .all(|(&(i, o), l)| l.weight.dim() == (o, i) && l.bias.len() == o);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("parameters do not match model spec".into()))
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    /// Overwrites entries from a flat vector in `iter` order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_dim() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, expected {}",
                flat.len(),
                self.total_dim()
            )));
        }
        self.iter_mut().zip(flat).for_each(|(p, &v)| *p = v);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &ParamSet, alpha: f64) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }

    pub fn norm_sq(&self) -> f64 {
        self.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-wise forward pass. Returns `(logits, embeddings)`.
pub fn forward_batch(params: &ParamSet, spec: &ModelSpec, xs: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    params.matches_spec(spec)?;
    if xs.ncols() != spec.input_dim {
        return Err(Error::Shape(format!(
            "input has {} features, model expects {}",
            xs.ncols(),
            spec.input_dim
        )));
    }
    let m = xs.nrows();
    let last = params.layers.len() - 1;
    let mut act = xs.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
    let mut embedding = None;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = dense(layer, &act, m);
        if i < last {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        if i == spec.feature_layer_index {
            let e = if i < last {
                z.clone()
            } else {
                z.iter().map(|v| v.max(0.0)).collect()
            };
            embedding = Some(Array2::from_shape_vec((m, layer.weight.nrows()), e).expect("shape"));
        }
        act = z;
    }
    let logits = Array2::from_shape_vec((m, spec.num_classes), act).expect("shape");
    Ok((logits, embedding.expect("feature layer within network")))
}

/// `input · Wᵀ + b` for `m` row-major input rows.
fn dense(layer: &Layer, input: &[f64], m: usize) -> Vec<f64> {
    let (out_dim, in_dim) = layer.weight.dim();
    let w = layer.weight.as_standard_layout();
    let mut z = vec![0.0; m * out_dim];
    kernels::matmul_nt(
        input,
        w.as_slice().expect("standard layout"),
        &mut z,
        m,
        in_dim,
        out_dim,
    );
    for row in z.chunks_exact_mut(out_dim) {
        row.iter_mut().zip(&layer.bias).for_each(|(v, b)| *v += b);
    }
    z
}

pub fn forward(params: &ParamSet, spec: &ModelSpec, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
    let (logits, emb) = forward_batch(params, spec, view)?;
    Ok((logits.row(0).to_vec(), emb.row(0).to_vec()))
}

/// Embeddings only, for a list of samples.
pub fn embed(params: &ParamSet, spec: &ModelSpec, samples: &[Sample]) -> Result<Array2<f64>> {
    if samples.is_empty() {
        return Ok(Array2::zeros((0, spec.embedding_dim())));
    }
    let xs = stack_inputs(samples.iter(), spec.input_dim)?;
    Ok(forward_batch(params, spec, xs.view())?.1)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn stack_inputs<'a>(
    samples: impl ExactSizeIterator<Item = &'a Sample>,
    input_dim: usize,
) -> Result<Array2<f64>> {
    let n = samples.len();
    let flat = stack_flat(samples, input_dim)?;
    Ok(Array2::from_shape_vec((n, input_dim), flat).expect("shape"))
}

fn stack_flat<'a>(samples: impl Iterator<Item = &'a Sample>, input_dim: usize) -> Result<Vec<f64>> {
    let mut flat = Vec::new();
    for s in samples {
        if s.x.len() != input_dim {
            return Err(Error::Shape(format!(
                "sample has {} features, model expects {input_dim}",
                s.x.len()
            )));
        }
        flat.extend_from_slice(&s.x);
    }
    Ok(flat)
}

/// Mean softmax cross-entropy and its exact gradient.
pub fn loss_and_grad(params: &ParamSet, spec: &ModelSpec, batch: &[Sample]) -> Result<(f64, Gradient)> {
    let mut grad = ParamSet::zeros(spec);
    let loss = backprop_into(params, spec, batch.iter(), &mut grad)?;
    Ok((loss, grad))
}

/// Mean loss of `batch`; its gradient overwrites `grad`.
pub(crate) fn backprop_into<'a>(
    params: &ParamSet,
    spec: &ModelSpec,
    batch: impl ExactSizeIterator<Item = &'a Sample> + Clone,
    grad: &mut Gradient,
) -> Result<f64> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Usage("loss requires a non-empty batch".into()));
    }
    params.matches_spec(spec)?;
    grad.check_congruent(params)?;
    let mut labels = Vec::with_capacity(n);
    for s in batch.clone() {
        if s.label >= spec.num_classes {
            return Err(Error::Usage(format!(
                "label {} outside 0..{}",
                s.label, spec.num_classes
            )));
        }
        labels.push(s.label);
    }

    let last = params.layers.len() - 1;
    // inputs[i] is the input to layer i, row-major with n rows
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(params.layers.len());
    let mut act = stack_flat(batch, spec.input_dim)?;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = dense(layer, &act, n);
        if i < last {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        inputs.push(act);
        act = z;
    }

    let c = spec.num_classes;
    let mut delta = act;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for (row, &y) in delta.chunks_exact_mut(c).zip(&labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        row.iter_mut().for_each(|z| *z = (*z - log_z).exp() * inv_n);
        row[y] -= inv_n;
    }
    loss *= inv_n;

    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let (out_dim, in_dim) = layer.weight.dim();
        let input = &inputs[i];
        let g = &mut grad.layers[i];
        kernels::matmul_tn(
            &delta,
            input,
            g.weight.as_slice_mut().expect("standard layout"),
            n,
            out_dim,
            in_dim,
        );
        g.bias.fill(0.0);
        for row in delta.chunks_exact(out_dim) {
            g.bias.iter_mut().zip(row).for_each(|(b, d)| *b += d);
        }
        if i > 0 {
            let w = layer.weight.as_standard_layout();
            let mut d_prev = vec![0.0; n * in_dim];
            kernels::matmul_nn(
                &delta,
                w.as_slice().expect("standard layout"),
                &mut d_prev,
                n,
                out_dim,
                in_dim,
            );
            // input[i] is the post-ReLU output of layer i-1
            d_prev.iter_mut().zip(input).for_each(|(d, &a)| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = d_prev;
        }
    }
    Ok(loss)
}

/// Proximal term `mu/2 · ‖w − anchor‖²` added to the local objective.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub mu: f64,
    pub anchor: &'a ParamSet,
}

pub fn sgd_step(params: &ParamSet, grad: &Gradient, lr: f64, proximal: Option<Proximal<'_>>) -> Result<ParamSet> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grad, lr, proximal)?;
    Ok(out)
}

pub(crate) fn sgd_step_in_place(
    params: &mut ParamSet,
    grad: &Gradient,
    lr: f64,
    proximal: Option<Proximal<'_>>,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Usage(format!("learning rate must be positive, got {lr}")));
    }
    params.check_congruent(grad)?;
    match proximal {
        None => {
            for (p, g) in params.layers.iter_mut().zip(&grad.layers) {
                p.weight.scaled_add(-lr, &g.weight);
                p.bias.scaled_add(-lr, &g.bias);
            }
        }
        Some(Proximal { mu, anchor }) => {
            if !(mu >= 0.0) {
                return Err(Error::Usage(format!("proximal mu must be >= 0, got {mu}")));
            }
            params.check_congruent(anchor)?;
            let step = |p: &mut f64, &g: &f64, &a: &f64| *p -= lr * (g + mu * (*p - a));
            for ((p, g), a) in params.layers.iter_mut().zip(&grad.layers).zip(&anchor.layers) {
                Zip::from(&mut p.weight).and(&g.weight).and(&a.weight).for_each(step);
                Zip::from(&mut p.bias).and(&g.bias).and(&a.bias).for_each(step);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions<'a> {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub proximal: Option<Proximal<'a>>,
}

/// Mini-batch SGD over `train` for `opts.epochs` passes, reshuffling each
/// epoch from `rng_seed`. The trailing short batch is kept.
pub fn local_train(
    params: &ParamSet,
    spec: &ModelSpec,
    train: &[Sample],
    opts: &TrainOptions<'_>,
    rng_seed: u64,
) -> Result<ParamSet> {
    let mut w = params.clone();
    if opts.epochs == 0 {
        return Ok(w);
    }
    if train.is_empty() {
        return Err(Error::Usage("cannot train on an empty split".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Usage("batch_size must be positive".into()));
    }
    let mut rng = rng_for(rng_seed, Stream::LocalTrain, &[]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = ParamSet::zeros(spec);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            backprop_into(&w, spec, chunk.iter().map(|&i| &train[i]), &mut grad)?;
            sgd_step_in_place(&mut w, &grad, opts.lr, opts.proximal)?;
        }
    }
    Ok(w)
}

/// Mean loss over `samples`, evaluated in blocks to bound memory.
pub fn mean_loss(params: &ParamSet, spec: &ModelSpec, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("loss requires a non-empty sample list".into()));
    }
    let mut total = 0.0;
    for block in samples.chunks(1024) {
        let xs = stack_inputs(block.iter(), spec.input_dim)?;
        let (logits, _) = forward_batch(params, spec, xs.view())?;
        for (row, s) in logits.outer_iter().zip(block) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            total += max + sum.ln() - row[s.label];
        }
    }
    Ok(total / samples.len() as f64)
}

/// Argmax predictions, ties resolved to the lowest class index.
pub fn predict(params: &ParamSet, spec: &ModelSpec, samples: &[Sample]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for block in samples.chunks(1024) {
        let xs = stack_inputs(block.iter(), spec.input_dim)?;
        let (logits, _) = forward_batch(params, spec, xs.view())?;
        for row in logits.outer_iter() {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}
