//! Deterministic desk-scale contrastive training.
//!
//! The encoder is one or two affine maps with a ReLU in between, followed by
//! L2 normalization onto `S^{m-1}`. Backpropagation is written out by hand;
//! the normalization Jacobian per row is `(I - u u^T) / ||z||`.
//!
//! Two frameworks are supported:
//!
//! * in-batch: both views of `N` instances go through the online encoder and
//!   every one of the `2N` embeddings is an anchor against the other `2N - 2`;
//! * queue: view 1 goes through the online encoder, view 2 through a momentum
//!   copy whose outputs are detached keys, and negatives come from a FIFO
//!   queue of earlier keys.
//!
//! The temperature and reweighting factors of MACL are computed once per
//! step from the batch and held constant during backpropagation.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{two_view_augment, AugmentConfig, LabeledDataset};
use crate::error::{Error, Result};
use crate::gradients::similarity_gradients;
use crate::losses::{batch_value, batch_value_detached, cosine_logits, inbatch_logits, NegativeSource, BatchLossResult};
use crate::rng::{self, Purpose};
use crate::temperature::alignment_loss;
use crate::types::{make_unit_batch, LossSpec, LossVariant, UnitEmbeddingBatch, ZERO_NORM_EPS};

/// `y = x W^T + b` with `W` of shape `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    layers: Vec<Affine>,
}

impl EncoderParams {
    pub fn new(layers: Vec<Affine>) -> Result<Self> {
        if layers.is_empty() || layers.len() > 2 {
            return Err(Error::InvalidConfig(format!(
                "encoder needs 1 or 2 layers, got {}",
                layers.len()
            )));
        }
        for layer in &layers {
            if layer.bias.len() != layer.weight.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "bias of length {} for weight {:?}",
                    layer.bias.len(),
                    layer.weight.dim()
                )));
            }
        }
        if let [first, second] = layers.as_slice() {
            if second.weight.ncols() != first.weight.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer shapes {:?} and {:?} do not chain",
                    first.weight.dim(),
                    second.weight.dim()
                )));
            }
        }
        let params = Self { layers };
        if params.out_dim() < 2 {
            return Err(Error::InvalidConfig(format!(
                "embedding dimension must be >= 2, got {}",
                params.out_dim()
            )));
        }
        if !params.is_finite() {
            return Err(Error::InvalidConfig("encoder parameters must be finite".into()));
        }
        Ok(params)
    }

    /// Gaussian weights with variance `2 / fan_in` before a ReLU and
    /// `1 / fan_in` on the output layer; zero biases.
    pub fn init(d_in: usize, hidden: Option<usize>, m: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || hidden == Some(0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let mut gaussian = |out: usize, inp: usize, gain: f64| {
            let std = (gain / inp as f64).sqrt();
            Affine {
                weight: Array2::from_shape_simple_fn((out, inp), || std * rng.sample::<f64, _>(StandardNormal)),
                bias: Array1::zeros(out),
            }
        };
        let layers = match hidden {
            Some(h) => vec![gaussian(h, d_in, 2.0), gaussian(m, h, 1.0)],
            None => vec![gaussian(m, d_in, 1.0)],
        };
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        (self.layers.len() == 2).then(|| self.layers[0].weight.nrows())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Affine::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    /// All parameters in layer order: weight (row-major), then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Copy of `self` with parameters read from `flat` in [`flatten`] order.
    ///
    /// [`flatten`]: EncoderParams::flatten
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        let mut out = self.clone();
        let mut values = flat.iter().copied();
        for l in &mut out.layers {
            for x in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *x = values.next().expect("length checked");
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        let shapes = |p: &Self| p.layers.iter().map(|l| l.weight.dim()).collect::<Vec<_>>();
        if shapes(self) != shapes(other) {
            return Err(Error::ShapeMismatch(format!(
                "encoder shapes {:?} and {:?} differ",
                shapes(self),
                shapes(other)
            )));
        }
        Ok(())
    }

    /// `self[i] = f(self[i], other[i])` elementwise; shapes must match.
    fn zip_apply(&mut self, other: &Self, f: impl Fn(f64, f64) -> f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.zip_mut_with(&b.weight, |x, &y| *x = f(*x, y));
            a.bias.zip_mut_with(&b.bias, |x, &y| *x = f(*x, y));
        }
    }

    fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight *= c;
            l.bias *= c;
        }
    }
}

/// Intermediate values of a forward pass needed by [`encoder_backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of the hidden layer, if any.
    hidden_pre: Option<Array2<f64>>,
    norms: Array1<f64>,
    embeddings: Array2<f64>,
}

pub fn encoder_forward(
    params: &EncoderParams,
    batch: ArrayView2<'_, f64>,
) -> Result<(UnitEmbeddingBatch, ForwardCache)> {
    if batch.ncols() != params.d_in() {
        return Err(Error::DimensionMismatch {
            expected: params.d_in(),
            found: batch.ncols(),
        });
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut hidden_pre = None;
    let mut a = batch.to_owned();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let pre = a.dot(&layer.weight.t()) + &layer.bias;
        inputs.push(a);
        if i < last {
            a = pre.mapv(|x| x.max(0.0));
            hidden_pre = Some(pre);
        } else {
            a = pre;
        }
    }
    let mut z = a;
    let mut norms = Array1::zeros(z.nrows());
    for (row, (mut zr, nr)) in z.axis_iter_mut(Axis(0)).zip(norms.iter_mut()).enumerate() {
        let norm = zr.dot(&zr).sqrt();
        if !(norm > ZERO_NORM_EPS && norm.is_finite()) {
            return Err(Error::NonFiniteOutput { row });
        }
        zr /= norm;
        *nr = norm;
    }
    let cache = ForwardCache {
        inputs,
        hidden_pre,
        norms,
        embeddings: z.clone(),
    };
    Ok((UnitEmbeddingBatch::from_trusted(z), cache))
}

/// Parameter gradients given the upstream gradient with respect to the unit
/// embeddings of the matching forward pass.
pub fn encoder_backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    d_embeddings: ArrayView2<'_, f64>,
) -> Result<EncoderParams> {
    if d_embeddings.dim() != cache.embeddings.dim() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} for embeddings {:?}",
            d_embeddings.dim(),
            cache.embeddings.dim()
        )));
    }
    if cache.inputs.len() != params.layers.len()
        || cache.inputs.iter().zip(&params.layers).any(|(x, l)| x.ncols() != l.weight.ncols())
    {
        return Err(Error::ShapeMismatch("forward cache does not match encoder".into()));
    }
    let u = &cache.embeddings;
    let radial = (u * &d_embeddings).sum_axis(Axis(1));
    let mut delta = &d_embeddings - &(u * &radial.insert_axis(Axis(1)));
    delta /= &cache.norms.view().insert_axis(Axis(1));

    let mut grads = params.zeros_like();
    for i in (0..params.layers.len()).rev() {
        grads.layers[i].weight = delta.t().dot(&cache.inputs[i]);
        grads.layers[i].bias = delta.sum_axis(Axis(0));
        if i > 0 {
            let pre = cache.hidden_pre.as_ref().expect("two-layer cache");
            delta = delta.dot(&params.layers[i].weight);
            delta.zip_mut_with(pre, |d, &p| {
                if p <= 0.0 {
                    *d = 0.0
                }
            });
        }
    }
    Ok(grads)
}

/// `m_enc * target + (1 - m_enc) * online`, elementwise.
pub fn momentum_step(online: &EncoderParams, target: &EncoderParams, m_enc: f64) -> Result<EncoderParams> {
    online.check_same_shape(target)?;
    if !(0.0..1.0).contains(&m_enc) {
        return Err(Error::InvalidConfig(format!("encoder momentum must lie in [0, 1), got {m_enc}")));
    }
    let mut out = target.clone();
    out.zip_apply(online, |t, o| m_enc * t + (1.0 - m_enc) * o);
    Ok(out)
}

/// FIFO of detached keys, oldest first. Starts full of seeded random unit
/// vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyQueue {
    keys: VecDeque<Array1<f64>>,
    capacity: usize,
    dim: usize,
}

impl KeyQueue {
    pub fn new(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 || dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "queue needs capacity >= 1 and dimension >= 2, got {capacity} and {dim}"
            )));
        }
        let mut rng = rng::stream(seed, Purpose::Queue, 0);
        let keys = (0..capacity)
            .map(|_| loop {
                let v = Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
                let norm = v.dot(&v).sqrt();
                if norm > ZERO_NORM_EPS {
                    break v / norm;
                }
            })
            .collect();
        Ok(Self { keys, capacity, dim })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Appends `keys` in order, evicting the oldest entries.
    pub fn push(&mut self, keys: &UnitEmbeddingBatch) -> Result<()> {
        if keys.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: keys.dim(),
            });
        }
        for row in keys.view().axis_iter(Axis(0)) {
            if self.keys.len() == self.capacity {
                self.keys.pop_front();
            }
            self.keys.push_back(row.to_owned());
        }
        Ok(())
    }

    pub fn snapshot(&self) -> UnitEmbeddingBatch {
        let mut data = Array2::zeros((self.keys.len(), self.dim));
        for (mut out, k) in data.axis_iter_mut(Axis(0)).zip(&self.keys) {
            out.assign(k);
        }
        UnitEmbeddingBatch::from_trusted(data)
    }
}

/// Loss of one step together with its parameter gradients.
#[derive(Clone, Debug)]
pub struct StepGradients {
    pub loss: BatchLossResult,
    pub grads: EncoderParams,
}

/// Accumulates `d embeddings = (G + G^T) Z` for `G[k][l] = dL/d(z_k . z_l)`
/// restricted to the in-batch pattern.
fn inbatch_embedding_gradient(
    z: &UnitEmbeddingBatch,
    spec: &LossSpec,
    loss: &BatchLossResult,
    rows: &[crate::types::LogitsRow],
) -> Result<Array2<f64>> {
    let two_n = z.len();
    let n = two_n / 2;
    let c = 1.0 / two_n as f64;
    let mut g = Array2::<f64>::zeros((two_n, two_n));
    for (k, row) in rows.iter().enumerate() {
        let sg = similarity_gradients(row, spec, loss.tau_used)?;
        g[[k, crate::losses::inbatch_partner(k, n)]] += c * sg.d_pos;
        for (l, d) in crate::losses::inbatch_negatives(k, n).zip(&sg.d_negs) {
            g[[k, l]] += c * d;
        }
    }
    let sym = &g + &g.t();
    Ok(sym.dot(&z.view()))
}

fn stack(x1: ArrayView2<'_, f64>, x2: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x1.dim() != x2.dim() {
        return Err(Error::ShapeMismatch(format!(
            "views have shapes {:?} and {:?}",
            x1.dim(),
            x2.dim()
        )));
    }
    Ok(concatenate(Axis(0), &[x1, x2]).expect("shapes checked"))
}

fn split_views(z: &UnitEmbeddingBatch) -> (UnitEmbeddingBatch, UnitEmbeddingBatch) {
    let n = z.len() / 2;
    (
        UnitEmbeddingBatch::from_trusted(z.view().slice(s![..n, ..]).to_owned()),
        UnitEmbeddingBatch::from_trusted(z.view().slice(s![n.., ..]).to_owned()),
    )
}

/// In-batch loss and gradients for raw views `x1`, `x2` (one row per
/// instance), both encoded by `params`.
pub fn inbatch_step(
    params: &EncoderParams,
    x1: ArrayView2<'_, f64>,
    x2: ArrayView2<'_, f64>,
    spec: &LossSpec,
) -> Result<StepGradients> {
    let (z, cache) = encoder_forward(params, stack(x1, x2)?.view())?;
    let (v1, v2) = split_views(&z);
    let rows = inbatch_logits(&v1, &v2)?;
    let loss = batch_value(&rows, spec)?;
    let dz = inbatch_embedding_gradient(&z, spec, &loss, &rows)?;
    let grads = encoder_backward(params, &cache, dz.view())?;
    Ok(StepGradients { loss, grads })
}

/// In-batch loss with the temperature and reweighting factors frozen.
pub fn inbatch_loss_detached(
    params: &EncoderParams,
    x1: ArrayView2<'_, f64>,
    x2: ArrayView2<'_, f64>,
    variant: LossVariant,
    tau: f64,
    v: &[f64],
) -> Result<f64> {
    let (z, _) = encoder_forward(params, stack(x1, x2)?.view())?;
    let (v1, v2) = split_views(&z);
    Ok(batch_value_detached(&inbatch_logits(&v1, &v2)?, variant, tau, v)?.mean_loss)
}

/// Queue-mode loss and online-encoder gradients. Keys from `target` and the
/// queue entries are constants. Returns the keys for the queue update.
pub fn queue_step(
    online: &EncoderParams,
    target: &EncoderParams,
    x1: ArrayView2<'_, f64>,
    x2: ArrayView2<'_, f64>,
    queue: &UnitEmbeddingBatch,
    spec: &LossSpec,
) -> Result<(StepGradients, UnitEmbeddingBatch)> {
    let (keys, _) = encoder_forward(target, x2)?;
    let (q, cache) = encoder_forward(online, x1)?;
    let rows = cosine_logits(&q, &keys, NegativeSource::Shared(queue))?;
    let loss = batch_value(&rows, spec)?;
    let c = 1.0 / rows.len() as f64;
    let mut g_pos = Array1::zeros(rows.len());
    let mut g_neg = Array2::zeros((rows.len(), queue.len()));
    for (i, row) in rows.iter().enumerate() {
        let sg = similarity_gradients(row, spec, loss.tau_used)?;
        g_pos[i] = c * sg.d_pos;
        for (out, d) in g_neg.row_mut(i).iter_mut().zip(&sg.d_negs) {
            *out = c * d;
        }
    }
    let dq = &keys.view() * &g_pos.insert_axis(Axis(1)) + g_neg.dot(&queue.view());
    let grads = encoder_backward(online, &cache, dq.view())?;
    Ok((StepGradients { loss, grads }, keys))
}

/// Queue-mode loss with keys, queue, temperature and reweighting frozen.
pub fn queue_loss_detached(
    online: &EncoderParams,
    x1: ArrayView2<'_, f64>,
    keys: &UnitEmbeddingBatch,
    queue: &UnitEmbeddingBatch,
    variant: LossVariant,
    tau: f64,
    v: &[f64],
) -> Result<f64> {
    let (q, _) = encoder_forward(online, x1)?;
    let rows = cosine_logits(&q, keys, NegativeSource::Shared(queue))?;
    Ok(batch_value_detached(&rows, variant, tau, v)?.mean_loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    /// Symmetric two-view batch, negatives from the batch itself.
    #[serde(rename = "inbatch")]
    InBatch,
    /// Momentum encoder keys, negatives from a FIFO queue.
    Queue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to 0 over all steps.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine if total == 0 => base,
            Self::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub framework: Framework,
    pub batch_size: usize,
    pub queue_size: usize,
    pub encoder_momentum: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub sgd_momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Neighbors for kNN evaluation, capped at half the dataset.
    pub eval_k: usize,
    /// Width of the hidden layer; `None` gives a single linear layer.
    pub hidden_dim: Option<usize>,
    pub out_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::infonce(0.1).expect("positive tau"),
            framework: Framework::InBatch,
            batch_size: 64,
            queue_size: 256,
            encoder_momentum: 0.99,
            lr: 0.5,
            lr_schedule: LrSchedule::Constant,
            sgd_momentum: 0.9,
            epochs: 30,
            seed: 0,
            eval_k: 200,
            hidden_dim: None,
            out_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match self.framework {
            Framework::InBatch if self.batch_size < 2 => {
                return bad(format!("in-batch training needs batch_size >= 2, got {}", self.batch_size))
            }
            Framework::Queue if self.batch_size == 0 => return bad("batch_size must be >= 1".into()),
            Framework::Queue if self.queue_size == 0 => return bad("queue training needs queue_size >= 1".into()),
            Framework::Queue if !(0.0..1.0).contains(&self.encoder_momentum) => {
                return bad(format!(
                    "encoder_momentum must lie in [0, 1), got {}",
                    self.encoder_momentum
                ))
            }
            Framework::Queue if self.loss.variant == LossVariant::NtXentInBatch => {
                return bad("ntxent_inbatch needs the inbatch framework".into())
            }
            _ => {}
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad(format!("sgd_momentum must lie in [0, 1), got {}", self.sgd_momentum));
        }
        if self.eval_k == 0 {
            return bad("eval_k must be >= 1".into());
        }
        if self.out_dim < 2 {
            return bad(format!("out_dim must be >= 2, got {}", self.out_dim));
        }
        if self.hidden_dim == Some(0) {
            return bad("hidden_dim must be >= 1".into());
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: EncoderParams,
    momentum: f64,
}

impl Sgd {
    pub fn new(params: &EncoderParams, momentum: f64) -> Self {
        Self {
            velocity: params.zeros_like(),
            momentum,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) -> Result<()> {
        params.check_same_shape(grads)?;
        self.velocity.scale(self.momentum);
        self.velocity.zip_apply(grads, |v, g| v + g);
        params.zip_apply(&self.velocity, |p, v| p - lr * v);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean squared distance between embeddings of two fresh views.
    pub alignment_loss: f64,
    /// `log mean exp(-2 ||u - v||^2)` over distinct pairs of a fixed subset.
    pub uniformity: f64,
    /// Leave-one-out kNN accuracy with cosine similarity.
    pub knn_accuracy: f64,
}

/// Largest number of points used for the uniformity estimate.
pub const UNIFORMITY_SUBSET: usize = 2048;

/// Augmentation draws for evaluation start here so they never coincide with
/// training draws.
const EVAL_DRAW_BASE: u64 = 1 << 48;

/// Evaluates `params` on `data`. `pass` selects the augmentation draws used
/// for the alignment estimate.
pub fn evaluate(
    params: &EncoderParams,
    data: &LabeledDataset,
    aug: &AugmentConfig,
    eval_k: usize,
    pass: u64,
) -> Result<EvalMetrics> {
    let n = data.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let (emb, _) = encoder_forward(params, data.points().view())?;

    let mut x1 = Array2::zeros(data.points().dim());
    let mut x2 = Array2::zeros(data.points().dim());
    for (i, p) in data.points().axis_iter(Axis(0)).enumerate() {
        let (a, b) = two_view_augment(p, aug, EVAL_DRAW_BASE + pass * n as u64 + i as u64);
        x1.row_mut(i).assign(&a);
        x2.row_mut(i).assign(&b);
    }
    let (e1, _) = encoder_forward(params, x1.view())?;
    let (e2, _) = encoder_forward(params, x2.view())?;

    Ok(EvalMetrics {
        alignment_loss: alignment_loss(&e1, &e2)?,
        uniformity: uniformity(&emb),
        knn_accuracy: knn_accuracy(&emb, data.labels(), data.classes(), eval_k),
    })
}

/// Uniformity over at most [`UNIFORMITY_SUBSET`] evenly spaced points.
pub fn uniformity(emb: &UnitEmbeddingBatch) -> f64 {
    let n = emb.len();
    let take = n.min(UNIFORMITY_SUBSET);
    let idx: Vec<usize> = (0..take).map(|i| i * n / take).collect();
    let sub = emb.view().select(Axis(0), &idx);
    let gram = sub.dot(&sub.t());
    // -2 ||u - v||^2 = 4 u.v - 4 on the sphere
    let terms: Vec<f64> = (0..take)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| 4.0 * gram[[i, j]] - 4.0)
        .collect();
    if terms.is_empty() {
        return 0.0;
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    (max + sum.ln() - (terms.len() as f64).ln()).min(0.0)
}

/// Leave-one-out majority vote over the `min(eval_k, n / 2)` most similar
/// other points. Equal similarities prefer the lower index; equal votes the
/// lower class id.
pub fn knn_accuracy(emb: &UnitEmbeddingBatch, labels: &[usize], classes: usize, eval_k: usize) -> f64 {
    let n = emb.len();
    let k = eval_k.min(n / 2).max(1);
    let gram = emb.view().dot(&emb.view().t());
    let mut correct = 0usize;
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut votes = vec![0usize; classes];
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (gram[[i, j]], j)));
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, order);
        }
        votes.iter_mut().for_each(|v| *v = 0);
        for &(_, j) in &cand[..k.min(cand.len())] {
            votes[labels[j]] += 1;
        }
        let mut best = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Per-epoch metric series of one training run and its final parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub augment: AugmentConfig,
    pub loss: Vec<f64>,
    pub a_batch: Vec<f64>,
    pub tau_used: Vec<f64>,
    /// Steps in the epoch whose adaptive temperature hit the floor.
    pub clamp_count: Vec<usize>,
    pub alignment_loss: Vec<f64>,
    pub uniformity: Vec<f64>,
    pub knn_accuracy: Vec<f64>,
    pub final_params: EncoderParams,
}

impl RunRecord {
    pub fn epochs(&self) -> usize {
        self.loss.len()
    }
}

/// Trains an encoder on `data` for `cfg.epochs` epochs of shuffled
/// minibatches (a trailing partial batch is dropped), evaluating after each
/// epoch. Input points are unit-normalized first.
pub fn train_run(data: &LabeledDataset, aug: &AugmentConfig, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    aug.validate()?;
    let n = data.len();
    if n < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "dataset of {n} points is smaller than batch_size {}",
            cfg.batch_size
        )));
    }
    let unit = LabeledDataset::new(
        make_unit_batch(data.points().clone())?.into_inner(),
        data.labels().to_vec(),
        data.classes(),
    )?;
    let points = unit.points();
    let d = unit.dim();

    let mut params = EncoderParams::init(d, cfg.hidden_dim, cfg.out_dim, cfg.seed)?;
    let mut sgd = Sgd::new(&params, cfg.sgd_momentum);
    let queue_mode = cfg.framework == Framework::Queue;
    let mut target = params.clone();
    let mut queue = if queue_mode {
        Some(KeyQueue::new(cfg.queue_size, cfg.out_dim, cfg.seed)?)
    } else {
        None
    };

    let steps_per_epoch = n / cfg.batch_size;
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut record = RunRecord {
        config: cfg.clone(),
        augment: *aug,
        loss: Vec::with_capacity(cfg.epochs),
        a_batch: Vec::with_capacity(cfg.epochs),
        tau_used: Vec::with_capacity(cfg.epochs),
        clamp_count: Vec::with_capacity(cfg.epochs),
        alignment_loss: Vec::with_capacity(cfg.epochs),
        uniformity: Vec::with_capacity(cfg.epochs),
        knn_accuracy: Vec::with_capacity(cfg.epochs),
        final_params: params.clone(),
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut x1 = Array2::zeros((cfg.batch_size, d));
    let mut x2 = Array2::zeros((cfg.batch_size, d));
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let (mut loss_sum, mut a_sum, mut tau_sum, mut clamps) = (0.0, 0.0, 0.0, 0usize);
        for batch in 0..steps_per_epoch {
            let idx = &order[batch * cfg.batch_size..(batch + 1) * cfg.batch_size];
            for (r, &i) in idx.iter().enumerate() {
                let draw = (epoch * n + i) as u64;
                let (a, b) = two_view_augment(points.row(i), aug, draw);
                x1.row_mut(r).assign(&a);
                x2.row_mut(r).assign(&b);
            }
            let step = match queue.as_mut() {
                None => inbatch_step(&params, x1.view(), x2.view(), &cfg.loss),
                Some(q) => queue_step(&params, &target, x1.view(), x2.view(), &q.snapshot(), &cfg.loss).and_then(
                    |(step, keys)| {
                        q.push(&keys)?;
                        Ok(step)
                    },
                ),
            };
            // an encoder that has blown up cannot produce a loss at all
            let step = match step {
                Err(Error::NonFiniteOutput { .. }) => return Err(Error::NonFiniteLoss { epoch, batch }),
                other => other?,
            };
            if !step.loss.mean_loss.is_finite() || !step.grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            let lr = cfg.lr_schedule.lr_at(cfg.lr, epoch * steps_per_epoch + batch, total_steps);
            sgd.step(&mut params, &step.grads, lr)?;
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            if queue_mode {
                target = momentum_step(&params, &target, cfg.encoder_momentum)?;
            }
            loss_sum += step.loss.mean_loss;
            a_sum += step.loss.a_batch;
            tau_sum += step.loss.tau_used;
            clamps += usize::from(step.loss.clamped);
        }
        let steps = steps_per_epoch as f64;
        let metrics = evaluate(&params, &unit, aug, cfg.eval_k, epoch as u64)?;
        record.loss.push(loss_sum / steps);
        record.a_batch.push(a_sum / steps);
        record.tau_used.push(tau_sum / steps);
        record.clamp_count.push(clamps);
        record.alignment_loss.push(metrics.alignment_loss);
        record.uniformity.push(metrics.uniformity);
        record.knn_accuracy.push(metrics.knn_accuracy);
    }
    record.final_params = params;
    Ok(record)
}

const SNAPSHOT_MAGIC: u32 = u32::from_le_bytes(*b"CLPS");

/// Flat little-endian snapshot: `u32` magic and layer count, `(out, in)` per
/// layer, then each layer's weight (row-major) and bias as `f64`.
pub fn write_snapshot(params: &EncoderParams, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 8 * params.layers.len() + 8 * params.num_params());
    buf.extend_from_slice(&SNAPSHOT_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        let (out, inp) = l.weight.dim();
        buf.extend_from_slice(&(out as u32).to_le_bytes());
        buf.extend_from_slice(&(inp as u32).to_le_bytes());
    }
    for x in params.flatten() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<EncoderParams> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let malformed = || Error::InvalidConfig(format!("{} is not a parameter snapshot", path.display()));
    let word = |i: usize| {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    };
    if word(0) != Some(SNAPSHOT_MAGIC as usize) {
        return Err(malformed());
    }
    let layers = word(1).ok_or_else(malformed)?;
    if !(1..=2).contains(&layers) {
        return Err(malformed());
    }
    let mut shapes = Vec::with_capacity(layers);
    for l in 0..layers {
        shapes.push((word(2 + 2 * l).ok_or_else(malformed)?, word(3 + 2 * l).ok_or_else(malformed)?));
    }
    let header = 8 + 8 * layers;
    let count: usize = shapes.iter().map(|(o, i)| o * i + o).sum();
    if bytes.len() != header + 8 * count {
        return Err(malformed());
    }
    let skeleton = EncoderParams {
        layers: shapes.iter().map(|&(o, i)| Affine::zeros(o, i)).collect(),
    };
    let flat: Vec<f64> = bytes[header..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    EncoderParams::new(skeleton.with_flat(&flat)?.layers)
}
