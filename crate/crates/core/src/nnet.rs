//! Dense feed-forward networks with exact backpropagation.
//!
//! A [`Network`] is an encoder (a stack of affine layers, each followed by the
//! activation) and a linear classification head. All parameters live in one
//! flat `Vec<f64>`: every encoder layer's weights (row-major, `out x in`) then
//! its biases, followed by the head weights and biases.

use std::ops::ControlFlow;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `grad` in place by the activation derivative, given the
    /// layer output `out = act(z)`.
    fn backprop(self, grad: &mut Array2<f64>, out: &Array2<f64>) {
        match self {
            Activation::Relu => grad.zip_mut_with(out, |g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Tanh => grad.zip_mut_with(out, |g, &o| *g *= 1.0 - o * o),
        }
    }
}

/// Architecture: `layer_widths` runs from the input dimension to the
/// embedding dimension; the head maps the embedding to `head_classes` logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub layer_widths: Vec<usize>,
    pub head_classes: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }

    fn len(&self) -> usize {
        self.weight_len() + self.outputs
    }
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, head_classes: usize, activation: Activation) -> Result<Self> {
        let spec = Self { layer_widths, head_classes, activation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidSpec("need at least an input and an embedding width".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidSpec("layer widths must be positive".into()));
        }
        if self.head_classes < 2 {
            return Err(Error::InvalidSpec("head needs at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    fn encoder_shapes(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let shape = LayerShape { inputs: w[0], outputs: w[1], offset };
                offset += shape.len();
                shape
            })
            .collect()
    }

    fn head_shape(&self) -> LayerShape {
        LayerShape {
            inputs: self.embedding_dim(),
            outputs: self.head_classes,
            offset: self.encoder_param_count(),
        }
    }

    /// Number of encoder parameters; they occupy `params[..encoder_param_count]`.
    pub fn encoder_param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn param_count(&self) -> usize {
        self.encoder_param_count() + self.embedding_dim() * self.head_classes + self.head_classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<f64>,
}

/// Features plus class labels in `[0, head_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != features.nrows() {
            return Err(Error::DimensionMismatch { expected: features.nrows(), got: labels.len() });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` of this batch, in the given order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The batch repeated `k` times (row blocks stacked).
    pub fn replicate(&self, k: usize) -> Batch {
        let idx: Vec<usize> = (0..k).flat_map(|_| 0..self.len()).collect();
        self.select(&idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "one")]
    pub lr_decay_factor: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSchedule(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("decay factor must lie in (0, 1]");
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay epochs must be strictly increasing");
        }
        if self.lr_decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad("decay epochs must be below the epoch count");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }
}

fn uniform_fill(out: &mut [f64], fan_in: usize, rng: &mut impl rand::Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    for w in out {
        *w = dist.sample(rng);
    }
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut params = vec![0.0; spec.param_count()];
    let mut rng = seeded_rng(seed);
    for shape in spec.encoder_shapes().into_iter().chain([spec.head_shape()]) {
        uniform_fill(&mut params[shape.offset..shape.offset + shape.weight_len()], shape.inputs, &mut rng);
    }
    Ok(Network { spec: spec.clone(), params })
}

/// Cached forward pass through the encoder, ready for backpropagation.
pub struct EncoderPass<'a> {
    net: &'a Network,
    /// `outputs[0]` is the input; `outputs[l + 1]` is the output of layer `l`.
    outputs: Vec<Array2<f64>>,
}

impl<'a> EncoderPass<'a> {
    pub fn embeddings(&self) -> &Array2<f64> {
        self.outputs.last().expect("at least the input")
    }

    /// Gradient of a scalar objective w.r.t. all parameters, given its
    /// gradient w.r.t. the embeddings. Head entries are zero.
    pub fn backward(&self, d_embed: &Array2<f64>) -> Result<Vec<f64>> {
        let expected = self.embeddings().dim();
        if d_embed.dim() != expected {
            return Err(Error::DimensionMismatch { expected: expected.0 * expected.1, got: d_embed.len() });
        }
        let mut grad = vec![0.0; self.net.params.len()];
        self.backward_into(d_embed.clone(), &mut grad);
        Ok(grad)
    }

    fn backward_into(&self, mut delta: Array2<f64>, grad: &mut [f64]) {
        let act = self.net.spec.activation;
        let shapes = self.net.spec.encoder_shapes();
        for (l, shape) in shapes.iter().enumerate().rev() {
            act.backprop(&mut delta, &self.outputs[l + 1]);
            let input = &self.outputs[l];
            let (gw, gb) = grad[shape.offset..shape.offset + shape.len()].split_at_mut(shape.weight_len());
            let dw = delta.t().dot(input);
            gw.iter_mut().zip(dw.iter()).for_each(|(g, d)| *g = *d);
            for (b, col) in gb.iter_mut().zip(delta.axis_iter(Axis(1))) {
                *b = col.sum();
            }
            if l > 0 {
                delta = delta.dot(&self.net.weights(*shape));
            }
        }
    }
}

impl Network {
    pub fn from_parts(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::DimensionMismatch { expected: spec.param_count(), got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidSpec("parameters must be finite".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn encoder_params(&self) -> &[f64] {
        &self.params[..self.spec.encoder_param_count()]
    }

    pub fn head_params(&self) -> &[f64] {
        &self.params[self.spec.encoder_param_count()..]
    }

    /// Mutable access for tests and tools that construct networks by hand.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn weights(&self, shape: LayerShape) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (shape.outputs, shape.inputs),
            &self.params[shape.offset..shape.offset + shape.weight_len()],
        )
        .expect("shape matches slice")
    }

    fn biases(&self, shape: LayerShape) -> ArrayView1<'_, f64> {
        let start = shape.offset + shape.weight_len();
        ArrayView1::from(&self.params[start..start + shape.outputs])
    }

    fn affine(&self, x: &Array2<f64>, shape: LayerShape) -> Array2<f64> {
        x.dot(&self.weights(shape).t()) + self.biases(shape)
    }

    fn check_input(&self, features: &Array2<f64>) -> Result<()> {
        if features.ncols() != self.spec.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.spec.input_dim(), got: features.ncols() });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_input(&batch.features)?;
        if let Some(&label) = batch.labels.iter().find(|&&l| l >= self.spec.head_classes) {
            return Err(Error::LabelOutOfRange { label, classes: self.spec.head_classes });
        }
        Ok(())
    }

    pub fn encoder_pass(&self, features: &Array2<f64>) -> Result<EncoderPass<'_>> {
        self.check_input(features)?;
        let mut outputs = Vec::with_capacity(self.spec.layer_widths.len());
        outputs.push(features.to_owned());
        for shape in self.spec.encoder_shapes() {
            let mut z = self.affine(outputs.last().expect("nonempty"), shape);
            self.spec.activation.apply(&mut z);
            outputs.push(z);
        }
        Ok(EncoderPass { net: self, outputs })
    }

    fn head(&self, embeddings: &Array2<f64>) -> Array2<f64> {
        self.affine(embeddings, self.spec.head_shape())
    }

    /// Gradient of the mean cross-entropy, computed from a forward cache.
    fn backprop_batch(&self, batch: &Batch) -> (f64, Vec<f64>) {
        let pass = self.encoder_pass(&batch.features).expect("checked batch");
        let logits = self.head(pass.embeddings());
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut delta = softmax_rows(&logits);
        for (i, (&y, row)) in batch.labels.iter().zip(logits.rows()).enumerate() {
            loss += log_sum_exp(row) - row[y];
            delta[[i, y]] -= 1.0;
        }
        delta /= n;

        let mut grad = vec![0.0; self.params.len()];
        let head = self.spec.head_shape();
        let dw = delta.t().dot(pass.embeddings());
        let (gw, gb) = grad[head.offset..].split_at_mut(head.weight_len());
        gw.iter_mut().zip(dw.iter()).for_each(|(g, d)| *g = *d);
        for (b, col) in gb.iter_mut().zip(delta.axis_iter(Axis(1))) {
            *b = col.sum();
        }
        let d_embed = delta.dot(&self.weights(head));
        pass.backward_into(d_embed, &mut grad);
        (loss / n, grad)
    }
}

/// Numerically stable `ln(sum(exp(row)))`.
pub fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn encode(net: &Network, features: &Array2<f64>) -> Result<Array2<f64>> {
    let mut pass = net.encoder_pass(features)?;
    Ok(pass.outputs.pop().expect("nonempty"))
}

pub fn forward(net: &Network, features: &Array2<f64>) -> Result<Array2<f64>> {
    let embeddings = encode(net, features)?;
    Ok(net.head(&embeddings))
}

/// Mean cross-entropy of the batch.
pub fn loss(net: &Network, batch: &Batch) -> Result<f64> {
    net.check_batch(batch)?;
    let logits = forward(net, &batch.features)?;
    let total: f64 = batch
        .labels
        .iter()
        .zip(logits.rows())
        .map(|(&y, row)| log_sum_exp(row) - row[y])
        .sum();
    Ok(total / batch.len() as f64)
}

/// Gradient of [`loss`] w.r.t. every parameter.
pub fn grad(net: &Network, batch: &Batch) -> Result<Vec<f64>> {
    net.check_batch(batch)?;
    Ok(net.backprop_batch(batch).1)
}

/// `result[i]` is the gradient of sample `i`'s own loss.
pub fn per_sample_grads(net: &Network, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    net.check_batch(batch)?;
    Ok((0..batch.len()).map(|i| net.backprop_batch(&batch.select(&[i])).1).collect())
}

pub fn predict(net: &Network, features: &Array2<f64>) -> Result<Vec<usize>> {
    let logits = forward(net, features)?;
    Ok(logits.rows().into_iter().map(argmax).collect())
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate(net: &Network, batch: &Batch) -> Result<f64> {
    net.check_batch(batch)?;
    let preds = predict(net, &batch.features)?;
    let hits = preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Minibatch SGD with momentum. Returns the trained network and the mean
/// minibatch loss of every epoch.
pub fn train(net: &Network, data: &Batch, schedule: &TrainSchedule) -> Result<(Network, Vec<f64>)> {
    train_with(net, data, schedule, |_, _| ControlFlow::Continue(()))
}

/// Like [`train`], but `after_epoch(epoch, net)` may stop training early.
pub fn train_with<F>(net: &Network, data: &Batch, schedule: &TrainSchedule, mut after_epoch: F) -> Result<(Network, Vec<f64>)>
where
    F: FnMut(usize, &Network) -> ControlFlow<()>,
{
    schedule.validate()?;
    net.check_batch(data)?;
    let mut net = net.clone();
    let mut velocity = vec![0.0; net.params.len()];
    let mut history = Vec::with_capacity(schedule.epochs);
    let n = data.len();

    for epoch in 0..schedule.epochs {
        let rate = schedule.rate_at(epoch);
        // Order depends only on the seed, the epoch and the sample index.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(derive_seed(schedule.seed, epoch as u64)));

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(schedule.batch_size) {
            let mini = data.select(chunk);
            let (l, g) = net.backprop_batch(&mini);
            epoch_loss += l * chunk.len() as f64;
            for ((p, v), g) in net.params.iter_mut().zip(&mut velocity).zip(&g) {
                *v = schedule.momentum * *v + g;
                *p -= rate * *v;
            }
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidSchedule(format!("parameters became non-finite in epoch {epoch}")));
        }
        history.push(epoch_loss / n as f64);
        if after_epoch(epoch, &net).is_break() {
            break;
        }
    }
    Ok((net, history))
}

/// Keeps the encoder and draws a fresh `n_classes`-way head from `seed`.
pub fn replace_head(net: &Network, n_classes: usize, seed: u64) -> Result<Network> {
    let spec = NetworkSpec { head_classes: n_classes, ..net.spec.clone() };
    spec.validate()?;
    let mut params = net.encoder_params().to_vec();
    let head = spec.head_shape();
    params.resize(spec.param_count(), 0.0);
    let mut rng = seeded_rng(seed);
    uniform_fill(&mut params[head.offset..head.offset + head.weight_len()], head.inputs, &mut rng);
    Ok(Network { spec, params })
}

impl Network {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Network = serde_json::from_str(text)?;
        Network::from_parts(raw.spec, raw.params)
    }
}

/// Column means of a non-empty matrix.
pub fn column_means(m: &Array2<f64>) -> Array1<f64> {
    let mut acc = Array1::zeros(m.ncols());
    for row in m.rows() {
        acc += &row;
    }
    acc / m.nrows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_spec() -> NetworkSpec {
        NetworkSpec::new(vec![2, 3], 4, Activation::Relu).unwrap()
    }

    fn toy_batch(seed: u64, n: usize, dim: usize, classes: usize) -> Batch {
        use rand::Rng;
        let mut rng = seeded_rng(seed);
        let features = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(features, labels).unwrap()
    }

    #[test]
    fn param_count_matches_layout() {
        let net = init_network(&small_spec(), 0).unwrap();
        assert_eq!(net.param_count(), 25);
        assert_eq!(small_spec().encoder_param_count(), 9);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_network(&small_spec(), 5).unwrap();
        let b = init_network(&small_spec(), 5).unwrap();
        let c = init_network(&small_spec(), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        // biases zero
        assert_eq!(&a.params()[6..9], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(vec![3], 2, Activation::Relu).is_err());
        assert!(NetworkSpec::new(vec![3, 2], 1, Activation::Relu).is_err());
        assert!(NetworkSpec::new(vec![3, 0], 2, Activation::Relu).is_err());
    }

    #[test]
    fn zero_network_encodes_to_zero() {
        let mut net = init_network(&small_spec(), 1).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        assert!(encode(&net, &x).unwrap().iter().all(|&v| v == 0.0));
        assert!(forward(&net, &x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_nonnegative_input() {
        let spec = NetworkSpec::new(vec![3, 3], 2, Activation::Relu).unwrap();
        let mut net = init_network(&spec, 0).unwrap();
        let p = net.params_mut();
        p[..12].iter_mut().for_each(|v| *v = 0.0);
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        let x = array![[0.0, 1.5, 2.0], [3.0, 0.25, 0.0]];
        assert_eq!(encode(&net, &x).unwrap(), x);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let net = init_network(&small_spec(), 0).unwrap();
        assert!(matches!(encode(&net, &Array2::zeros((1, 3))), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn hand_sized_forward() {
        // 2-2 encoder (tanh), 2-class head.
        let spec = NetworkSpec::new(vec![2, 2], 2, Activation::Tanh).unwrap();
        let params = vec![
            0.5, -1.0, 0.25, 2.0, // W1 rows
            0.1, -0.2, // b1
            1.0, -1.0, 0.5, 0.75, // head rows
            0.3, 0.0, // head bias
        ];
        let net = Network::from_parts(spec, params).unwrap();
        let x = array![[1.0, 2.0]];
        let h0 = (0.5 * 1.0 - 1.0 * 2.0 + 0.1_f64).tanh();
        let h1 = (0.25 * 1.0 + 2.0 * 2.0 - 0.2_f64).tanh();
        let expected = [h0 - h1 + 0.3, 0.5 * h0 + 0.75 * h1];
        let logits = forward(&net, &x).unwrap();
        assert!((logits[[0, 0]] - expected[0]).abs() < 1e-15);
        assert!((logits[[0, 1]] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[1000.0, -1000.0, 3.0], [0.0, 0.0, 0.0], [-5.0, 2.5, 1e-3]];
        for row in softmax_rows(&logits).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let spec = NetworkSpec::new(vec![2, 3], 5, Activation::Relu).unwrap();
        let mut net = init_network(&spec, 0).unwrap();
        let enc = spec.encoder_param_count();
        net.params_mut()[enc..].iter_mut().for_each(|p| *p = 0.0);
        let batch = toy_batch(3, 7, 2, 5);
        assert!((loss(&net, &batch).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_vanishing_loss() {
        let spec = NetworkSpec::new(vec![1, 1], 2, Activation::Relu).unwrap();
        // embedding = relu(x), head: logit0 = 0, logit1 = m * h
        let net = Network::from_parts(spec, vec![1.0, 0.0, 0.0, 1e4, 0.0, 0.0]).unwrap();
        let batch = Batch::new(array![[1.0]], vec![1]).unwrap();
        let l = loss(&net, &batch).unwrap();
        assert!((0.0..1e-12).contains(&l));
    }

    #[test]
    fn loss_matches_per_sample_softmax() {
        let spec = NetworkSpec::new(vec![3, 4, 2], 3, Activation::Tanh).unwrap();
        let net = init_network(&spec, 11).unwrap();
        let batch = toy_batch(12, 3, 3, 3);
        let logits = forward(&net, &batch.features).unwrap();
        let mut total = 0.0;
        for (i, &y) in batch.labels.iter().enumerate() {
            let row = logits.row(i);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[y].exp() / denom).ln();
        }
        assert!((loss(&net, &batch).unwrap() - total / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(Batch::new(Array2::zeros((0, 2)), vec![]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let net = init_network(&small_spec(), 0).unwrap();
        let batch = Batch::new(array![[0.0, 1.0]], vec![4]).unwrap();
        assert!(matches!(loss(&net, &batch), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn gradient_vanishes_at_stationary_point() {
        // One sample of each class with identical features: with a zero head
        // the logits are tied and the class gradients cancel.
        let spec = NetworkSpec::new(vec![1, 1], 2, Activation::Relu).unwrap();
        let net = Network::from_parts(spec, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let batch = Batch::new(array![[2.0], [2.0]], vec![0, 1]).unwrap();
        let g = grad(&net, &batch).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12), "{g:?}");
    }

    #[test]
    fn replicated_batch_has_same_gradient() {
        let spec = NetworkSpec::new(vec![3, 5, 2], 3, Activation::Tanh).unwrap();
        let net = init_network(&spec, 2).unwrap();
        let batch = toy_batch(4, 5, 3, 3);
        let g1 = grad(&net, &batch).unwrap();
        let g3 = grad(&net, &batch.replicate(3)).unwrap();
        for (a, b) in g1.iter().zip(&g3) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_sample_per_sample_grad_is_grad() {
        let net = init_network(&small_spec(), 9).unwrap();
        let batch = toy_batch(1, 1, 2, 4);
        assert_eq!(per_sample_grads(&net, &batch).unwrap()[0], grad(&net, &batch).unwrap());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let net = init_network(&small_spec(), 0).unwrap();
        let batch = toy_batch(1, 10, 2, 4);
        let schedule = TrainSchedule {
            learning_rate: 0.0,
            momentum: 0.9,
            epochs: 3,
            batch_size: 4,
            lr_decay_epochs: vec![],
            lr_decay_factor: 1.0,
            seed: 0,
        };
        let (trained, history) = train(&net, &batch, &schedule).unwrap();
        assert_eq!(trained.params(), net.params());
        assert_eq!(history.len(), 3);
    }

    #[test]
    fn schedule_validation() {
        let mut s = TrainSchedule {
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 10,
            batch_size: 4,
            lr_decay_epochs: vec![3, 7],
            lr_decay_factor: 0.1,
            seed: 0,
        };
        assert!(s.validate().is_ok());
        assert!((s.rate_at(8) - 0.001).abs() < 1e-15);
        s.lr_decay_epochs = vec![7, 3];
        assert!(s.validate().is_err());
        s.lr_decay_epochs = vec![10];
        assert!(s.validate().is_err());
        s.lr_decay_epochs = vec![];
        s.momentum = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn evaluate_extremes() {
        let spec = NetworkSpec::new(vec![3, 4], 3, Activation::Tanh).unwrap();
        let net = init_network(&spec, 4).unwrap();
        let mut batch = toy_batch(8, 20, 3, 3);
        let preds = predict(&net, &batch.features).unwrap();
        batch.labels = preds.clone();
        assert_eq!(evaluate(&net, &batch).unwrap(), 1.0);
        batch.labels = preds.iter().map(|p| (p + 1) % 3).collect();
        assert_eq!(evaluate(&net, &batch).unwrap(), 0.0);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(array![1.0, 3.0, 3.0].view()), 1);
        assert_eq!(argmax(array![0.0, 0.0].view()), 0);
    }

    #[test]
    fn replace_head_keeps_encoder() {
        let spec = NetworkSpec::new(vec![3, 6, 4], 5, Activation::Relu).unwrap();
        let net = init_network(&spec, 1).unwrap();
        let before = net.clone();
        let swapped = replace_head(&net, 5, 77).unwrap();
        assert_eq!(net, before);
        assert_eq!(swapped.encoder_params(), net.encoder_params());
        let x = toy_batch(0, 4, 3, 2).features;
        assert_eq!(encode(&swapped, &x).unwrap(), encode(&net, &x).unwrap());
        assert_eq!(replace_head(&net, 3, 9).unwrap(), replace_head(&net, 3, 9).unwrap());
        assert_eq!(replace_head(&net, 3, 9).unwrap().spec().head_classes, 3);
        assert!(replace_head(&net, 1, 9).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let spec = NetworkSpec::new(vec![4, 7, 3], 6, Activation::Tanh).unwrap();
        let net = init_network(&spec, 123).unwrap();
        let back = Network::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
                   net.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>());
        assert_eq!(back.spec(), net.spec());
    }
}
