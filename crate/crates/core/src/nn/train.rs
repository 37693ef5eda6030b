//! Losses, analytic gradients, and deterministic minibatch SGD.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{flipped_padded, Conv1dLayer, ConvBias, Layer, PoolKind, Shape, Value};
use super::network::Network;
use crate::error::{Error, Result};

/// Training target: a class index or a regression vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Vector(DVector<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// Samples, targets, and a deterministic train/validation split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Value>,
    pub targets: Vec<Target>,
    pub split: Vec<Split>,
    /// Number of classes for classification targets.
    pub n_classes: Option<usize>,
    /// Generator id and seed, e.g. `two_moons(n=400,noise=0.1,seed=7)`.
    pub provenance: String,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::EmptySet("dataset"));
        }
        if self.inputs.len() != self.targets.len() || self.inputs.len() != self.split.len() {
            return Err(Error::Data("inputs, targets and split tags must have equal length".into()));
        }
        let shape = self.inputs[0].shape();
        if self.inputs.iter().any(|v| v.shape() != shape) {
            return Err(Error::Data("all samples must share one shape".into()));
        }
        for t in &self.targets {
            match (t, self.n_classes) {
                (Target::Class(c), Some(n)) if *c >= n => {
                    return Err(Error::Data(format!("class index {c} out of range for {n} classes")))
                }
                (Target::Class(_), None) => {
                    return Err(Error::Data("class targets require n_classes".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> Shape {
        self.inputs[0].shape()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn train_inputs(&self) -> Vec<Value> {
        self.indices(Split::Train).into_iter().map(|i| self.inputs[i].clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Learning-rate step: from `epoch` on, the base rate is scaled by
/// `multiplier` (steps compose multiplicatively).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub epoch: usize,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub loss: LossKind,
    #[serde(default)]
    pub lr_schedule: Vec<LrStep>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    fn rate_at(&self, epoch: usize) -> f64 {
        let mut rate = self.learning_rate;
        for step in &self.lr_schedule {
            if epoch >= step.epoch {
                rate *= step.multiplier;
            }
        }
        rate
    }
}

/// Parameter gradients, shaped exactly like the network's parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone)]
pub enum LayerGrad {
    Dense {
        d_weights: DMatrix<f64>,
        d_bias: DVector<f64>,
    },
    Conv {
        d_filters: Vec<Vec<DVector<f64>>>,
        // Same container as the layer's bias so shapes always agree.
        d_bias: ConvBias,
    },
    Flatten,
}

impl Gradients {
    /// Gradient entries in the network's flat parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::Dense { d_weights, d_bias } => {
                    out.extend(d_weights.iter());
                    out.extend(d_bias.iter());
                }
                LayerGrad::Conv { d_filters, d_bias } => {
                    for per_in in d_filters {
                        for h in per_in {
                            out.extend(h.iter());
                        }
                    }
                    match d_bias {
                        ConvBias::PerChannel(b) => out.extend(b.iter()),
                        ConvBias::PerPosition(b) => {
                            for v in b {
                                out.extend(v.iter());
                            }
                        }
                    }
                }
                LayerGrad::Flatten => {}
            }
        }
        out
    }

    fn zeros_like(net: &Network) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => LayerGrad::Dense {
                    d_weights: DMatrix::zeros(d.weights.nrows(), d.weights.ncols()),
                    d_bias: DVector::zeros(d.bias.len()),
                },
                Layer::Conv1d(c) => LayerGrad::Conv {
                    d_filters: c
                        .filters
                        .iter()
                        .map(|per_in| per_in.iter().map(|h| DVector::zeros(h.len())).collect())
                        .collect(),
                    d_bias: match &c.bias {
                        ConvBias::PerChannel(b) => ConvBias::PerChannel(DVector::zeros(b.len())),
                        ConvBias::PerPosition(b) => {
                            ConvBias::PerPosition(b.iter().map(|v| DVector::zeros(v.len())).collect())
                        }
                    },
                },
                Layer::Flatten => LayerGrad::Flatten,
            })
            .collect();
        Gradients { layers }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|g| match g {
            LayerGrad::Dense { d_weights, d_bias } => {
                d_weights.iter().chain(d_bias.iter()).all(|v| v.is_finite())
            }
            LayerGrad::Conv { d_filters, d_bias } => {
                let filt_ok = d_filters.iter().flatten().all(|h| h.iter().all(|v| v.is_finite()));
                let bias_ok = match d_bias {
                    ConvBias::PerChannel(b) => b.iter().all(|v| v.is_finite()),
                    ConvBias::PerPosition(b) => b.iter().all(|v| v.iter().all(|x| x.is_finite())),
                };
                filt_ok && bias_ok
            }
            LayerGrad::Flatten => true,
        })
    }
}

fn check_loss_pairing(net: &Network, loss: LossKind) -> Result<()> {
    let last_act = net.layers.last().and_then(|l| l.activation());
    match loss {
        LossKind::CrossEntropy => {
            if last_act != Some(super::ActivationKind::Softmax) {
                return Err(Error::Config(
                    "cross-entropy loss requires a final softmax dense layer".into(),
                ));
            }
        }
        LossKind::Mse => {
            if last_act == Some(super::ActivationKind::Softmax) {
                return Err(Error::Config("mse loss does not pair with a softmax output".into()));
            }
        }
    }
    Ok(())
}

/// Loss value and upstream gradient for one sample.
///
/// `at_pre` marks gradients taken directly at the final pre-activation
/// (cross-entropy folds the softmax derivative in).
struct OutputGrad {
    loss: f64,
    grad: DVector<f64>,
    at_pre: bool,
}

fn output_grad(output: &DVector<f64>, target: &Target, loss: LossKind, batch: f64) -> Result<OutputGrad> {
    match (loss, target) {
        (LossKind::Mse, Target::Vector(y)) => {
            if y.len() != output.len() {
                return Err(Error::shape("target", format!("{}", output.len()), format!("{}", y.len())));
            }
            let diff = output - y;
            Ok(OutputGrad { loss: diff.norm_squared() / batch, grad: diff * (2.0 / batch), at_pre: false })
        }
        (LossKind::CrossEntropy, Target::Class(c)) => {
            if *c >= output.len() {
                return Err(Error::Data(format!("class index {c} out of range")));
            }
            let p = output[*c].max(1e-300);
            let mut grad = output / batch;
            grad[*c] -= 1.0 / batch;
            Ok(OutputGrad { loss: -p.ln() / batch, grad, at_pre: true })
        }
        (LossKind::Mse, Target::Class(_)) => {
            Err(Error::Config("mse loss needs vector targets".into()))
        }
        (LossKind::CrossEntropy, Target::Vector(_)) => {
            Err(Error::Config("cross-entropy loss needs class targets".into()))
        }
    }
}

/// Batch loss without gradients (forward passes only).
pub fn batch_loss(net: &Network, inputs: &[Value], targets: &[Target], loss: LossKind) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptySet("loss batch"));
    }
    check_loss_pairing(net, loss)?;
    let batch = inputs.len() as f64;
    let mut total = 0.0;
    for (input, target) in inputs.iter().zip(targets) {
        let out_value = net.predict(input)?;
        total += output_grad(out_value.as_flat()?, target, loss, batch)?.loss;
    }
    Ok(total)
}

/// Analytic gradients of the batch loss for every parameter.
///
/// Max-pool routes gradient to the first maximal index of each window. The
/// returned loss is the batch loss (mean over samples).
pub fn gradients(
    net: &Network,
    inputs: &[Value],
    targets: &[Target],
    loss: LossKind,
) -> Result<(f64, Gradients)> {
    if inputs.is_empty() {
        return Err(Error::EmptySet("gradient batch"));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Data("batch inputs and targets must have equal length".into()));
    }
    check_loss_pairing(net, loss)?;

    let batch = inputs.len() as f64;
    let mut grads = Gradients::zeros_like(net);
    let mut total_loss = 0.0;

    for (input, target) in inputs.iter().zip(targets) {
        let trace = net.forward(input)?;
        let out = trace.output().as_flat().map_err(|_| {
            Error::Config("training requires a flat network output (end with dense layers)".into())
        })?;
        let og = output_grad(out, target, loss, batch)?;
        total_loss += og.loss;
        backward_sample(net, &trace, og, &mut grads)?;
    }
    Ok((total_loss, grads))
}

fn backward_sample(
    net: &Network,
    trace: &super::network::Trace,
    og: OutputGrad,
    grads: &mut Gradients,
) -> Result<()> {
    // Gradient w.r.t. the current layer's output, walked backwards.
    let mut g = Value::Flat(og.grad);
    let mut grad_at_pre = og.at_pre;

    for (i, layer) in net.layers.iter().enumerate().rev() {
        let layer_input = &trace.activations[i];
        match (layer, &mut grads.layers[i]) {
            (Layer::Dense(d), LayerGrad::Dense { d_weights, d_bias }) => {
                let g_out = g.as_flat()?;
                let pre = trace.preactivations[i].as_ref().unwrap().as_flat()?;
                let d_pre = if grad_at_pre {
                    g_out.clone()
                } else {
                    g_out.component_mul(&d.activation.derivative(pre))
                };
                grad_at_pre = false;
                let x = layer_input.as_flat()?;
                *d_weights += &d_pre * x.transpose();
                *d_bias += &d_pre;
                g = Value::Flat(d.weights.transpose() * d_pre);
            }
            (Layer::Conv1d(c), LayerGrad::Conv { d_filters, d_bias }) => {
                debug_assert!(!grad_at_pre, "conv layers never take the folded softmax gradient");
                let g_channels = g.as_channels()?;
                let pre = trace.preactivations[i].as_ref().unwrap().as_channels()?;
                let x = layer_input.as_channels()?;
                g = Value::Channels(conv_backward(c, x, pre, g_channels, d_filters, d_bias)?);
            }
            (Layer::Flatten, LayerGrad::Flatten) => {
                // Un-flatten: reshape the flat gradient to the input's channels.
                let flat = g.as_flat()?;
                let chans = layer_input.as_channels()?;
                let len = chans.first().map_or(0, |c| c.len());
                let mut out = Vec::with_capacity(chans.len());
                for m in 0..chans.len() {
                    out.push(DVector::from_fn(len, |l, _| flat[m * len + l]));
                }
                g = Value::Channels(out);
            }
            _ => unreachable!("gradient layout mirrors the network"),
        }
    }
    Ok(())
}

fn conv_backward(
    layer: &Conv1dLayer,
    input: &[DVector<f64>],
    pre: &[DVector<f64>],
    g_out: &[DVector<f64>],
    d_filters: &mut [Vec<DVector<f64>>],
    d_bias: &mut ConvBias,
) -> Result<Vec<DVector<f64>>> {
    let k = layer.kernel_len();
    let len = input[0].len();
    let padded_len = len + k - 1;
    let front = k / 2;

    // Route pooled gradients back to their source positions, then through the
    // activation derivative.
    let mut d_pre: Vec<DVector<f64>> = Vec::with_capacity(pre.len());
    for (n, p) in pre.iter().enumerate() {
        let mut d_act = DVector::zeros(p.len());
        match layer.pool.kind {
            PoolKind::None => d_act.copy_from(&g_out[n]),
            PoolKind::Max => {
                let activated = layer.activation.apply(p);
                let (_, arg) = layer.pool.forward(&activated);
                for (j, &src) in arg.as_ref().unwrap().iter().enumerate() {
                    d_act[src] += g_out[n][j];
                }
            }
        }
        d_pre.push(d_act.component_mul(&layer.activation.derivative(p)));
    }

    match d_bias {
        ConvBias::PerChannel(db) => {
            for (n, dp) in d_pre.iter().enumerate() {
                db[n] += dp.sum();
            }
        }
        ConvBias::PerPosition(db) => {
            for (n, dp) in d_pre.iter().enumerate() {
                if db[n].len() != dp.len() {
                    return Err(Error::shape(
                        "conv bias gradient",
                        format!("{}", db[n].len()),
                        format!("{}", dp.len()),
                    ));
                }
                db[n] += dp;
            }
        }
    }

    let windows: Vec<DVector<f64>> = input.iter().map(|x| flipped_padded(x, k)).collect();
    let out_len = d_pre[0].len();

    let mut d_input = vec![DVector::zeros(len); input.len()];
    for (m, u) in windows.iter().enumerate() {
        let mut d_u = DVector::zeros(padded_len);
        for n in 0..layer.out_channels() {
            let h = &layer.filters[m][n];
            let dh = &mut d_filters[m][n];
            for j in 0..out_len {
                let start = len - 1 - j * layer.stride;
                let dp = d_pre[n][j];
                if dp == 0.0 {
                    continue;
                }
                for t in 0..k {
                    dh[t] += dp * u[start + t];
                    d_u[start + t] += dp * h[t];
                }
            }
        }
        // x[l] sits at flipped-padded index padded_len - 1 - front - l.
        for l in 0..len {
            d_input[m][l] = d_u[padded_len - 1 - front - l];
        }
    }
    Ok(d_input)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Loss (and accuracy, for classification) over one split of the dataset.
pub fn evaluate(net: &Network, data: &Dataset, split: Split, loss: LossKind) -> Result<EvalStats> {
    check_loss_pairing(net, loss)?;
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySet("evaluation split"));
    }
    let n = idx.len() as f64;
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut classification = false;
    for i in idx {
        let out_value = net.predict(&data.inputs[i])?;
        let out = out_value.as_flat()?;
        let og = output_grad(out, &data.targets[i], loss, n)?;
        total += og.loss;
        if let Target::Class(c) = &data.targets[i] {
            classification = true;
            let pred = out.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(j, _)| j);
            if pred == Some(*c) {
                correct += 1;
            }
        }
    }
    Ok(EvalStats {
        loss: total,
        accuracy: classification.then(|| correct as f64 / n),
    })
}

/// Minibatch SGD with momentum. Deterministic given the config seed: epoch
/// shuffles are drawn from one seeded generator.
pub fn train(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, Vec<EpochStats>)> {
    cfg.validate()?;
    data.validate()?;
    check_loss_pairing(net, cfg.loss)?;

    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptySet("training split"));
    }
    let has_validation = !data.indices(Split::Validation).is_empty();

    let mut model = net.clone();
    let mut velocity = Gradients::zeros_like(net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.epochs);

    let mut order = train_idx;
    for epoch in 1..=cfg.epochs {
        let rate = cfg.rate_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<Value> = chunk.iter().map(|&i| data.inputs[i].clone()).collect();
            let targets: Vec<Target> = chunk.iter().map(|&i| data.targets[i].clone()).collect();
            let (loss, grads) = gradients(&model, &inputs, &targets, cfg.loss)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            apply_update(&mut model, &grads, &mut velocity, rate, cfg.momentum);
            epoch_loss += loss;
            batches += 1;
        }
        let (val_loss, val_accuracy) = if has_validation {
            let stats = evaluate(&model, data, Split::Validation, cfg.loss)?;
            (Some(stats.loss), stats.accuracy)
        } else {
            (None, None)
        };
        curve.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_loss,
            val_accuracy,
        });
    }
    Ok((model, curve))
}

fn apply_update(net: &mut Network, grads: &Gradients, velocity: &mut Gradients, rate: f64, momentum: f64) {
    for ((layer, grad), vel) in net.layers.iter_mut().zip(&grads.layers).zip(&mut velocity.layers) {
        match (layer, grad, vel) {
            (
                Layer::Dense(d),
                LayerGrad::Dense { d_weights, d_bias },
                LayerGrad::Dense { d_weights: vw, d_bias: vb },
            ) => {
                *vw = &*vw * momentum + d_weights;
                *vb = &*vb * momentum + d_bias;
                d.weights -= &*vw * rate;
                d.bias -= &*vb * rate;
            }
            (
                Layer::Conv1d(c),
                LayerGrad::Conv { d_filters, d_bias },
                LayerGrad::Conv { d_filters: vf, d_bias: vbias },
            ) => {
                for m in 0..c.filters.len() {
                    for n in 0..c.filters[m].len() {
                        vf[m][n] = &vf[m][n] * momentum + &d_filters[m][n];
                        c.filters[m][n] -= &vf[m][n] * rate;
                    }
                }
                match (&mut c.bias, d_bias, vbias) {
                    (ConvBias::PerChannel(b), ConvBias::PerChannel(db), ConvBias::PerChannel(vb)) => {
                        *vb = &*vb * momentum + db;
                        *b -= &*vb * rate;
                    }
                    (ConvBias::PerPosition(b), ConvBias::PerPosition(db), ConvBias::PerPosition(vb)) => {
                        for (j, bj) in b.iter_mut().enumerate() {
                            vb[j] = &vb[j] * momentum + &db[j];
                            *bj -= &vb[j] * rate;
                        }
                    }
                    _ => unreachable!("gradient layout mirrors the network"),
                }
            }
            (Layer::Flatten, LayerGrad::Flatten, LayerGrad::Flatten) => {}
            _ => unreachable!("gradient layout mirrors the network"),
        }
    }
}
