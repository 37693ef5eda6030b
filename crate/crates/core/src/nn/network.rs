//! Sequential networks, forward traces, and seeded initialization.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layer::{Conv1dLayer, ConvBias, DenseLayer, Layer, PoolSpec, Shape, Value};
use super::ActivationKind;
use crate::error::{Error, Result};

/// A strictly sequential network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub input_shape: Shape,
}

/// Every boundary value of a forward pass.
///
/// `activations[0]` is the input; `activations[i + 1]` is the output of layer
/// `i`. `preactivations[i]` is layer `i`'s affine output before activation and
/// pooling (`None` for flatten layers).
#[derive(Debug, Clone)]
pub struct Trace {
    pub activations: Vec<Value>,
    pub preactivations: Vec<Option<Value>>,
}

impl Trace {
    pub fn output(&self) -> &Value {
        self.activations.last().expect("trace holds at least the input")
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Shape) -> Result<Self> {
        let net = Network { layers, input_shape };
        net.validate()?;
        Ok(net)
    }

    /// Checks shape composition, the flatten rule, and the softmax rule.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut shape = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .out_shape(shape)
                .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
            if let Some(act) = layer.activation() {
                if act.is_softmax() && i + 1 != self.layers.len() {
                    return Err(Error::Config(format!(
                        "layer {i}: softmax is only allowed as the final activation"
                    )));
                }
                if act.is_softmax() && matches!(layer, Layer::Conv1d(_)) {
                    return Err(Error::Config(format!("layer {i}: softmax on a conv layer is not supported")));
                }
            }
        }
        Ok(())
    }

    /// Shapes at every layer boundary; `shapes[0]` is the input shape.
    pub fn boundary_shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = vec![self.input_shape];
        for layer in &self.layers {
            shapes.push(layer.out_shape(*shapes.last().unwrap())?);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        Ok(*self.boundary_shapes()?.last().unwrap())
    }

    /// Forward pass recording every activation and pre-activation.
    pub fn forward(&self, input: &Value) -> Result<Trace> {
        if input.shape() != self.input_shape {
            return Err(Error::shape(
                "network input",
                self.input_shape.describe(),
                input.shape().describe(),
            ));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut preactivations = Vec::with_capacity(self.layers.len());
        activations.push(input.clone());
        for layer in &self.layers {
            let current = activations.last().unwrap();
            match layer {
                Layer::Dense(l) => {
                    let pre = l.preactivation(current.as_flat()?)?;
                    let post = l.activation.apply(&pre);
                    preactivations.push(Some(Value::Flat(pre)));
                    activations.push(Value::Flat(post));
                }
                Layer::Conv1d(l) => {
                    let fwd = l.forward_full(current.as_channels()?)?;
                    preactivations.push(Some(Value::Channels(fwd.pre)));
                    activations.push(Value::Channels(fwd.post));
                }
                Layer::Flatten => {
                    let flat = Value::Flat(current.vectorize());
                    preactivations.push(None);
                    activations.push(flat);
                }
            }
        }
        Ok(Trace { activations, preactivations })
    }

    pub fn predict(&self, input: &Value) -> Result<Value> {
        let mut trace = self.forward(input)?;
        Ok(trace.activations.pop().expect("trace holds at least the input"))
    }

    /// All parameters as one flat vector. The order matches
    /// [`super::Gradients::flatten`]: layers in order, dense weights (storage
    /// order) then bias, conv filters `[m][n]` then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.extend(d.weights.iter());
                    out.extend(d.bias.iter());
                }
                Layer::Conv1d(c) => {
                    for per_in in &c.filters {
                        for h in per_in {
                            out.extend(h.iter());
                        }
                    }
                    match &c.bias {
                        ConvBias::PerChannel(b) => out.extend(b.iter()),
                        ConvBias::PerPosition(b) => {
                            for v in b {
                                out.extend(v.iter());
                            }
                        }
                    }
                }
                Layer::Flatten => {}
            }
        }
        out
    }

    /// Overwrites all parameters from a flat vector in [`Self::params_flat`] order.
    pub fn set_params_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.parameter_count(), "parameter count mismatch");
        let mut it = params.iter();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    for w in d.weights.iter_mut() {
                        *w = *it.next().unwrap();
                    }
                    for b in d.bias.iter_mut() {
                        *b = *it.next().unwrap();
                    }
                }
                Layer::Conv1d(c) => {
                    for per_in in &mut c.filters {
                        for h in per_in {
                            for v in h.iter_mut() {
                                *v = *it.next().unwrap();
                            }
                        }
                    }
                    match &mut c.bias {
                        ConvBias::PerChannel(b) => {
                            for v in b.iter_mut() {
                                *v = *it.next().unwrap();
                            }
                        }
                        ConvBias::PerPosition(b) => {
                            for vec in b {
                                for v in vec.iter_mut() {
                                    *v = *it.next().unwrap();
                                }
                            }
                        }
                    }
                }
                Layer::Flatten => {}
            }
        }
    }

    /// Parameter count over all layers.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => d.weights.len() + d.bias.len(),
                Layer::Conv1d(c) => {
                    let filt: usize = c.filters.iter().flatten().map(|h| h.len()).sum();
                    let bias = match &c.bias {
                        ConvBias::PerChannel(b) => b.len(),
                        ConvBias::PerPosition(b) => b.iter().map(|v| v.len()).sum(),
                    };
                    filt + bias
                }
                Layer::Flatten => 0,
            })
            .sum()
    }
}

/// Architecture description without parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: ShapeSpec,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeSpec {
    Flat { length: usize },
    Channels { channels: usize, length: usize },
}

impl From<ShapeSpec> for Shape {
    fn from(s: ShapeSpec) -> Shape {
        match s {
            ShapeSpec::Flat { length } => Shape::Flat(length),
            ShapeSpec::Channels { channels, length } => Shape::Channels { channels, length },
        }
    }
}

impl From<Shape> for ShapeSpec {
    fn from(s: Shape) -> ShapeSpec {
        match s {
            Shape::Flat(length) => ShapeSpec::Flat { length },
            Shape::Channels { channels, length } => ShapeSpec::Channels { channels, length },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        units: usize,
        activation: ActivationKind,
    },
    Conv1d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        pool: PoolSpecSpec,
        activation: ActivationKind,
    },
    Flatten,
}

/// Wire form of a pool: `{"kind":"max","r":2}` or `{"kind":"none"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolSpecSpec {
    None,
    Max { r: usize },
}

impl Default for PoolSpecSpec {
    fn default() -> Self {
        PoolSpecSpec::None
    }
}

impl PoolSpecSpec {
    pub fn to_pool(self) -> Result<PoolSpec> {
        match self {
            PoolSpecSpec::None => Ok(PoolSpec::none()),
            PoolSpecSpec::Max { r } => PoolSpec::max(r),
        }
    }

    pub fn from_pool(p: PoolSpec) -> Self {
        match p.kind {
            super::layer::PoolKind::None => PoolSpecSpec::None,
            super::layer::PoolKind::Max => PoolSpecSpec::Max { r: p.stride },
        }
    }
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Zero-mean Gaussian with variance 0.05; biases zero. The default.
    Gaussian005,
    /// Truncated (±2σ) zero-mean Gaussian with variance 2 / fan_in; biases zero.
    He,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Gaussian005
    }
}

impl NetworkSpec {
    /// Validates shape composition and returns per-layer input shapes.
    pub fn propagate_shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes = vec![Shape::from(self.input_shape)];
        for (i, spec) in self.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let next = match (spec, cur) {
                (LayerSpec::Dense { units, .. }, Shape::Flat(_)) => Shape::Flat(*units),
                (LayerSpec::Dense { .. }, other) => {
                    return Err(Error::Config(format!(
                        "layer {i}: dense layer needs a flat input, found {} (insert a flatten layer)",
                        other.describe()
                    )))
                }
                (
                    LayerSpec::Conv1d { out_channels, stride, pool, .. },
                    Shape::Channels { length, .. },
                ) => {
                    let conv_len = super::layer::conv_output_len(length, *stride);
                    Shape::Channels {
                        channels: *out_channels,
                        length: pool.to_pool()?.output_len(conv_len),
                    }
                }
                (LayerSpec::Conv1d { .. }, other) => {
                    return Err(Error::Config(format!(
                        "layer {i}: conv layer needs a channels input, found {}",
                        other.describe()
                    )))
                }
                (LayerSpec::Flatten, Shape::Channels { channels, length }) => Shape::Flat(channels * length),
                (LayerSpec::Flatten, other) => {
                    return Err(Error::Config(format!(
                        "layer {i}: flatten needs a channels input, found {}",
                        other.describe()
                    )))
                }
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Draws a network with the default Gaussian(0, 0.05) weights and zero biases.
    pub fn random_init(&self, seed: u64) -> Result<Network> {
        self.random_init_with(seed, InitScheme::Gaussian005)
    }

    pub fn random_init_with(&self, seed: u64, scheme: InitScheme) -> Result<Network> {
        let shapes = self.propagate_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let in_shape = shapes[i];
            let layer = match spec {
                LayerSpec::Dense { units, activation } => {
                    let in_dim = match in_shape {
                        Shape::Flat(n) => n,
                        _ => unreachable!("validated by propagate_shapes"),
                    };
                    let weights = DMatrix::from_fn(*units, in_dim, |_, _| {
                        draw_weight(&mut rng, scheme, in_dim)
                    });
                    Layer::Dense(DenseLayer::new(weights, DVector::zeros(*units), *activation)?)
                }
                LayerSpec::Conv1d { out_channels, kernel, stride, pool, activation } => {
                    let in_channels = match in_shape {
                        Shape::Channels { channels, .. } => channels,
                        _ => unreachable!("validated by propagate_shapes"),
                    };
                    let fan_in = in_channels * kernel;
                    let filters = (0..in_channels)
                        .map(|_| {
                            (0..*out_channels)
                                .map(|_| DVector::from_fn(*kernel, |_, _| draw_weight(&mut rng, scheme, fan_in)))
                                .collect()
                        })
                        .collect();
                    Layer::Conv1d(Conv1dLayer::new(
                        filters,
                        ConvBias::zeros(*out_channels),
                        *stride,
                        *activation,
                        pool.to_pool()?,
                    )?)
                }
                LayerSpec::Flatten => Layer::Flatten,
            };
            layers.push(layer);
        }
        Network::new(layers, Shape::from(self.input_shape))
    }

    /// Architecture of an existing network (drops the parameter values).
    pub fn of(net: &Network) -> NetworkSpec {
        NetworkSpec {
            input_shape: ShapeSpec::from(net.input_shape),
            layers: net
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Dense(d) => LayerSpec::Dense { units: d.out_dim(), activation: d.activation },
                    Layer::Conv1d(c) => LayerSpec::Conv1d {
                        out_channels: c.out_channels(),
                        kernel: c.kernel_len(),
                        stride: c.stride,
                        pool: PoolSpecSpec::from_pool(c.pool),
                        activation: c.activation,
                    },
                    Layer::Flatten => LayerSpec::Flatten,
                })
                .collect(),
        }
    }
}

fn draw_weight(rng: &mut ChaCha8Rng, scheme: InitScheme, fan_in: usize) -> f64 {
    match scheme {
        InitScheme::Gaussian005 => {
            let normal = Normal::new(0.0, 0.05f64.sqrt()).unwrap();
            normal.sample(rng)
        }
        InitScheme::He => {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            // Truncate at two standard deviations by resampling.
            loop {
                let v = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    return v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_dense(n: usize) -> Layer {
        Layer::Dense(
            DenseLayer::new(DMatrix::identity(n, n), DVector::zeros(n), ActivationKind::Identity).unwrap(),
        )
    }

    #[test]
    fn single_identity_layer_trace() {
        let net = Network::new(vec![identity_dense(2)], Shape::Flat(2)).unwrap();
        let input = Value::Flat(DVector::from_vec(vec![1.0, 2.0]));
        let trace = net.forward(&input).unwrap();
        assert_eq!(trace.activations.len(), 2);
        assert_eq!(trace.activations[0], input);
        assert_eq!(trace.activations[1], input);
    }

    #[test]
    fn two_layer_trace_length_and_output() {
        let net = Network::new(vec![identity_dense(2), identity_dense(2)], Shape::Flat(2)).unwrap();
        let input = Value::Flat(DVector::from_vec(vec![0.5, -0.5]));
        let trace = net.forward(&input).unwrap();
        assert_eq!(trace.activations.len(), 3);
        assert_eq!(trace.output(), &net.predict(&input).unwrap());
    }

    #[test]
    fn softmax_must_be_last() {
        let softmax = Layer::Dense(
            DenseLayer::new(DMatrix::identity(2, 2), DVector::zeros(2), ActivationKind::Softmax).unwrap(),
        );
        assert!(Network::new(vec![softmax.clone(), identity_dense(2)], Shape::Flat(2)).is_err());
        assert!(Network::new(vec![identity_dense(2), softmax], Shape::Flat(2)).is_ok());
    }

    #[test]
    fn dense_after_conv_requires_flatten() {
        let conv = Layer::Conv1d(
            Conv1dLayer::new(
                vec![vec![DVector::from_vec(vec![1.0])]],
                ConvBias::zeros(1),
                1,
                ActivationKind::Identity,
                PoolSpec::none(),
            )
            .unwrap(),
        );
        let dense = identity_dense(4);
        let shape = Shape::Channels { channels: 1, length: 4 };
        assert!(Network::new(vec![conv.clone(), dense.clone()], shape).is_err());
        assert!(Network::new(vec![conv, Layer::Flatten, dense], shape).is_ok());
    }

    #[test]
    fn random_init_statistics() {
        // 100_000 weights: sample variance must sit near 0.05, biases at zero.
        let spec = NetworkSpec {
            input_shape: ShapeSpec::Flat { length: 400 },
            layers: vec![LayerSpec::Dense { units: 250, activation: ActivationKind::Identity }],
        };
        let net = spec.random_init(7).unwrap();
        let Layer::Dense(d) = &net.layers[0] else { panic!() };
        let n = d.weights.len() as f64;
        let mean = d.weights.iter().sum::<f64>() / n;
        let var = d.weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        assert!((0.045..=0.055).contains(&var), "sample variance {var}");
        assert!(d.bias.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn same_seed_same_network() {
        let spec = NetworkSpec {
            input_shape: ShapeSpec::Channels { channels: 2, length: 8 },
            layers: vec![
                LayerSpec::Conv1d {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    pool: PoolSpecSpec::Max { r: 2 },
                    activation: ActivationKind::Relu,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 4, activation: ActivationKind::Identity },
            ],
        };
        let a = spec.random_init(123).unwrap();
        let b = spec.random_init(123).unwrap();
        assert_eq!(a, b);
        let c = spec.random_init(124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn he_init_is_truncated() {
        let spec = NetworkSpec {
            input_shape: ShapeSpec::Flat { length: 50 },
            layers: vec![LayerSpec::Dense { units: 200, activation: ActivationKind::Relu }],
        };
        let net = spec.random_init_with(3, InitScheme::He).unwrap();
        let Layer::Dense(d) = &net.layers[0] else { panic!() };
        let bound = 2.0 * (2.0 / 50.0f64).sqrt();
        assert!(d.weights.iter().all(|w| w.abs() <= bound));
    }
}
