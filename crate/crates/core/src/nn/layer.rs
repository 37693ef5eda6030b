//! Layer kinds, shapes, and the convolution/pooling machinery.

use nalgebra::{DMatrix, DVector};

use super::ActivationKind;
use crate::error::{Error, Result};

/// Shape of a value flowing through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Channels { channels: usize, length: usize },
}

impl Shape {
    pub fn describe(&self) -> String {
        match self {
            Shape::Flat(n) => format!("flat[{n}]"),
            Shape::Channels { channels, length } => format!("channels[{channels}x{length}]"),
        }
    }
}

/// A value at a layer boundary: a flat vector or a set of per-channel vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Flat(DVector<f64>),
    Channels(Vec<DVector<f64>>),
}

impl Value {
    pub fn shape(&self) -> Shape {
        match self {
            Value::Flat(v) => Shape::Flat(v.len()),
            Value::Channels(ch) => Shape::Channels {
                channels: ch.len(),
                length: ch.first().map_or(0, |c| c.len()),
            },
        }
    }

    /// Channel-major flattening: output index = `m * length + position`.
    pub fn vectorize(&self) -> DVector<f64> {
        match self {
            Value::Flat(v) => v.clone(),
            Value::Channels(ch) => vectorize_channels(ch),
        }
    }

    pub fn as_flat(&self) -> Result<&DVector<f64>> {
        match self {
            Value::Flat(v) => Ok(v),
            Value::Channels(_) => Err(Error::shape("value", "flat", self.shape().describe())),
        }
    }

    pub fn as_channels(&self) -> Result<&[DVector<f64>]> {
        match self {
            Value::Channels(ch) => Ok(ch),
            Value::Flat(_) => Err(Error::shape("value", "channels", self.shape().describe())),
        }
    }
}

pub fn vectorize_channels(channels: &[DVector<f64>]) -> DVector<f64> {
    let total: usize = channels.iter().map(|c| c.len()).sum();
    let mut out = DVector::zeros(total);
    let mut at = 0;
    for c in channels {
        out.rows_mut(at, c.len()).copy_from(c);
        at += c.len();
    }
    out
}

/// Pads `x` with `floor(k/2)` zeros in front and `floor((k-1)/2)` behind,
/// so the result has length `len(x) + k - 1`.
pub fn zero_pad(x: &DVector<f64>, k: usize) -> DVector<f64> {
    assert!(k >= 1, "filter length must be at least 1");
    let front = k / 2;
    let back = (k - 1) / 2;
    let mut out = DVector::zeros(x.len() + front + back);
    out.rows_mut(front, x.len()).copy_from(x);
    out
}

/// `flip(zero_pad(x, k))`: the window source vector for the inner-product
/// form of the convolution.
pub(crate) fn flipped_padded(x: &DVector<f64>, k: usize) -> DVector<f64> {
    let padded = zero_pad(x, k);
    let n = padded.len();
    DVector::from_fn(n, |i, _| padded[n - 1 - i])
}

/// Output length of a stride-`s` convolution over `len` positions under the
/// padding above: `ceil(len / s)`.
pub fn conv_output_len(len: usize, stride: usize) -> usize {
    assert!(stride >= 1);
    len.div_ceil(stride)
}

/// Multi-channel 1-D convolution without bias, activation, or pooling.
///
/// `filters[m][n]` is the filter from input channel `m` to output channel `n`;
/// all filters share one length. Output channel `n`, position `j` is
/// `sum_m <u_m[L-1-j*s ..], h[m][n]>` with `u_m = flip(zero_pad(x_m, k))`.
pub fn conv1d_multi(
    filters: &[Vec<DVector<f64>>],
    stride: usize,
    input: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let m_in = filters.len();
    assert!(m_in >= 1 && input.len() == m_in, "channel count mismatch");
    let n_out = filters[0].len();
    let k = filters[0][0].len();
    let len = input[0].len();
    let out_len = conv_output_len(len, stride);

    let windows: Vec<DVector<f64>> = input.iter().map(|x| flipped_padded(x, k)).collect();

    let mut out = vec![DVector::zeros(out_len); n_out];
    for (m, per_in) in filters.iter().enumerate() {
        let u = &windows[m];
        for (n, h) in per_in.iter().enumerate() {
            for j in 0..out_len {
                let start = len - 1 - j * stride;
                let mut acc = 0.0;
                for t in 0..k {
                    acc += u[start + t] * h[t];
                }
                out[n][j] += acc;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    None,
    Max,
}

/// Non-overlapping max-pool; window size equals the stride and a partial
/// trailing window takes the max of the remaining elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub stride: usize,
}

impl PoolSpec {
    pub fn none() -> Self {
        PoolSpec { kind: PoolKind::None, stride: 1 }
    }

    pub fn max(stride: usize) -> Result<Self> {
        if stride < 1 {
            return Err(Error::Config("max-pool stride must be positive".into()));
        }
        Ok(PoolSpec { kind: PoolKind::Max, stride })
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PoolKind::None if self.stride != 1 => {
                Err(Error::Config("pool kind 'none' requires stride 1".into()))
            }
            _ if self.stride < 1 => Err(Error::Config("pool stride must be positive".into())),
            _ => Ok(()),
        }
    }

    pub fn output_len(&self, len: usize) -> usize {
        match self.kind {
            PoolKind::None => len,
            PoolKind::Max => len.div_ceil(self.stride),
        }
    }

    /// Returns the pooled vector and, for max-pooling, the source index of
    /// each output (first maximal element of the window).
    pub fn forward(&self, v: &DVector<f64>) -> (DVector<f64>, Option<Vec<usize>>) {
        match self.kind {
            PoolKind::None => (v.clone(), None),
            PoolKind::Max => {
                let out_len = self.output_len(v.len());
                let mut out = DVector::zeros(out_len);
                let mut arg = vec![0usize; out_len];
                for j in 0..out_len {
                    let lo = j * self.stride;
                    let hi = ((j + 1) * self.stride).min(v.len());
                    let mut best = lo;
                    for i in lo + 1..hi {
                        if v[i] > v[best] {
                            best = i;
                        }
                    }
                    out[j] = v[best];
                    arg[j] = best;
                }
                (out, Some(arg))
            }
        }
    }
}

/// Fully-connected layer `f(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: ActivationKind,
}

impl DenseLayer {
    pub fn new(weights: DMatrix<f64>, bias: DVector<f64>, activation: ActivationKind) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::shape(
                "dense layer",
                format!("bias length {}", weights.nrows()),
                format!("{}", bias.len()),
            ));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("dense layer parameters must be finite".into()));
        }
        Ok(DenseLayer { weights, bias, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn preactivation(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("dense input", format!("{}", self.in_dim()), format!("{}", x.len())));
        }
        Ok(&self.weights * x + &self.bias)
    }
}

/// Per-output-channel convolution bias.
///
/// Ordinary layers use one scalar per channel, broadcast along the length.
/// Fused layers carry a full per-position vector because the MMSE bias varies
/// near the padded boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvBias {
    PerChannel(DVector<f64>),
    PerPosition(Vec<DVector<f64>>),
}

impl ConvBias {
    pub fn zeros(n_out: usize) -> Self {
        ConvBias::PerChannel(DVector::zeros(n_out))
    }

    pub fn channels(&self) -> usize {
        match self {
            ConvBias::PerChannel(v) => v.len(),
            ConvBias::PerPosition(v) => v.len(),
        }
    }

    pub(crate) fn add_to(&self, n: usize, pre: &mut DVector<f64>) -> Result<()> {
        match self {
            ConvBias::PerChannel(v) => {
                pre.add_scalar_mut(v[n]);
                Ok(())
            }
            ConvBias::PerPosition(v) => {
                if v[n].len() != pre.len() {
                    return Err(Error::shape(
                        "conv per-position bias",
                        format!("{}", pre.len()),
                        format!("{}", v[n].len()),
                    ));
                }
                *pre += &v[n];
                Ok(())
            }
        }
    }
}

/// Strided 1-D convolutional layer with activation and optional max-pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dLayer {
    /// `filters[m][n]`: input channel `m`, output channel `n`.
    pub filters: Vec<Vec<DVector<f64>>>,
    pub bias: ConvBias,
    pub stride: usize,
    pub activation: ActivationKind,
    pub pool: PoolSpec,
}

pub(crate) struct ConvForward {
    pub pre: Vec<DVector<f64>>,
    pub post: Vec<DVector<f64>>,
}

impl Conv1dLayer {
    pub fn new(
        filters: Vec<Vec<DVector<f64>>>,
        bias: ConvBias,
        stride: usize,
        activation: ActivationKind,
        pool: PoolSpec,
    ) -> Result<Self> {
        if filters.is_empty() || filters[0].is_empty() {
            return Err(Error::Config("conv layer needs at least one filter".into()));
        }
        let n_out = filters[0].len();
        let k = filters[0][0].len();
        if k < 1 {
            return Err(Error::Config("filter length must be at least 1".into()));
        }
        for per_in in &filters {
            if per_in.len() != n_out {
                return Err(Error::Config("ragged filter bank: unequal output channel counts".into()));
            }
            for h in per_in {
                if h.len() != k {
                    return Err(Error::Config("all filters must share one length".into()));
                }
                if h.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("conv filters must be finite".into()));
                }
            }
        }
        if bias.channels() != n_out {
            return Err(Error::shape(
                "conv bias",
                format!("{n_out} channels"),
                format!("{}", bias.channels()),
            ));
        }
        if stride < 1 {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        pool.validate()?;
        Ok(Conv1dLayer { filters, bias, stride, activation, pool })
    }

    pub fn in_channels(&self) -> usize {
        self.filters.len()
    }

    pub fn out_channels(&self) -> usize {
        self.filters[0].len()
    }

    pub fn kernel_len(&self) -> usize {
        self.filters[0][0].len()
    }

    /// Convolution plus bias, before activation and pooling.
    pub fn preactivation(&self, input: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if input.len() != self.in_channels() {
            return Err(Error::shape(
                "conv input",
                format!("{} channels", self.in_channels()),
                format!("{}", input.len()),
            ));
        }
        let mut pre = conv1d_multi(&self.filters, self.stride, input);
        for (n, p) in pre.iter_mut().enumerate() {
            self.bias.add_to(n, p)?;
        }
        Ok(pre)
    }

    pub(crate) fn forward_full(&self, input: &[DVector<f64>]) -> Result<ConvForward> {
        let pre = self.preactivation(input)?;
        let mut post = Vec::with_capacity(pre.len());
        for p in &pre {
            let activated = self.activation.apply(p);
            let (pooled, _) = self.pool.forward(&activated);
            post.push(pooled);
        }
        Ok(ConvForward { pre, post })
    }
}

/// One network layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv1d(Conv1dLayer),
    /// Channel-major reshape from `channels[M x L]` to `flat[M*L]`.
    Flatten,
}

impl Layer {
    pub fn activation(&self) -> Option<ActivationKind> {
        match self {
            Layer::Dense(l) => Some(l.activation),
            Layer::Conv1d(l) => Some(l.activation),
            Layer::Flatten => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv1d(_) => "conv1d",
            Layer::Flatten => "flatten",
        }
    }

    pub fn out_shape(&self, input: Shape) -> Result<Shape> {
        match (self, input) {
            (Layer::Dense(l), Shape::Flat(n)) => {
                if n != l.in_dim() {
                    return Err(Error::shape("dense layer input", format!("flat[{}]", l.in_dim()), input.describe()));
                }
                Ok(Shape::Flat(l.out_dim()))
            }
            (Layer::Dense(_), other) => {
                Err(Error::shape("dense layer input", "flat (insert a flatten layer)", other.describe()))
            }
            (Layer::Conv1d(l), Shape::Channels { channels, length }) => {
                if channels != l.in_channels() {
                    return Err(Error::shape(
                        "conv layer input",
                        format!("{} channels", l.in_channels()),
                        input.describe(),
                    ));
                }
                let conv_len = conv_output_len(length, l.stride);
                Ok(Shape::Channels { channels: l.out_channels(), length: l.pool.output_len(conv_len) })
            }
            (Layer::Conv1d(_), other) => Err(Error::shape("conv layer input", "channels", other.describe())),
            (Layer::Flatten, Shape::Channels { channels, length }) => Ok(Shape::Flat(channels * length)),
            (Layer::Flatten, other) => Err(Error::shape("flatten input", "channels", other.describe())),
        }
    }

    /// Affine part of the layer: `W x + b` or convolution-plus-bias, before
    /// activation and pooling. Flatten passes the reshaped value through.
    pub fn preactivation(&self, input: &Value) -> Result<Value> {
        match self {
            Layer::Dense(l) => Ok(Value::Flat(l.preactivation(input.as_flat()?)?)),
            Layer::Conv1d(l) => Ok(Value::Channels(l.preactivation(input.as_channels()?)?)),
            Layer::Flatten => Ok(Value::Flat(input.vectorize())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vec64(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn zero_pad_examples() {
        assert_eq!(zero_pad(&vec64(&[1.0, 2.0, 3.0]), 3).as_slice(), &[0.0, 1.0, 2.0, 3.0, 0.0]);
        assert_eq!(zero_pad(&vec64(&[5.0]), 1).as_slice(), &[5.0]);
        assert_eq!(zero_pad(&vec64(&[1.0, 2.0]), 4).as_slice(), &[0.0, 0.0, 1.0, 2.0, 0.0]);
    }

    /// Direct convolution reference: `out[j] = sum_t h[t] * padded[j*s + k - 1 - t]`.
    fn direct_conv(x: &DVector<f64>, h: &DVector<f64>, stride: usize) -> DVector<f64> {
        let k = h.len();
        let padded = zero_pad(x, k);
        let out_len = conv_output_len(x.len(), stride);
        DVector::from_fn(out_len, |j, _| {
            (0..k).map(|t| h[t] * padded[j * stride + k - 1 - t]).sum()
        })
    }

    #[test]
    fn delta_filter_is_identity() {
        let x = vec64(&[3.0, -1.0, 4.0]);
        let out = conv1d_multi(&[vec![vec64(&[1.0])]], 1, &[x.clone()]);
        assert_eq!(out[0], x);
    }

    #[test]
    fn conv_matches_direct_reference_on_named_example() {
        let x = vec64(&[1.0, 2.0, 3.0]);
        let h = vec64(&[1.0, 0.0, 0.0]);
        let got = conv1d_multi(&[vec![h.clone()]], 1, &[x.clone()]);
        let want = direct_conv(&x, &h, 1);
        assert_relative_eq!((got[0].clone() - want).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn strided_output_length() {
        let x = vec64(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let out = conv1d_multi(&[vec![vec64(&[1.0])]], 2, &[x]);
        assert_eq!(out[0].len(), 3);
    }

    /// Exhaustive flip-window vs direct-definition equivalence, k <= 5, L <= 10.
    #[test]
    fn flip_window_equals_direct_convolution() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for k in 1..=5usize {
            for len in 1..=10usize {
                for stride in 1..=3usize {
                    let x = DVector::from_fn(len, |_, _| next());
                    let h = DVector::from_fn(k, |_, _| next());
                    let got = conv1d_multi(&[vec![h.clone()]], stride, &[x.clone()]);
                    let want = direct_conv(&x, &h, stride);
                    assert_relative_eq!((got[0].clone() - want).norm(), 0.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn multi_channel_conv_sums_contributions() {
        let x0 = vec64(&[1.0, 0.0]);
        let x1 = vec64(&[0.0, 1.0]);
        let filters = vec![
            vec![vec64(&[2.0])], // channel 0 -> out 0
            vec![vec64(&[3.0])], // channel 1 -> out 0
        ];
        let out = conv1d_multi(&filters, 1, &[x0, x1]);
        assert_eq!(out[0].as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn max_pool_partial_window_and_ties() {
        let pool = PoolSpec::max(2).unwrap();
        let (out, arg) = pool.forward(&vec64(&[1.0, 1.0, 5.0, 2.0, 3.0]));
        assert_eq!(out.as_slice(), &[1.0, 5.0, 3.0]);
        // Tie in the first window routes to the first maximal index.
        assert_eq!(arg.unwrap(), vec![0, 2, 4]);
    }

    #[test]
    fn dense_relu_clips() {
        let layer = DenseLayer::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            vec64(&[-3.0]),
            ActivationKind::Relu,
        )
        .unwrap();
        let pre = layer.preactivation(&vec64(&[1.0, 1.0])).unwrap();
        assert_eq!(ActivationKind::Relu.apply(&pre).as_slice(), &[0.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let layer = Layer::Dense(
            DenseLayer::new(DMatrix::identity(2, 2), DVector::zeros(2), ActivationKind::Identity).unwrap(),
        );
        assert!(layer.out_shape(Shape::Flat(3)).is_err());
        assert!(layer.out_shape(Shape::Channels { channels: 1, length: 2 }).is_err());
    }

    #[test]
    fn vectorize_is_channel_major() {
        let v = Value::Channels(vec![vec64(&[1.0, 2.0]), vec64(&[3.0, 4.0])]);
        assert_eq!(v.vectorize().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    proptest! {
        #[test]
        fn padding_length_law(len in 1usize..=32, k in 1usize..=9) {
            let x = DVector::from_element(len, 1.0);
            prop_assert_eq!(zero_pad(&x, k).len(), len + k - 1);
        }

        #[test]
        fn conv_length_law(len in 1usize..=32, stride in 1usize..=4, k in 1usize..=5) {
            let x = DVector::from_element(len, 1.0);
            let h = DVector::from_element(k, 1.0);
            let out = conv1d_multi(&[vec![h]], stride, &[x]);
            prop_assert_eq!(out[0].len(), len.div_ceil(stride));
        }

        #[test]
        fn pooled_length_law(len in 1usize..=32, r in 1usize..=4) {
            let pool = PoolSpec::max(r).unwrap();
            let (out, _) = pool.forward(&DVector::from_element(len, 0.0));
            prop_assert_eq!(out.len(), len.div_ceil(r));
        }
    }
}
