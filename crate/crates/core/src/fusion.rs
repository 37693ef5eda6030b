//! Closed-form MMSE layer fusion and layer-pair ranking.
//!
//! Dense-dense and conv-dense pairs collapse to one dense layer: the fused
//! weights solve `W~ C_a0 = W2 C_a1a0` and the bias re-centers the means.
//! Conv-conv pairs collapse per channel pair through the windowed normal
//! equations `U^m h~ = z^{m,p}`, with a stride of `s1 * r1 * s2` and a
//! position-dependent bias vector. All fusion MSE is measured between
//! pre-activation signals; the second layer's activation (and pooling) is
//! kept on the fused layer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::moments::{
    boundary_samples, conv_boundary_samples, empirical_cmse, empirical_mse,
    estimate_conv_moments_from_samples, estimate_dense_moments, Boundary, ConvMomentSet, MomentSet,
};
use crate::nn::{
    conv1d_multi, Conv1dLayer, ConvBias, DenseLayer, Layer, LayerSpec, Network, NetworkSpec,
    PoolKind, Shape, Value,
};

/// Result of fusing into a dense layer.
#[derive(Debug, Clone)]
pub struct DenseFusionResult {
    pub w_tilde: DMatrix<f64>,
    pub b_tilde: DVector<f64>,
    /// Closed-form fusion MSE (trace form), clamped at zero.
    pub predicted_mse: f64,
    pub ridge_used: f64,
    pub condition_estimate: f64,
}

/// Solves the fused dense layer from boundary moments and the second layer's
/// parameters. Applies unchanged to conv-dense pairs: the boundary signals
/// are vectorized channel-major, and nothing restricts the first layer.
pub fn fuse_dense(
    moments: &MomentSet,
    w2: &DMatrix<f64>,
    b2: &DVector<f64>,
) -> Result<DenseFusionResult> {
    let l0 = moments.mean_a0.len();
    let l1 = moments.mean_a1.len();
    if w2.ncols() != l1 {
        return Err(Error::shape("fuse_dense W2", format!("{l1} columns"), format!("{}", w2.ncols())));
    }
    if b2.len() != w2.nrows() {
        return Err(Error::shape("fuse_dense b2", format!("{}", w2.nrows()), format!("{}", b2.len())));
    }
    if moments.c_a1a0.nrows() != l1 || moments.c_a1a0.ncols() != l0 {
        return Err(Error::shape(
            "fuse_dense cross-covariance",
            format!("{l1}x{l0}"),
            format!("{}x{}", moments.c_a1a0.nrows(), moments.c_a1a0.ncols()),
        ));
    }

    // W~^T = C_a0^{-1} C_a1a0^T W2^T (C_a0 is symmetric).
    let rhs = moments.c_a1a0.transpose() * w2.transpose();
    let sol = solve_spd(&moments.c_a0, &rhs, "dense fusion")?;
    let w_tilde = sol.x.transpose();
    let b_tilde = w2 * &moments.mean_a1 + b2 - &w_tilde * &moments.mean_a0;

    let predicted_mse = predict_mse(moments, w2)?;

    Ok(DenseFusionResult {
        w_tilde,
        b_tilde,
        predicted_mse,
        ridge_used: sol.ridge_used,
        condition_estimate: sol.condition_estimate,
    })
}

/// Closed-form fusion MSE of the optimal fused dense layer:
/// `trace(W2 (C_a1 - C_a1a0 C_a0^{-1} C_a0a1) W2^T)`, clamped at zero.
pub fn predict_mse(moments: &MomentSet, w2: &DMatrix<f64>) -> Result<f64> {
    if w2.ncols() != moments.mean_a1.len() {
        return Err(Error::shape(
            "predict_mse W2",
            format!("{} columns", moments.mean_a1.len()),
            format!("{}", w2.ncols()),
        ));
    }
    // Y = C_a0^{-1} C_a0a1, so the explained part is C_a1a0 * Y.
    let sol = solve_spd(&moments.c_a0, &moments.c_a1a0.transpose(), "fusion mse prediction")?;
    let gap = &moments.c_a1 - &moments.c_a1a0 * sol.x;
    let value = (w2 * gap * w2.transpose()).trace();
    if value < 0.0 {
        let scale = (w2 * &moments.c_a1 * w2.transpose()).trace().max(1.0);
        if value < -1e-10 * scale {
            log::warn!("predicted fusion MSE {value:.3e} clamped to zero");
        }
        return Ok(0.0);
    }
    Ok(value)
}

/// Fused conv filters and bias from the windowed accumulators (no MSE
/// evaluation): `h~^{m,p} = (U^m)^{-1} z^{m,p}` and the bias vector that
/// re-centers the channel means under each term's own stride and padding.
#[derive(Debug, Clone)]
pub struct ConvFilterSolve {
    /// `h_tilde[m][p]`, each of length `ktilde`.
    pub h_tilde: Vec<Vec<DVector<f64>>>,
    /// Per output channel, one bias value per output position.
    pub b_tilde: Vec<DVector<f64>>,
    pub ridge_used: Vec<f64>,
    pub condition_estimates: Vec<f64>,
}

pub fn fuse_conv_filters(cm: &ConvMomentSet, second: &Conv1dLayer) -> Result<ConvFilterSolve> {
    let m_in = cm.in_channels();
    let p_out = cm.out_channels();
    if second.out_channels() != p_out {
        return Err(Error::shape(
            "fuse_conv second layer",
            format!("{p_out} output channels"),
            format!("{}", second.out_channels()),
        ));
    }

    let mut h_tilde = vec![Vec::with_capacity(p_out); m_in];
    let mut ridge_used = Vec::with_capacity(m_in);
    let mut condition_estimates = Vec::with_capacity(m_in);
    for m in 0..m_in {
        let mut rhs = DMatrix::zeros(cm.ktilde, p_out);
        for p in 0..p_out {
            rhs.set_column(p, &cm.z[m][p]);
        }
        let sol = solve_spd(&cm.u[m], &rhs, &format!("conv fusion, input channel {m}"))?;
        for p in 0..p_out {
            h_tilde[m].push(sol.x.column(p).into_owned());
        }
        ridge_used.push(sol.ridge_used);
        condition_estimates.push(sol.condition_estimate);
    }

    // b~^p = sum_n h2^{n,p} * mean_a1^n + b2^p - sum_m h~^{m,p} * mean_a0^m,
    // each convolution under its own layer's stride and padding.
    let mut b_tilde = conv1d_multi(&second.filters, second.stride, &cm.mean_a1);
    for (p, b) in b_tilde.iter_mut().enumerate() {
        second.bias.add_to(p, b)?;
    }
    let fused_mean = conv1d_multi(&h_tilde, cm.stilde, &cm.mean_a0);
    for (b, f) in b_tilde.iter_mut().zip(&fused_mean) {
        if b.len() != f.len() {
            return Err(Error::shape("fused bias", format!("{}", b.len()), format!("{}", f.len())));
        }
        *b -= f;
    }

    Ok(ConvFilterSolve { h_tilde, b_tilde, ridge_used, condition_estimates })
}

/// Result of fusing two convolutional layers.
#[derive(Debug, Clone)]
pub struct ConvFusionResult {
    pub h_tilde: Vec<Vec<DVector<f64>>>,
    pub b_tilde: Vec<DVector<f64>>,
    pub ktilde: usize,
    pub stilde: usize,
    /// Fusion MSE per output channel, measured on the moment sample set.
    pub per_channel_cmse: DVector<f64>,
    /// Largest absolute cross-channel input correlation (the per-channel
    /// solution is jointly optimal only when channels are uncorrelated).
    pub assumption_diagnostic: f64,
    pub ridge_used: Vec<f64>,
    pub condition_estimates: Vec<f64>,
}

/// Solves the fused conv layer and evaluates its per-channel MSE on the same
/// samples the moments were estimated from. `a0_samples` / `a1_samples` are
/// the per-sample channel signals at the boundary.
pub fn fuse_conv(
    cm: &ConvMomentSet,
    second: &Conv1dLayer,
    a0_samples: &[Vec<DVector<f64>>],
    a1_samples: &[Vec<DVector<f64>>],
) -> Result<ConvFusionResult> {
    let solve = fuse_conv_filters(cm, second)?;
    let mut pairs = Vec::with_capacity(a0_samples.len());
    for (a0, a1) in a0_samples.iter().zip(a1_samples) {
        let mut fused = conv1d_multi(&solve.h_tilde, cm.stilde, a0);
        for (f, b) in fused.iter_mut().zip(&solve.b_tilde) {
            *f += b;
        }
        let mut original = conv1d_multi(&second.filters, second.stride, a1);
        for (p, o) in original.iter_mut().enumerate() {
            second.bias.add_to(p, o)?;
        }
        pairs.push((fused, original));
    }
    let per_channel_cmse = empirical_cmse(&pairs)?;
    Ok(ConvFusionResult {
        h_tilde: solve.h_tilde,
        b_tilde: solve.b_tilde,
        ktilde: cm.ktilde,
        stilde: cm.stilde,
        per_channel_cmse,
        assumption_diagnostic: cm.channel_crosscorr_diag,
        ridge_used: solve.ridge_used,
        condition_estimates: solve.condition_estimates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    DenseDense,
    ConvDense,
    ConvConv,
}

/// A fusable pair of neighboring parameterized layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusePair {
    pub boundary: Boundary,
    pub kind: PairKind,
}

/// Enumerates fusable pairs: neighboring dense/conv layers (one flatten
/// allowed between a conv and a dense layer), excluding softmax layers.
pub fn fusable_pairs(net: &Network) -> Vec<FusePair> {
    let mut pairs = Vec::new();
    let param_layers: Vec<usize> = net
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Layer::Flatten))
        .map(|(i, _)| i)
        .collect();
    for pair in param_layers.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let first = &net.layers[a];
        let second = &net.layers[b];
        let softmax = |l: &Layer| l.activation().is_some_and(|f| f.is_softmax());
        if softmax(first) || softmax(second) {
            continue;
        }
        let kind = match (first, second) {
            (Layer::Dense(_), Layer::Dense(_)) => PairKind::DenseDense,
            (Layer::Conv1d(_), Layer::Dense(_)) => PairKind::ConvDense,
            (Layer::Conv1d(_), Layer::Conv1d(_)) if b == a + 1 => PairKind::ConvConv,
            _ => continue,
        };
        pairs.push(FusePair { boundary: Boundary::new(a, b), kind });
    }
    pairs
}

/// The layer's affine pre-activation map over vectorized inputs, recovered by
/// probing with basis inputs. Works for any layer whose pre-activation is
/// affine (all of them).
pub fn dense_equivalent(layer: &Layer, in_shape: Shape) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let make_value = |flat: &DVector<f64>| -> Value {
        match in_shape {
            Shape::Flat(_) => Value::Flat(flat.clone()),
            Shape::Channels { channels, length } => Value::Channels(
                (0..channels)
                    .map(|m| DVector::from_fn(length, |l, _| flat[m * length + l]))
                    .collect(),
            ),
        }
    };
    let dim = match in_shape {
        Shape::Flat(n) => n,
        Shape::Channels { channels, length } => channels * length,
    };
    let zero = DVector::zeros(dim);
    let bias = layer.preactivation(&make_value(&zero))?.vectorize();
    let mut w = DMatrix::zeros(bias.len(), dim);
    for j in 0..dim {
        let mut e = zero.clone();
        e[j] = 1.0;
        let col = layer.preactivation(&make_value(&e))?.vectorize() - &bias;
        w.set_column(j, &col);
    }
    Ok((w, bias))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankEntry {
    pub boundary: Boundary,
    pub kind: PairKind,
    pub predicted_mse: f64,
    /// `predicted_mse / trace(W2 C_a1 W2^T)`; comparable across pair widths.
    pub normalized_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionRanking {
    /// Ascending by predicted MSE; ties break on the smaller first index.
    pub entries: Vec<RankEntry>,
}

/// Ranks candidate pairs by the closed-form fusion MSE. Convolutional second
/// layers enter through their dense-equivalent map over vectorized signals,
/// so for conv-conv pairs this scores the unconstrained (dense) fusion — a
/// lower bound on the constrained conv fusion MSE.
pub fn rank_pairs(net: &Network, inputs: &[Value], candidates: &[FusePair]) -> Result<FusionRanking> {
    if candidates.is_empty() {
        return Err(Error::NoFusablePair);
    }
    let shapes = net.boundary_shapes()?;
    let mut entries = Vec::with_capacity(candidates.len());
    for pair in candidates {
        let moments = estimate_dense_moments(net, pair.boundary, inputs)?;
        let (w2, _) = match &net.layers[pair.boundary.second] {
            Layer::Dense(d) => (d.weights.clone(), ()),
            layer => (dense_equivalent(layer, shapes[pair.boundary.second])?.0, ()),
        };
        let predicted_mse = predict_mse(&moments, &w2)?;
        let denom = (&w2 * &moments.c_a1 * w2.transpose()).trace();
        let normalized_mse = if denom > 0.0 { predicted_mse / denom } else { 0.0 };
        entries.push(RankEntry { boundary: pair.boundary, kind: pair.kind, predicted_mse, normalized_mse });
    }
    entries.sort_by(|a, b| {
        a.predicted_mse
            .total_cmp(&b.predicted_mse)
            .then(a.boundary.first.cmp(&b.boundary.first))
    });
    Ok(FusionRanking { entries })
}

/// Knobs for network-level fusion.
#[derive(Debug, Clone, Default)]
pub struct FuseOptions {
    /// Fused conv filter length; defaults to the effective receptive field
    /// `k1 + (k2 - 1) * s1 * r1`.
    pub ktilde: Option<usize>,
    /// Cap on the number of samples used for moment estimation (takes the
    /// first n).
    pub moment_samples: Option<usize>,
}

/// Diagnostics of one applied fusion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FuseReport {
    pub boundary: Boundary,
    pub kind: PairKind,
    /// Index of the fused layer in the new network.
    pub fused_layer_index: usize,
    /// Closed-form MSE for dense fusion; sum of per-channel MSE for conv.
    pub predicted_mse: f64,
    /// Fusion MSE measured on the moment samples.
    pub empirical_mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_channel_cmse: Option<Vec<f64>>,
    pub ridge_used: f64,
    pub condition_estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assumption_diagnostic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ktilde: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stilde: Option<usize>,
    pub moment_samples: usize,
}

/// Fuses the pair starting at layer `first` (the partner is the next
/// parameterized layer), returning the new network and diagnostics.
pub fn fuse_at(
    net: &Network,
    first: usize,
    inputs: &[Value],
    opts: &FuseOptions,
) -> Result<(Network, FuseReport)> {
    let pair = fusable_pairs(net)
        .into_iter()
        .find(|p| p.boundary.first == first)
        .ok_or_else(|| Error::Config(format!("no fusable pair starts at layer {first}")))?;
    fuse_boundary(net, pair.boundary, inputs, opts)
}

/// Fuses an explicit boundary. `boundary.second` may lie further than the
/// adjacent pair for the dense path: everything in between becomes part of
/// the fused map.
pub fn fuse_boundary(
    net: &Network,
    boundary: Boundary,
    inputs: &[Value],
    opts: &FuseOptions,
) -> Result<(Network, FuseReport)> {
    boundary.validate(net)?;
    for layer in &net.layers[boundary.first..=boundary.second] {
        if layer.activation().is_some_and(|f| f.is_softmax()) {
            return Err(Error::Config("softmax layers cannot be fused".into()));
        }
    }
    let moment_inputs: &[Value] = match opts.moment_samples {
        Some(n) if n < inputs.len() => &inputs[..n],
        _ => inputs,
    };
    if moment_inputs.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: moment_inputs.len() });
    }

    match &net.layers[boundary.second] {
        Layer::Dense(second) => fuse_into_dense(net, boundary, second.clone(), moment_inputs),
        Layer::Conv1d(second) => {
            if boundary.second != boundary.first + 1 {
                return Err(Error::Config(
                    "conv-conv fusion spans exactly two adjacent layers".into(),
                ));
            }
            let Layer::Conv1d(first_layer) = &net.layers[boundary.first] else {
                return Err(Error::Config("a dense-to-conv pair is not fusable".into()));
            };
            fuse_into_conv(net, boundary, first_layer, second.clone(), moment_inputs, opts)
        }
        Layer::Flatten => Err(Error::Config("cannot fuse into a flatten layer".into())),
    }
}

fn fuse_into_dense(
    net: &Network,
    boundary: Boundary,
    second: DenseLayer,
    inputs: &[Value],
) -> Result<(Network, FuseReport)> {
    let (a0, a1) = boundary_samples(net, boundary, inputs)?;
    let moments = MomentSet::from_samples(&a0, &a1)?;
    let result = fuse_dense(&moments, &second.weights, &second.bias)?;

    let pairs: Vec<(DVector<f64>, DVector<f64>)> = a0
        .iter()
        .zip(&a1)
        .map(|(x0, x1)| {
            (&result.w_tilde * x0 + &result.b_tilde, &second.weights * x1 + &second.bias)
        })
        .collect();
    let empirical = empirical_mse(&pairs)?;

    let fused = DenseLayer::new(result.w_tilde.clone(), result.b_tilde.clone(), second.activation)?;
    let shapes = net.boundary_shapes()?;
    let needs_flatten = matches!(shapes[boundary.first], Shape::Channels { .. });

    let mut layers: Vec<Layer> = net.layers[..boundary.first].to_vec();
    if needs_flatten {
        layers.push(Layer::Flatten);
    }
    let fused_layer_index = layers.len();
    layers.push(Layer::Dense(fused));
    layers.extend_from_slice(&net.layers[boundary.second + 1..]);
    let fused_net = Network::new(layers, net.input_shape)?;

    let report = FuseReport {
        boundary,
        kind: if needs_flatten { PairKind::ConvDense } else { PairKind::DenseDense },
        fused_layer_index,
        predicted_mse: result.predicted_mse,
        empirical_mse: empirical,
        per_channel_cmse: None,
        ridge_used: result.ridge_used,
        // Capped so the report stays representable in JSON.
        condition_estimate: result.condition_estimate.min(f64::MAX),
        assumption_diagnostic: None,
        ktilde: None,
        stilde: None,
        moment_samples: inputs.len(),
    };
    Ok((fused_net, report))
}

/// Default fused filter length: the receptive field of the composed layers.
pub fn default_ktilde(first: &Conv1dLayer, second: &Conv1dLayer) -> usize {
    let r1 = pool_stride(first);
    first.kernel_len() + (second.kernel_len() - 1) * first.stride * r1
}

/// Fused stride: total subsampling of the pair.
pub fn composed_stride(first: &Conv1dLayer, second: &Conv1dLayer) -> usize {
    first.stride * pool_stride(first) * second.stride
}

fn pool_stride(layer: &Conv1dLayer) -> usize {
    match layer.pool.kind {
        PoolKind::None => 1,
        PoolKind::Max => layer.pool.stride,
    }
}

fn fuse_into_conv(
    net: &Network,
    boundary: Boundary,
    first: &Conv1dLayer,
    second: Conv1dLayer,
    inputs: &[Value],
    opts: &FuseOptions,
) -> Result<(Network, FuseReport)> {
    let ktilde = opts.ktilde.unwrap_or_else(|| default_ktilde(first, &second));
    let stilde = composed_stride(first, &second);
    let (a0_samples, a1_samples) = conv_boundary_samples(net, boundary, inputs)?;
    let cm = estimate_conv_moments_from_samples(&a0_samples, &a1_samples, &second, ktilde, stilde)?;
    let result = fuse_conv(&cm, &second, &a0_samples, &a1_samples)?;

    let fused = Conv1dLayer::new(
        result.h_tilde.clone(),
        ConvBias::PerPosition(result.b_tilde.clone()),
        stilde,
        second.activation,
        second.pool,
    )?;
    let mut layers: Vec<Layer> = net.layers[..boundary.first].to_vec();
    let fused_layer_index = layers.len();
    layers.push(Layer::Conv1d(fused));
    layers.extend_from_slice(&net.layers[boundary.second + 1..]);
    let fused_net = Network::new(layers, net.input_shape)?;

    let total: f64 = result.per_channel_cmse.iter().sum();
    let report = FuseReport {
        boundary,
        kind: PairKind::ConvConv,
        fused_layer_index,
        predicted_mse: total,
        empirical_mse: total,
        per_channel_cmse: Some(result.per_channel_cmse.iter().cloned().collect()),
        ridge_used: result.ridge_used.iter().cloned().fold(0.0, f64::max),
        condition_estimate: result.condition_estimates.iter().cloned().fold(0.0, f64::max).min(f64::MAX),
        assumption_diagnostic: Some(result.assumption_diagnostic),
        ktilde: Some(ktilde),
        stilde: Some(stilde),
        moment_samples: inputs.len(),
    };
    Ok((fused_net, report))
}

/// Applies a fusion plan sequentially; each boundary index refers to the
/// network as it stands at that step, and moments are re-estimated on the
/// current network after every fusion.
pub fn fuse_plan(
    net: &Network,
    plan: &[usize],
    inputs: &[Value],
    opts: &FuseOptions,
) -> Result<(Network, Vec<FuseReport>)> {
    let mut current = net.clone();
    let mut reports = Vec::with_capacity(plan.len());
    for &first in plan {
        let (next, report) = fuse_at(&current, first, inputs, opts)?;
        current = next;
        reports.push(report);
    }
    Ok((current, reports))
}

/// Pre-activation MSE between the original pair and its fused replacement,
/// evaluated over a sample set (vectorized, summed over channels).
pub fn empirical_fusion_mse(
    original: &Network,
    orig_boundary: Boundary,
    fused: &Network,
    fused_layer: usize,
    inputs: &[Value],
) -> Result<f64> {
    orig_boundary.validate(original)?;
    if fused_layer >= fused.layers.len() {
        return Err(Error::Config(format!("fused layer index {fused_layer} out of range")));
    }
    let mut pairs = Vec::with_capacity(inputs.len());
    for input in inputs {
        let orig_trace = original.forward(input)?;
        let fused_trace = fused.forward(input)?;
        let orig_pre = orig_trace.preactivations[orig_boundary.second]
            .as_ref()
            .ok_or_else(|| Error::Config("boundary layer has no pre-activation".into()))?
            .vectorize();
        let fused_pre = fused_trace.preactivations[fused_layer]
            .as_ref()
            .ok_or_else(|| Error::Config("fused layer has no pre-activation".into()))?
            .vectorize();
        pairs.push((fused_pre, orig_pre));
    }
    empirical_mse(&pairs)
}

/// Structurally applies a fusion plan to an architecture description: each
/// fused pair is replaced by the layer shape real fusion would produce. Used
/// to validate plans before training and to build the matched random-init
/// baseline.
pub fn fused_spec(spec: &NetworkSpec, plan: &[usize]) -> Result<NetworkSpec> {
    let mut current = spec.clone();
    for &first in plan {
        current = fuse_spec_once(&current, first)?;
    }
    Ok(current)
}

fn fuse_spec_once(spec: &NetworkSpec, first: usize) -> Result<NetworkSpec> {
    spec.propagate_shapes()?;
    if first >= spec.layers.len() {
        return Err(Error::Config(format!("fusion plan boundary {first} out of range")));
    }
    let mut second = first + 1;
    while second < spec.layers.len() && matches!(spec.layers[second], LayerSpec::Flatten) {
        second += 1;
    }
    if second >= spec.layers.len() || second > first + 2 {
        return Err(Error::Config(format!("no fusable pair starts at layer {first}")));
    }
    let softmax = |s: &LayerSpec| match s {
        LayerSpec::Dense { activation, .. } | LayerSpec::Conv1d { activation, .. } => {
            activation.is_softmax()
        }
        LayerSpec::Flatten => false,
    };
    if softmax(&spec.layers[first]) || softmax(&spec.layers[second]) {
        return Err(Error::Config(format!(
            "fusion plan boundary {first}: softmax layers cannot be fused"
        )));
    }

    let replacement: Vec<LayerSpec> = match (&spec.layers[first], &spec.layers[second]) {
        (LayerSpec::Dense { .. }, LayerSpec::Dense { units, activation }) => {
            vec![LayerSpec::Dense { units: *units, activation: *activation }]
        }
        (LayerSpec::Conv1d { .. }, LayerSpec::Dense { units, activation }) => vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { units: *units, activation: *activation },
        ],
        (
            LayerSpec::Conv1d { kernel: k1, stride: s1, pool: pool1, .. },
            LayerSpec::Conv1d { out_channels, kernel: k2, stride: s2, pool: pool2, activation },
        ) => {
            if second != first + 1 {
                return Err(Error::Config("conv-conv fusion requires adjacent layers".into()));
            }
            let r1 = match pool1.to_pool()?.kind {
                PoolKind::None => 1,
                PoolKind::Max => pool1.to_pool()?.stride,
            };
            vec![LayerSpec::Conv1d {
                out_channels: *out_channels,
                kernel: k1 + (k2 - 1) * s1 * r1,
                stride: s1 * r1 * s2,
                pool: *pool2,
                activation: *activation,
            }]
        }
        (LayerSpec::Dense { .. }, LayerSpec::Conv1d { .. }) => {
            return Err(Error::Config(format!(
                "fusion plan boundary {first}: a dense-to-conv pair is not fusable"
            )))
        }
        (LayerSpec::Flatten, _) | (_, LayerSpec::Flatten) => {
            return Err(Error::Config(format!(
                "fusion plan boundary {first} points at a flatten layer"
            )))
        }
    };

    let mut layers: Vec<LayerSpec> = spec.layers[..first].to_vec();
    layers.extend(replacement);
    layers.extend_from_slice(&spec.layers[second + 1..]);
    let fused = NetworkSpec { input_shape: spec.input_shape, layers };
    fused.propagate_shapes()?;
    Ok(fused)
}
