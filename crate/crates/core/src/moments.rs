//! Empirical first and second moments at layer boundaries.
//!
//! Means, covariances, and cross-covariances are computed with divisor `T`
//! (not `T-1`) in two passes: means first, then centered accumulation. With
//! divisor `T` the closed-form fusion MSE equals the empirical MSE of the
//! fused layer on the same samples exactly (up to rounding), which the tests
//! lean on heavily.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv1d_multi, Layer, Network, Value};

/// A prospective fusion boundary: `first` is the first fused layer, `second`
/// the layer fused into. Everything in `first..second` acts as the (possibly
/// multi-layer) map whose input/output moments are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundary {
    pub first: usize,
    pub second: usize,
}

impl Boundary {
    pub fn new(first: usize, second: usize) -> Self {
        Boundary { first, second }
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.first >= self.second || self.second >= net.layers.len() {
            return Err(Error::Config(format!(
                "boundary ({}, {}) out of range for a {}-layer network",
                self.first,
                self.second,
                net.layers.len()
            )));
        }
        Ok(())
    }
}

/// Means and (cross-)covariances of the boundary signals `a0` (input of the
/// first fused layer) and `a1` (its output), both vectorized channel-major.
#[derive(Debug, Clone)]
pub struct MomentSet {
    pub mean_a0: DVector<f64>,
    pub mean_a1: DVector<f64>,
    pub c_a0: DMatrix<f64>,
    pub c_a1a0: DMatrix<f64>,
    pub c_a1: DMatrix<f64>,
    pub sample_count: usize,
}

impl MomentSet {
    /// Computes the moment set directly from paired boundary samples.
    pub fn from_samples(a0: &[DVector<f64>], a1: &[DVector<f64>]) -> Result<MomentSet> {
        let t = a0.len();
        if t < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: t });
        }
        assert_eq!(a0.len(), a1.len());
        let l0 = a0[0].len();
        let l1 = a1[0].len();

        let mut mean_a0 = DVector::zeros(l0);
        let mut mean_a1 = DVector::zeros(l1);
        for (x, y) in a0.iter().zip(a1) {
            mean_a0 += x;
            mean_a1 += y;
        }
        mean_a0 /= t as f64;
        mean_a1 /= t as f64;

        let mut c_a0 = DMatrix::zeros(l0, l0);
        let mut c_a1a0 = DMatrix::zeros(l1, l0);
        let mut c_a1 = DMatrix::zeros(l1, l1);
        for (x, y) in a0.iter().zip(a1) {
            let d0 = x - &mean_a0;
            let d1 = y - &mean_a1;
            c_a0 += &d0 * d0.transpose();
            c_a1a0 += &d1 * d0.transpose();
            c_a1 += &d1 * d1.transpose();
        }
        c_a0 /= t as f64;
        c_a1a0 /= t as f64;
        c_a1 /= t as f64;

        Ok(MomentSet { mean_a0, mean_a1, c_a0, c_a1a0, c_a1, sample_count: t })
    }

    /// JSON dump with matrices as nested row arrays.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc {
            mean_a0: Vec<f64>,
            mean_a1: Vec<f64>,
            c_a0: Vec<Vec<f64>>,
            c_a1a0: Vec<Vec<f64>>,
            c_a1: Vec<Vec<f64>>,
            sample_count: usize,
        }
        let doc = Doc {
            mean_a0: self.mean_a0.iter().cloned().collect(),
            mean_a1: self.mean_a1.iter().cloned().collect(),
            c_a0: matrix_rows(&self.c_a0),
            c_a1a0: matrix_rows(&self.c_a1a0),
            c_a1: matrix_rows(&self.c_a1),
            sample_count: self.sample_count,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
}

/// Reads paired boundary signals from forward traces.
pub fn boundary_samples(
    net: &Network,
    boundary: Boundary,
    inputs: &[Value],
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    boundary.validate(net)?;
    let mut a0 = Vec::with_capacity(inputs.len());
    let mut a1 = Vec::with_capacity(inputs.len());
    for input in inputs {
        let trace = net.forward(input)?;
        a0.push(trace.activations[boundary.first].vectorize());
        a1.push(trace.activations[boundary.second].vectorize());
    }
    Ok((a0, a1))
}

/// Empirical moments of the boundary signals over `inputs`.
pub fn estimate_dense_moments(net: &Network, boundary: Boundary, inputs: &[Value]) -> Result<MomentSet> {
    if inputs.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: inputs.len() });
    }
    let (a0, a1) = boundary_samples(net, boundary, inputs)?;
    MomentSet::from_samples(&a0, &a1)
}

/// Windowed accumulators for conv-conv fusion.
///
/// `u[m]` is the Gram matrix of stride-`stilde` windows of the flipped,
/// padded, centered input channel `m`; `z[m][p]` pairs those windows with the
/// centered second-layer pre-activation `v^p`.
#[derive(Debug, Clone)]
pub struct ConvMomentSet {
    pub u: Vec<DMatrix<f64>>,
    pub z: Vec<Vec<DVector<f64>>>,
    pub mean_a0: Vec<DVector<f64>>,
    pub mean_a1: Vec<DVector<f64>>,
    /// Largest absolute cross-channel correlation of the input channels,
    /// measured but never enforced: Pearson correlation of the centered
    /// values over all (sample, position) pairs, maximized over channel
    /// pairs. Zero for single-channel inputs.
    pub channel_crosscorr_diag: f64,
    pub ktilde: usize,
    pub stilde: usize,
    pub sample_count: usize,
}

impl ConvMomentSet {
    pub fn in_channels(&self) -> usize {
        self.u.len()
    }

    pub fn out_channels(&self) -> usize {
        self.z.first().map_or(0, |per_in| per_in.len())
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc {
            u: Vec<Vec<Vec<f64>>>,
            z: Vec<Vec<Vec<f64>>>,
            mean_a0: Vec<Vec<f64>>,
            mean_a1: Vec<Vec<f64>>,
            channel_crosscorr_diag: f64,
            ktilde: usize,
            stilde: usize,
            sample_count: usize,
        }
        let doc = Doc {
            u: self.u.iter().map(matrix_rows).collect(),
            z: self
                .z
                .iter()
                .map(|per_in| per_in.iter().map(|v| v.iter().cloned().collect()).collect())
                .collect(),
            mean_a0: self.mean_a0.iter().map(|v| v.iter().cloned().collect()).collect(),
            mean_a1: self.mean_a1.iter().map(|v| v.iter().cloned().collect()).collect(),
            channel_crosscorr_diag: self.channel_crosscorr_diag,
            ktilde: self.ktilde,
            stilde: self.stilde,
            sample_count: self.sample_count,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Per-sample channel signals at both ends of a conv-conv boundary.
pub fn conv_boundary_samples(
    net: &Network,
    boundary: Boundary,
    inputs: &[Value],
) -> Result<(Vec<Vec<DVector<f64>>>, Vec<Vec<DVector<f64>>>)> {
    boundary.validate(net)?;
    if boundary.second != boundary.first + 1 {
        return Err(Error::Config("conv fusion expects adjacent layers".into()));
    }
    if !matches!(&net.layers[boundary.first], Layer::Conv1d(_))
        || !matches!(&net.layers[boundary.second], Layer::Conv1d(_))
    {
        return Err(Error::Config("conv moments need two convolutional layers".into()));
    }
    let mut a0_all = Vec::with_capacity(inputs.len());
    let mut a1_all = Vec::with_capacity(inputs.len());
    for input in inputs {
        let trace = net.forward(input)?;
        a0_all.push(trace.activations[boundary.first].as_channels()?.to_vec());
        a1_all.push(trace.activations[boundary.second].as_channels()?.to_vec());
    }
    Ok((a0_all, a1_all))
}

/// Accumulates `U` and `z` for a conv-conv boundary.
///
/// The boundary must name two adjacent convolutional layers. `v^p` is the
/// centered second-layer convolution (its own stride and padding); window
/// starts step by `stilde` through the first layer's input, which is padded
/// by `ktilde` so every window is in range.
pub fn estimate_conv_moments(
    net: &Network,
    boundary: Boundary,
    inputs: &[Value],
    ktilde: usize,
    stilde: usize,
) -> Result<ConvMomentSet> {
    let (a0_all, a1_all) = conv_boundary_samples(net, boundary, inputs)?;
    let Layer::Conv1d(second) = &net.layers[boundary.second] else {
        unreachable!("checked by conv_boundary_samples");
    };
    estimate_conv_moments_from_samples(&a0_all, &a1_all, second, ktilde, stilde)
}

/// Same accumulation, starting from already-collected boundary samples.
/// `second` supplies the filters and stride for the `v^p` signals.
pub fn estimate_conv_moments_from_samples(
    a0_all: &[Vec<DVector<f64>>],
    a1_all: &[Vec<DVector<f64>>],
    second: &crate::nn::Conv1dLayer,
    ktilde: usize,
    stilde: usize,
) -> Result<ConvMomentSet> {
    let t = a0_all.len();
    if t < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: t });
    }
    if ktilde < 1 || stilde < 1 {
        return Err(Error::Config("ktilde and stilde must be positive".into()));
    }
    let m_in = a0_all[0].len();
    let n_mid = a1_all[0].len();
    let l0 = a0_all[0][0].len();
    let mean_a0 = channel_means(a0_all, m_in, l0);
    let mean_a1 = channel_means(a1_all, n_mid, a1_all[0][0].len());

    let window_count = l0.div_ceil(stilde);
    let p_out = second.out_channels();

    let mut u_acc = vec![DMatrix::zeros(ktilde, ktilde); m_in];
    let mut z_acc = vec![vec![DVector::zeros(ktilde); p_out]; m_in];

    // Pass 2: centered accumulation.
    for (a0, a1) in a0_all.iter().zip(a1_all) {
        let centered_a1: Vec<DVector<f64>> =
            a1.iter().zip(&mean_a1).map(|(x, mean)| x - mean).collect();
        let v = conv1d_multi(&second.filters, second.stride, &centered_a1);
        assert_eq!(
            v[0].len(),
            window_count,
            "internal invariant: stride-{stilde} window count must match the second-layer output length"
        );
        for m in 0..m_in {
            let centered = &a0[m] - &mean_a0[m];
            let u = crate::nn::zero_pad(&centered, ktilde);
            let n = u.len();
            let u = DVector::from_fn(n, |i, _| u[n - 1 - i]);
            for j in 0..window_count {
                let start = l0 - 1 - j * stilde;
                let w: DVector<f64> = u.rows(start, ktilde).into_owned();
                // Outer products of a vector with itself stay exactly symmetric.
                u_acc[m] += &w * w.transpose();
                for p in 0..p_out {
                    z_acc[m][p].axpy(v[p][j], &w, 1.0);
                }
            }
        }
    }
    for u in &mut u_acc {
        *u /= t as f64;
    }
    for per_in in &mut z_acc {
        for z in per_in {
            *z /= t as f64;
        }
    }

    let diag = cross_channel_correlation(a0_all, &mean_a0);

    Ok(ConvMomentSet {
        u: u_acc,
        z: z_acc,
        mean_a0,
        mean_a1,
        channel_crosscorr_diag: diag,
        ktilde,
        stilde,
        sample_count: t,
    })
}

fn channel_means(samples: &[Vec<DVector<f64>>], channels: usize, len: usize) -> Vec<DVector<f64>> {
    let mut means = vec![DVector::zeros(len); channels];
    for sample in samples {
        for (mean, ch) in means.iter_mut().zip(sample) {
            *mean += ch;
        }
    }
    for mean in &mut means {
        *mean /= samples.len() as f64;
    }
    means
}

/// Pearson correlation of centered channel values over all (sample, position)
/// pairs, maximized over distinct channel pairs.
fn cross_channel_correlation(samples: &[Vec<DVector<f64>>], means: &[DVector<f64>]) -> f64 {
    let channels = means.len();
    if channels < 2 {
        return 0.0;
    }
    let mut cross: DMatrix<f64> = DMatrix::zeros(channels, channels);
    for sample in samples {
        let centered: Vec<DVector<f64>> =
            sample.iter().zip(means).map(|(x, mean)| x - mean).collect();
        for m in 0..channels {
            for m2 in m..channels {
                cross[(m, m2)] += centered[m].dot(&centered[m2]);
            }
        }
    }
    let mut max_corr = 0.0f64;
    for m in 0..channels {
        for m2 in m + 1..channels {
            let denom: f64 = (cross[(m, m)] * cross[(m2, m2)]).sqrt();
            if denom > 0.0 {
                max_corr = max_corr.max((cross[(m, m2)] / denom).abs());
            }
        }
    }
    max_corr
}

/// Mean over samples of the squared distance between paired pre-activations.
pub fn empirical_mse(pairs: &[(DVector<f64>, DVector<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySet("empirical mse"));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        if a.len() != b.len() {
            return Err(Error::shape("empirical mse pair", format!("{}", a.len()), format!("{}", b.len())));
        }
        total += (a - b).norm_squared();
    }
    Ok(total / pairs.len() as f64)
}

/// Per-output-channel variant for convolutional pre-activations.
pub fn empirical_cmse(pairs: &[(Vec<DVector<f64>>, Vec<DVector<f64>>)]) -> Result<DVector<f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptySet("empirical per-channel mse"));
    }
    let channels = pairs[0].0.len();
    let mut total = DVector::zeros(channels);
    for (a, b) in pairs {
        if a.len() != channels || b.len() != channels {
            return Err(Error::shape("channel count", format!("{channels}"), format!("{}/{}", a.len(), b.len())));
        }
        for p in 0..channels {
            if a[p].len() != b[p].len() {
                return Err(Error::shape(
                    "empirical mse pair",
                    format!("{}", a[p].len()),
                    format!("{}", b[p].len()),
                ));
            }
            total[p] += (&a[p] - &b[p]).norm_squared();
        }
    }
    Ok(total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_symmetric_eigenvalue;
    use crate::nn::{ActivationKind, Conv1dLayer, ConvBias, DenseLayer, PoolSpec, Shape};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_relu_net() -> Network {
        // relu first layer with identity weights, identity second layer.
        Network::new(
            vec![
                Layer::Dense(
                    DenseLayer::new(DMatrix::identity(1, 1), DVector::zeros(1), ActivationKind::Relu).unwrap(),
                ),
                Layer::Dense(
                    DenseLayer::new(DMatrix::identity(1, 1), DVector::zeros(1), ActivationKind::Identity)
                        .unwrap(),
                ),
            ],
            Shape::Flat(1),
        )
        .unwrap()
    }

    fn three_point_inputs() -> Vec<Value> {
        [-1.0, 0.0, 2.0].iter().map(|&v| Value::Flat(DVector::from_element(1, v))).collect()
    }

    #[test]
    fn hand_computed_three_point_moments() {
        let net = scalar_relu_net();
        let m = estimate_dense_moments(&net, Boundary::new(0, 1), &three_point_inputs()).unwrap();
        assert_relative_eq!(m.mean_a0[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(m.mean_a1[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(m.c_a0[(0, 0)], 14.0 / 9.0, epsilon = 1e-15);
        assert_relative_eq!(m.c_a1a0[(0, 0)], 10.0 / 9.0, epsilon = 1e-15);
        assert_relative_eq!(m.c_a1[(0, 0)], 8.0 / 9.0, epsilon = 1e-15);
        assert_eq!(m.sample_count, 3);
    }

    #[test]
    fn constant_inputs_zero_covariance() {
        let net = scalar_relu_net();
        let inputs = vec![Value::Flat(DVector::from_element(1, 1.5)); 4];
        let m = estimate_dense_moments(&net, Boundary::new(0, 1), &inputs).unwrap();
        assert_eq!(m.c_a0[(0, 0)], 0.0);
    }

    #[test]
    fn identity_first_layer_makes_covariances_equal() {
        let net = Network::new(
            vec![
                Layer::Dense(
                    DenseLayer::new(DMatrix::identity(2, 2), DVector::zeros(2), ActivationKind::Identity)
                        .unwrap(),
                ),
                Layer::Dense(
                    DenseLayer::new(DMatrix::identity(2, 2), DVector::zeros(2), ActivationKind::Identity)
                        .unwrap(),
                ),
            ],
            Shape::Flat(2),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs: Vec<Value> =
            (0..16).map(|_| Value::Flat(DVector::from_fn(2, |_, _| rng.gen::<f64>()))).collect();
        let m = estimate_dense_moments(&net, Boundary::new(0, 1), &inputs).unwrap();
        assert_eq!(m.c_a1a0, m.c_a0);
    }

    #[test]
    fn too_few_samples() {
        let net = scalar_relu_net();
        let inputs = vec![Value::Flat(DVector::from_element(1, 1.0))];
        assert!(matches!(
            estimate_dense_moments(&net, Boundary::new(0, 1), &inputs),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn covariances_are_symmetric_and_psd() {
        let net = scalar_relu_two_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs: Vec<Value> =
            (0..64).map(|_| Value::Flat(DVector::from_fn(3, |_, _| rng.gen::<f64>() * 2.0 - 1.0))).collect();
        let m = estimate_dense_moments(&net, Boundary::new(0, 1), &inputs).unwrap();
        assert_eq!(m.c_a0, m.c_a0.transpose());
        assert_eq!(m.c_a1, m.c_a1.transpose());
        assert!(min_symmetric_eigenvalue(&m.c_a0) >= -1e-10 * m.c_a0.trace());
    }

    fn scalar_relu_two_dim() -> Network {
        Network::new(
            vec![
                Layer::Dense(
                    DenseLayer::new(
                        DMatrix::from_row_slice(2, 3, &[1.0, -0.5, 0.25, 0.0, 1.0, 1.0]),
                        DVector::from_vec(vec![0.1, -0.1]),
                        ActivationKind::Relu,
                    )
                    .unwrap(),
                ),
                Layer::Dense(
                    DenseLayer::new(DMatrix::identity(2, 2), DVector::zeros(2), ActivationKind::Identity)
                        .unwrap(),
                ),
            ],
            Shape::Flat(3),
        )
        .unwrap()
    }

    fn delta_conv_pair(k2: usize, seed: u64) -> (Network, Vec<Value>) {
        // First layer: identity delta filter; second layer: random filter.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = Conv1dLayer::new(
            vec![vec![DVector::from_element(1, 1.0)]],
            ConvBias::zeros(1),
            1,
            ActivationKind::Identity,
            PoolSpec::none(),
        )
        .unwrap();
        let second = Conv1dLayer::new(
            vec![vec![DVector::from_fn(k2, |_, _| rng.gen::<f64>() - 0.5)]],
            ConvBias::zeros(1),
            1,
            ActivationKind::Identity,
            PoolSpec::none(),
        )
        .unwrap();
        let net = Network::new(
            vec![Layer::Conv1d(first), Layer::Conv1d(second)],
            Shape::Channels { channels: 1, length: 6 },
        )
        .unwrap();
        let inputs: Vec<Value> = (0..32)
            .map(|_| Value::Channels(vec![DVector::from_fn(6, |_, _| rng.gen::<f64>() * 2.0 - 1.0)]))
            .collect();
        (net, inputs)
    }

    #[test]
    fn constant_samples_zero_accumulators() {
        let (net, _) = delta_conv_pair(3, 1);
        let inputs = vec![Value::Channels(vec![DVector::from_element(6, 2.0)]); 4];
        let cm = estimate_conv_moments(&net, Boundary::new(0, 1), &inputs, 3, 1).unwrap();
        assert!(cm.u[0].norm() == 0.0);
        assert!(cm.z[0][0].norm() == 0.0);
    }

    /// With ktilde = stilde = 1 and a delta first layer, U is the scalar sum
    /// over window starts of the per-position variance; check against a
    /// direct double loop over samples and windows.
    #[test]
    fn scalar_u_matches_direct_double_loop() {
        let (net, inputs) = delta_conv_pair(1, 7);
        let cm = estimate_conv_moments(&net, Boundary::new(0, 1), &inputs, 1, 1).unwrap();

        let l0 = 6;
        let t = inputs.len() as f64;
        let xs: Vec<&DVector<f64>> = inputs
            .iter()
            .map(|v| match v {
                Value::Channels(ch) => &ch[0],
                _ => unreachable!(),
            })
            .collect();
        let mean = xs.iter().fold(DVector::zeros(l0), |acc, x| acc + *x) / t;
        // 1-based window start i reads u[L0 - i + 1] = centered x[i] when
        // ktilde = 1 (no padding, pure flip): sum_i E[(x[i] - mean[i])^2].
        let mut direct = 0.0;
        for x in &xs {
            for i in 0..l0 {
                direct += (x[i] - mean[i]).powi(2);
            }
        }
        direct /= t;
        assert_relative_eq!(cm.u[0][(0, 0)], direct, max_relative = 1e-12);
    }

    #[test]
    fn u_matrices_are_symmetric_and_psd() {
        let (net, inputs) = delta_conv_pair(3, 9);
        let cm = estimate_conv_moments(&net, Boundary::new(0, 1), &inputs, 3, 1).unwrap();
        for u in &cm.u {
            assert_eq!(u, &u.transpose());
            assert!(min_symmetric_eigenvalue(u) >= -1e-10 * u.trace());
        }
    }

    #[test]
    fn independent_channels_have_small_cross_correlation() {
        // Two independent channels, T = 10 * L0.
        let l0 = 8;
        let t = 10 * l0;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let first = Conv1dLayer::new(
            vec![
                vec![DVector::from_element(1, 1.0)],
                vec![DVector::from_element(1, 1.0)],
            ],
            ConvBias::zeros(1),
            1,
            ActivationKind::Identity,
            PoolSpec::none(),
        )
        .unwrap();
        let second = Conv1dLayer::new(
            vec![vec![DVector::from_element(1, 1.0)]],
            ConvBias::zeros(1),
            1,
            ActivationKind::Identity,
            PoolSpec::none(),
        )
        .unwrap();
        let net = Network::new(
            vec![Layer::Conv1d(first), Layer::Conv1d(second)],
            Shape::Channels { channels: 2, length: l0 },
        )
        .unwrap();
        let inputs: Vec<Value> = (0..t)
            .map(|_| {
                Value::Channels(vec![
                    DVector::from_fn(l0, |_, _| rng.gen::<f64>() * 2.0 - 1.0),
                    DVector::from_fn(l0, |_, _| rng.gen::<f64>() * 2.0 - 1.0),
                ])
            })
            .collect();
        let cm = estimate_conv_moments(&net, Boundary::new(0, 1), &inputs, 1, 1).unwrap();
        assert!(cm.channel_crosscorr_diag < 0.1, "diag {}", cm.channel_crosscorr_diag);
        assert!(cm.channel_crosscorr_diag > 0.0);
    }

    #[test]
    fn empirical_mse_identical_traces() {
        let pairs = vec![(DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![1.0, 2.0]))];
        assert_eq!(empirical_mse(&pairs).unwrap(), 0.0);
    }

    /// Fused (5/7) x + 3/7 against relu(x) on {-1, 0, 2} has MSE 2/21, and any
    /// perturbation of the optimum increases it.
    #[test]
    fn three_point_fused_mse_and_convexity() {
        let xs = [-1.0, 0.0, 2.0];
        let mse = |w: f64, b: f64| {
            let pairs: Vec<_> = xs
                .iter()
                .map(|&x| {
                    (DVector::from_element(1, w * x + b), DVector::from_element(1, x.max(0.0)))
                })
                .collect();
            empirical_mse(&pairs).unwrap()
        };
        let base = mse(5.0 / 7.0, 3.0 / 7.0);
        assert_relative_eq!(base, 2.0 / 21.0, epsilon = 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let dw = (rng.gen::<f64>() - 0.5) * 0.1;
            let db = (rng.gen::<f64>() - 0.5) * 0.1;
            if dw == 0.0 && db == 0.0 {
                continue;
            }
            assert!(mse(5.0 / 7.0 + dw, 3.0 / 7.0 + db) > base);
        }
    }

    #[test]
    fn empty_pairs_error() {
        assert!(empirical_mse(&[]).is_err());
        assert!(empirical_cmse(&[]).is_err());
    }

    /// Covariance estimation error shrinks with T for Gaussian data with a
    /// known covariance (median over seeds, three sample sizes).
    #[test]
    fn covariance_concentration() {
        let l0 = 6;
        let root = DMatrix::from_fn(l0, l0, |r, c| if r >= c { 0.4 / (1.0 + (r - c) as f64) } else { 0.0 })
            + DMatrix::identity(l0, l0);
        let truth = &root * root.transpose();
        let mut medians = Vec::new();
        for factor in [2usize, 8, 32] {
            let t = factor * l0;
            let mut errs: Vec<f64> = (0..10u64)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
                    let samples: Vec<DVector<f64>> = (0..t)
                        .map(|_| &root * DVector::from_fn(l0, |_, _| rand_distr::Distribution::sample(&normal, &mut rng)))
                        .collect();
                    let ones = vec![DVector::zeros(1); t];
                    let m = MomentSet::from_samples(&samples, &ones).unwrap();
                    (m.c_a0 - &truth).norm()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            medians.push((errs[4] + errs[5]) / 2.0);
        }
        assert!(medians[0] > medians[1] && medians[1] > medians[2], "medians {medians:?}");
    }
}
