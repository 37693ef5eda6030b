//! Runtime self-checks: re-runs the oracle cross-checks on seeded cases so a
//! deployed binary can demonstrate that its fusion math, gradients, and
//! length laws hold on this machine. Used by the `verify` CLI subcommand.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{
    self, fuse_at, fuse_dense, FuseOptions,
};
use crate::moments::{boundary_samples, empirical_mse, Boundary, MomentSet};
use crate::nn::{
    conv1d_multi, conv_output_len, zero_pad, ActivationKind, Conv1dLayer, ConvBias, DenseLayer,
    Layer, LossKind, Network, PoolSpec, Shape, Target, Value,
};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Runs every self-check; results come back in a fixed order.
pub fn run_all() -> Vec<CheckResult> {
    let checks: Vec<(&'static str, fn() -> std::result::Result<String, String>)> = vec![
        ("padding-length-law", padding_length_law),
        ("flip-window-equivalence", flip_window_equivalence),
        ("gradient-check-dense", gradient_check_dense),
        ("gradient-check-conv", gradient_check_conv),
        ("dense-fusion-oracle", dense_fusion_oracle),
        ("fusion-mse-identity", fusion_mse_identity),
        ("conv-fusion-oracle", conv_fusion_oracle),
        ("linear-collapse", linear_collapse),
        ("delta-filter", delta_filter),
        ("fused-length-law", fused_length_law),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(detail) => CheckResult { name, passed: false, detail },
        })
        .collect()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
}

fn padding_length_law() -> std::result::Result<String, String> {
    for k in 1..=7usize {
        for len in 1..=16usize {
            let x = DVector::from_element(len, 1.0);
            let padded = zero_pad(&x, k);
            if padded.len() != len + k - 1 {
                return Err(format!("len({len}) k({k}): got {}", padded.len()));
            }
        }
    }
    Ok("length(pad(x,k)) = L + k - 1 for k <= 7, L <= 16".into())
}

fn flip_window_equivalence() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 1..=5usize {
        for len in 1..=10usize {
            for stride in 1..=3usize {
                let x = rand_vec(&mut rng, len);
                let h = rand_vec(&mut rng, k);
                let got = conv1d_multi(&[vec![h.clone()]], stride, &[x.clone()]);
                let padded = zero_pad(&x, k);
                let direct = DVector::from_fn(conv_output_len(len, stride), |j, _| {
                    (0..k).map(|t| h[t] * padded[j * stride + k - 1 - t]).sum()
                });
                if (got[0].clone() - direct).abs().max() > 1e-12 {
                    return Err(format!("mismatch at k={k} L={len} s={stride}"));
                }
            }
        }
    }
    Ok("windowed inner products equal the direct convolution on k <= 5, L <= 10".into())
}

fn gradient_net(seed: u64, conv: bool) -> (Network, Vec<Value>, Vec<Target>) {
    use crate::nn::{LayerSpec, NetworkSpec, PoolSpecSpec, ShapeSpec};
    let spec = if conv {
        NetworkSpec {
            input_shape: ShapeSpec::Channels { channels: 2, length: 6 },
            layers: vec![
                LayerSpec::Conv1d {
                    out_channels: 2,
                    kernel: 3,
                    stride: 2,
                    pool: PoolSpecSpec::Max { r: 2 },
                    activation: ActivationKind::Relu,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3, activation: ActivationKind::Softmax },
            ],
        }
    } else {
        NetworkSpec {
            input_shape: ShapeSpec::Flat { length: 4 },
            layers: vec![
                LayerSpec::Dense { units: 5, activation: ActivationKind::Tanh },
                LayerSpec::Dense { units: 3, activation: ActivationKind::Sigmoid },
            ],
        }
    };
    let net = spec.random_init(seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let inputs: Vec<Value> = (0..3)
        .map(|_| match net.input_shape {
            Shape::Flat(n) => Value::Flat(rand_vec(&mut rng, n)),
            Shape::Channels { channels, length } => {
                Value::Channels((0..channels).map(|_| rand_vec(&mut rng, length)).collect())
            }
        })
        .collect();
    let targets: Vec<Target> = if conv {
        (0..3).map(|i| Target::Class(i % 3)).collect()
    } else {
        (0..3).map(|_| Target::Vector(rand_vec(&mut rng, 3))).collect()
    };
    (net, inputs, targets)
}

fn gradient_check_dense() -> std::result::Result<String, String> {
    let (net, inputs, targets) = gradient_net(2, false);
    let report = crate::oracle::check_gradients_fd(&net, &inputs, &targets, LossKind::Mse, 1e-5)
        .map_err(|e| e.to_string())?;
    if report.max_rel_err > 1e-4 {
        return Err(format!("max relative error {:.3e}", report.max_rel_err));
    }
    Ok(format!("max relative error {:.3e}", report.max_rel_err))
}

fn gradient_check_conv() -> std::result::Result<String, String> {
    let (net, inputs, targets) = gradient_net(3, true);
    let report =
        crate::oracle::check_gradients_fd(&net, &inputs, &targets, LossKind::CrossEntropy, 1e-5)
            .map_err(|e| e.to_string())?;
    if report.max_rel_err > 1e-4 {
        return Err(format!("max relative error {:.3e}", report.max_rel_err));
    }
    Ok(format!("max relative error {:.3e}", report.max_rel_err))
}

fn relu_case(seed: u64) -> Result<(Network, Vec<Value>, DMatrix<f64>, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l0, l1, l2) = (5, 4, 3);
    let net = Network::new(
        vec![
            Layer::Dense(DenseLayer::new(rand_mat(&mut rng, l1, l0), rand_vec(&mut rng, l1), ActivationKind::Relu)?),
            Layer::Dense(DenseLayer::new(
                rand_mat(&mut rng, l2, l1),
                rand_vec(&mut rng, l2),
                ActivationKind::Identity,
            )?),
        ],
        Shape::Flat(l0),
    )?;
    let inputs: Vec<Value> = (0..128).map(|_| Value::Flat(rand_vec(&mut rng, l0))).collect();
    let Layer::Dense(second) = &net.layers[1] else { unreachable!() };
    Ok((net.clone(), inputs, second.weights.clone(), second.bias.clone()))
}

fn dense_fusion_oracle() -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 10..13 {
        let (net, inputs, w2, b2) = relu_case(seed).map_err(|e| e.to_string())?;
        let (a0, a1) = boundary_samples(&net, Boundary::new(0, 1), &inputs).map_err(|e| e.to_string())?;
        let moments = MomentSet::from_samples(&a0, &a1).map_err(|e| e.to_string())?;
        let result = fuse_dense(&moments, &w2, &b2).map_err(|e| e.to_string())?;
        let targets: Vec<DVector<f64>> = a1.iter().map(|x| &w2 * x + &b2).collect();
        let fit = crate::oracle::affine_lsq(&a0, &targets).map_err(|e| e.to_string())?;
        let diff = (&result.w_tilde - &fit.matrix)
            .abs()
            .max()
            .max((&result.b_tilde - &fit.intercept).abs().max());
        worst = worst.max(diff);
        if diff > 1e-8 {
            return Err(format!("seed {seed}: parameter difference {diff:.3e}"));
        }
    }
    Ok(format!("max parameter difference vs least-squares oracle {worst:.3e}"))
}

fn fusion_mse_identity() -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 20..23 {
        let (net, inputs, w2, b2) = relu_case(seed).map_err(|e| e.to_string())?;
        let (a0, a1) = boundary_samples(&net, Boundary::new(0, 1), &inputs).map_err(|e| e.to_string())?;
        let moments = MomentSet::from_samples(&a0, &a1).map_err(|e| e.to_string())?;
        let result = fuse_dense(&moments, &w2, &b2).map_err(|e| e.to_string())?;
        if result.ridge_used != 0.0 {
            return Err(format!("seed {seed}: unexpected ridge {:.3e}", result.ridge_used));
        }
        let pairs: Vec<_> = a0
            .iter()
            .zip(&a1)
            .map(|(x0, x1)| (&result.w_tilde * x0 + &result.b_tilde, &w2 * x1 + &b2))
            .collect();
        let empirical = empirical_mse(&pairs).map_err(|e| e.to_string())?;
        let rel = (result.predicted_mse - empirical).abs() / empirical.max(1e-30);
        worst = worst.max(rel);
        if rel > 1e-8 {
            return Err(format!("seed {seed}: relative gap {rel:.3e}"));
        }
    }
    Ok(format!("closed-form vs empirical MSE relative gap {worst:.3e}"))
}

fn conv_pair(seed: u64, delta_first: bool) -> Result<(Network, Vec<Value>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l0 = 10;
    let first = if delta_first {
        Conv1dLayer::new(
            vec![vec![DVector::from_element(1, 1.0)]],
            ConvBias::zeros(1),
            1,
            ActivationKind::Identity,
            PoolSpec::none(),
        )?
    } else {
        Conv1dLayer::new(
            vec![vec![rand_vec(&mut rng, 3)]],
            ConvBias::PerChannel(rand_vec(&mut rng, 1)),
            1,
            ActivationKind::Relu,
            PoolSpec::none(),
        )?
    };
    let second = Conv1dLayer::new(
        vec![vec![rand_vec(&mut rng, 3)]],
        ConvBias::PerChannel(rand_vec(&mut rng, 1)),
        1,
        ActivationKind::Identity,
        PoolSpec::none(),
    )?;
    let net = Network::new(
        vec![Layer::Conv1d(first), Layer::Conv1d(second)],
        Shape::Channels { channels: 1, length: l0 },
    )?;
    let inputs: Vec<Value> =
        (0..96).map(|_| Value::Channels(vec![rand_vec(&mut rng, l0)])).collect();
    Ok((net, inputs))
}

fn conv_fusion_oracle() -> std::result::Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 30..32 {
        let (net, inputs) = conv_pair(seed, false).map_err(|e| e.to_string())?;
        let Layer::Conv1d(second) = &net.layers[1] else { unreachable!() };
        let (a0, a1) =
            crate::moments::conv_boundary_samples(&net, Boundary::new(0, 1), &inputs).map_err(|e| e.to_string())?;
        let ktilde = fusion::default_ktilde(first_conv(&net), second);
        let stilde = fusion::composed_stride(first_conv(&net), second);
        let cm = crate::moments::estimate_conv_moments_from_samples(&a0, &a1, second, ktilde, stilde)
            .map_err(|e| e.to_string())?;
        let result = fusion::fuse_conv(&cm, second, &a0, &a1).map_err(|e| e.to_string())?;

        let centered: Vec<DVector<f64>> = a0.iter().map(|ch| &ch[0] - &cm.mean_a0[0]).collect();
        let targets: Vec<DVector<f64>> = a1
            .iter()
            .map(|ch| {
                let c: Vec<DVector<f64>> = ch.iter().zip(&cm.mean_a1).map(|(x, m)| x - m).collect();
                conv1d_multi(&second.filters, second.stride, &c)[0].clone()
            })
            .collect();
        let fit = crate::oracle::conv_window_lsq(&centered, &targets, ktilde, stilde)
            .map_err(|e| e.to_string())?;
        let diff = (&result.h_tilde[0][0] - &fit.filter).abs().max();
        worst = worst.max(diff);
        if diff > 1e-6 {
            return Err(format!("seed {seed}: filter difference {diff:.3e}"));
        }
    }
    Ok(format!("max filter difference vs window oracle {worst:.3e}"))
}

fn first_conv(net: &Network) -> &Conv1dLayer {
    match &net.layers[0] {
        Layer::Conv1d(c) => c,
        _ => unreachable!(),
    }
}

fn linear_collapse() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let (l0, l1, l2) = (4, 3, 2);
    let w1 = rand_mat(&mut rng, l1, l0);
    let b1 = rand_vec(&mut rng, l1);
    let w2 = rand_mat(&mut rng, l2, l1);
    let b2 = rand_vec(&mut rng, l2);
    let net = Network::new(
        vec![
            Layer::Dense(DenseLayer::new(w1.clone(), b1.clone(), ActivationKind::Identity).map_err(|e| e.to_string())?),
            Layer::Dense(DenseLayer::new(w2.clone(), b2.clone(), ActivationKind::Identity).map_err(|e| e.to_string())?),
        ],
        Shape::Flat(l0),
    )
    .map_err(|e| e.to_string())?;
    let inputs: Vec<Value> = (0..64).map(|_| Value::Flat(rand_vec(&mut rng, l0))).collect();
    let (fused, report) =
        fuse_at(&net, 0, &inputs, &FuseOptions::default()).map_err(|e| e.to_string())?;
    let Layer::Dense(fd) = &fused.layers[0] else { unreachable!() };
    let dw = (&fd.weights - &w2 * &w1).abs().max();
    let db = (&fd.bias - (&w2 * &b1 + &b2)).abs().max();
    if dw > 1e-10 || db > 1e-10 || report.predicted_mse > 1e-10 {
        return Err(format!("dw {dw:.3e}, db {db:.3e}, mse {:.3e}", report.predicted_mse));
    }
    let mut max_dev: f64 = 0.0;
    for input in inputs.iter().take(16) {
        let a = net.predict(input).map_err(|e| e.to_string())?.vectorize();
        let b = fused.predict(input).map_err(|e| e.to_string())?.vectorize();
        max_dev = max_dev.max((a - b).abs().max());
    }
    if max_dev > 1e-8 {
        return Err(format!("output deviation {max_dev:.3e}"));
    }
    Ok(format!("linear pair collapses exactly (max output deviation {max_dev:.3e})"))
}

fn delta_filter() -> std::result::Result<String, String> {
    let (net, inputs) = conv_pair(50, true).map_err(|e| e.to_string())?;
    let Layer::Conv1d(second) = &net.layers[1] else { unreachable!() };
    let (fused, report) =
        fuse_at(&net, 0, &inputs, &FuseOptions::default()).map_err(|e| e.to_string())?;
    let Layer::Conv1d(fc) = &fused.layers[0] else { unreachable!() };
    let diff = (&fc.filters[0][0] - &second.filters[0][0]).abs().max();
    let cmse = report.per_channel_cmse.as_ref().map_or(f64::NAN, |v| v[0]);
    if diff > 1e-8 || cmse > 1e-10 {
        return Err(format!("filter diff {diff:.3e}, per-channel mse {cmse:.3e}"));
    }
    Ok(format!("identity first layer reproduces the second filter (diff {diff:.3e})"))
}

fn fused_length_law() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for s1 in 1..=2usize {
        for r1 in 1..=2usize {
            for s2 in 1..=2usize {
                for l0 in [1usize, 2, 5, 9, 16, 32] {
                    let pool = if r1 == 1 { PoolSpec::none() } else { PoolSpec::max(r1).map_err(|e| e.to_string())? };
                    let mk = |rng: &mut ChaCha8Rng, stride, pool, act| {
                        Conv1dLayer::new(
                            vec![vec![rand_vec(rng, 2)]],
                            ConvBias::zeros(1),
                            stride,
                            act,
                            pool,
                        )
                        .unwrap()
                    };
                    let net = Network::new(
                        vec![
                            Layer::Conv1d(mk(&mut rng, s1, pool, ActivationKind::Tanh)),
                            Layer::Conv1d(mk(&mut rng, s2, PoolSpec::none(), ActivationKind::Identity)),
                        ],
                        Shape::Channels { channels: 1, length: l0 },
                    )
                    .map_err(|e| e.to_string())?;
                    let inputs: Vec<Value> =
                        (0..4).map(|_| Value::Channels(vec![rand_vec(&mut rng, l0)])).collect();
                    let (fused, _) = fuse_at(&net, 0, &inputs, &FuseOptions::default())
                        .map_err(|e| e.to_string())?;
                    let a = net.output_shape().map_err(|e| e.to_string())?;
                    let b = fused.output_shape().map_err(|e| e.to_string())?;
                    if a != b {
                        return Err(format!("L0={l0} s1={s1} r1={r1} s2={s2}: {a:?} vs {b:?}"));
                    }
                }
            }
        }
    }
    Ok("fused output lengths match the composed pair on the stride grid".into())
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_self_checks_pass() {
        let results = super::run_all();
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert_eq!(results.len(), 10);
    }
}
