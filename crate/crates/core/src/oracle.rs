//! Independent brute-force references.
//!
//! Everything here solves the same problems as the fusion module but by a
//! different route: explicit design matrices and a rank-revealing SVD instead
//! of moment matrices and Cholesky. Kept deliberately slow and literal so the
//! two paths share no failure modes. The `verify` CLI subcommand re-runs these
//! cross-checks at runtime.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nn::{zero_pad, Dataset, LossKind, Network, Target, Value};

/// Relative singular-value cutoff for the pseudo-inverse solves.
const SVD_CUTOFF_REL: f64 = 1e-12;
/// A design is flagged degenerate when its smallest singular value falls
/// below this fraction of the largest.
const DEGENERATE_REL: f64 = 1e-10;

/// Least-squares affine fit `y ~ A x + c`.
#[derive(Debug, Clone)]
pub struct AffineFit {
    pub matrix: DMatrix<f64>,
    pub intercept: DVector<f64>,
    /// Mean over samples of the squared residual norm (divisor T).
    pub residual_mse: f64,
    /// Set when the stacked design is numerically rank deficient; the fit is
    /// then the minimum-norm solution.
    pub degenerate: bool,
}

/// Fits `A, c` minimizing `(1/T) sum_t ||A x_t + c - y_t||^2` by stacking the
/// design `[x_t; 1]` and solving with an SVD.
pub fn affine_lsq(inputs: &[DVector<f64>], targets: &[DVector<f64>]) -> Result<AffineFit> {
    if inputs.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: inputs.len() });
    }
    if inputs.len() != targets.len() {
        return Err(Error::Data("inputs and targets must have equal length".into()));
    }
    let t = inputs.len();
    let in_dim = inputs[0].len();
    let out_dim = targets[0].len();
    if inputs.iter().any(|x| x.len() != in_dim) || targets.iter().any(|y| y.len() != out_dim) {
        return Err(Error::Data("ragged sample dimensions".into()));
    }

    let mut design = DMatrix::zeros(t, in_dim + 1);
    let mut rhs = DMatrix::zeros(t, out_dim);
    for (r, (x, y)) in inputs.iter().zip(targets).enumerate() {
        for c in 0..in_dim {
            design[(r, c)] = x[c];
        }
        design[(r, in_dim)] = 1.0;
        for c in 0..out_dim {
            rhs[(r, c)] = y[c];
        }
    }

    let (theta, degenerate) = svd_solve(&design, &rhs)?;
    let matrix = theta.rows(0, in_dim).transpose();
    let intercept = theta.row(in_dim).transpose();

    let mut residual = 0.0;
    for (x, y) in inputs.iter().zip(targets) {
        residual += (&matrix * x + &intercept - y).norm_squared();
    }
    Ok(AffineFit { matrix, intercept, residual_mse: residual / t as f64, degenerate })
}

/// Least-squares fit of one fused conv filter for a single channel pair.
#[derive(Debug, Clone)]
pub struct ConvFit {
    pub filter: DVector<f64>,
    /// Mean squared residual over all stacked window rows.
    pub residual_mse: f64,
    pub degenerate: bool,
}

/// Regresses window targets on strided flipped windows of the centered input.
///
/// For every sample and window start `i in {1, 1+stride, ...}` (1-based) the
/// row is `u[L-i+1 .. L-i+k]` with `u = flip(zero_pad(x_centered, k))`, and
/// the target is `target[(i-1)/stride + 1]`. The stacked system is solved by
/// an SVD, so this is a second, independent route to the windowed normal
/// equations.
pub fn conv_window_lsq(
    centered_inputs: &[DVector<f64>],
    targets: &[DVector<f64>],
    k: usize,
    stride: usize,
) -> Result<ConvFit> {
    if centered_inputs.len() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: centered_inputs.len() });
    }
    if centered_inputs.len() != targets.len() {
        return Err(Error::Data("inputs and targets must have equal length".into()));
    }
    if k < 1 || stride < 1 {
        return Err(Error::Config("filter length and stride must be positive".into()));
    }
    let len = centered_inputs[0].len();
    let windows_per_sample = len.div_ceil(stride);
    let rows = centered_inputs.len() * windows_per_sample;

    let mut design = DMatrix::zeros(rows, k);
    let mut rhs = DMatrix::zeros(rows, 1);
    let mut r = 0;
    for (x, v) in centered_inputs.iter().zip(targets) {
        if x.len() != len {
            return Err(Error::Data("ragged sample dimensions".into()));
        }
        if v.len() != windows_per_sample {
            return Err(Error::shape(
                "conv window targets",
                format!("{windows_per_sample}"),
                format!("{}", v.len()),
            ));
        }
        let padded = zero_pad(x, k);
        let n = padded.len();
        let u = DVector::from_fn(n, |i, _| padded[n - 1 - i]);
        for j in 0..windows_per_sample {
            let start = len - 1 - j * stride;
            for t_idx in 0..k {
                design[(r, t_idx)] = u[start + t_idx];
            }
            rhs[(r, 0)] = v[j];
            r += 1;
        }
    }

    let (theta, degenerate) = svd_solve(&design, &rhs)?;
    let filter = DVector::from_column_slice(theta.as_slice());
    let residual = (&design * &theta - &rhs).norm_squared() / rows as f64;
    Ok(ConvFit { filter, residual_mse: residual, degenerate })
}

fn svd_solve(design: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::MAX, f64::min);
    let degenerate = design.nrows() < design.ncols() || smax == 0.0 || smin < DEGENERATE_REL * smax;
    let theta = svd
        .solve(rhs, SVD_CUTOFF_REL * smax.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Data(format!("svd solve failed: {e}")))?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("svd produced non-finite solution".into()));
    }
    Ok((theta, degenerate))
}

/// Central-finite-difference gradient check report.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares analytic gradients against central finite differences
/// (`(L(p+h) - L(p-h)) / 2h`) over every parameter.
///
/// The relative error for a parameter is `|a - n| / max(|a|, |n|)`, treated
/// as zero when both magnitudes are below 1e-10.
pub fn check_gradients_fd(
    net: &Network,
    inputs: &[Value],
    targets: &[Target],
    loss: LossKind,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = crate::nn::gradients(net, inputs, targets, loss)?;
    let analytic = grads.flatten();
    let base = net.params_flat();
    assert_eq!(analytic.len(), base.len());

    let mut probe = net.clone();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut params = base.clone();
        params[i] = base[i] + step;
        probe.set_params_flat(&params);
        let up = crate::nn::batch_loss(&probe, inputs, targets, loss)?;
        params[i] = base[i] - step;
        probe.set_params_flat(&params);
        let down = crate::nn::batch_loss(&probe, inputs, targets, loss)?;
        numeric.push((up - down) / (2.0 * step));
    }

    let mut max_rel_err = 0.0;
    let mut worst_param = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let scale = a.abs().max(n.abs());
        if scale < 1e-10 {
            continue;
        }
        let rel = (a - n).abs() / scale;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_param = i;
        }
    }
    Ok(GradCheckReport { max_rel_err, worst_param, analytic, numeric })
}

/// Mean loss of the dataset's training split; convenience for verification.
pub fn training_loss(net: &Network, data: &Dataset, loss: LossKind) -> Result<f64> {
    let idx = data.indices(crate::nn::Split::Train);
    let inputs: Vec<Value> = idx.iter().map(|&i| data.inputs[i].clone()).collect();
    let targets: Vec<Target> = idx.iter().map(|&i| data.targets[i].clone()).collect();
    crate::nn::batch_loss(net, &inputs, &targets, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn exact_line_is_recovered() {
        let xs: Vec<DVector<f64>> = [-1.0, 0.0, 0.5, 2.0].iter().map(|&v| scalar(v)).collect();
        let ys: Vec<DVector<f64>> = xs.iter().map(|x| x * 3.0 + scalar(1.0)).collect();
        let fit = affine_lsq(&xs, &ys).unwrap();
        assert_relative_eq!(fit.matrix[(0, 0)], 3.0, epsilon = 1e-12);
        assert_relative_eq!(fit.intercept[0], 1.0, epsilon = 1e-12);
        assert!(fit.residual_mse < 1e-24);
        assert!(!fit.degenerate);
    }

    /// Three-point scalar case through a relu: fit of relu(x) on x over
    /// {-1, 0, 2} is (5/7) x + 3/7 with residual 2/21.
    #[test]
    fn three_point_relu_case() {
        let xs = vec![scalar(-1.0), scalar(0.0), scalar(2.0)];
        let ys = vec![scalar(0.0), scalar(0.0), scalar(2.0)];
        let fit = affine_lsq(&xs, &ys).unwrap();
        assert_relative_eq!(fit.matrix[(0, 0)], 5.0 / 7.0, epsilon = 1e-12);
        assert_relative_eq!(fit.intercept[0], 3.0 / 7.0, epsilon = 1e-12);
        assert_relative_eq!(fit.residual_mse, 2.0 / 21.0, epsilon = 1e-12);
    }

    #[test]
    fn duplicating_samples_keeps_the_fit() {
        let xs = vec![scalar(-1.0), scalar(0.0), scalar(2.0)];
        let ys = vec![scalar(0.0), scalar(0.0), scalar(2.0)];
        let doubled_x: Vec<_> = xs.iter().chain(&xs).cloned().collect();
        let doubled_y: Vec<_> = ys.iter().chain(&ys).cloned().collect();
        let a = affine_lsq(&xs, &ys).unwrap();
        let b = affine_lsq(&doubled_x, &doubled_y).unwrap();
        assert_relative_eq!((a.matrix - b.matrix).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!((a.intercept - b.intercept).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(a.residual_mse, b.residual_mse, epsilon = 1e-12);
    }

    #[test]
    fn identical_inputs_are_flagged_degenerate() {
        let xs = vec![scalar(1.0); 4];
        let ys = vec![scalar(2.0); 4];
        let fit = affine_lsq(&xs, &ys).unwrap();
        assert!(fit.degenerate);
        // Minimum-norm solution still reproduces the data.
        assert!(fit.residual_mse < 1e-20);
    }

    #[test]
    fn random_perturbations_never_reduce_the_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let xs: Vec<DVector<f64>> =
            (0..24).map(|_| DVector::from_fn(3, |_, _| rng.gen::<f64>() - 0.5)).collect();
        let ys: Vec<DVector<f64>> = xs
            .iter()
            .map(|x| DVector::from_fn(2, |r, _| (x[r] * 2.0).tanh() + x[(r + 1) % 3]))
            .collect();
        let fit = affine_lsq(&xs, &ys).unwrap();
        let empirical = |m: &DMatrix<f64>, c: &DVector<f64>| {
            xs.iter().zip(&ys).map(|(x, y)| (m * x + c - y).norm_squared()).sum::<f64>() / xs.len() as f64
        };
        let base = empirical(&fit.matrix, &fit.intercept);
        assert_relative_eq!(base, fit.residual_mse, max_relative = 1e-10);
        for _ in 0..100 {
            let dm = DMatrix::from_fn(2, 3, |_, _| rng.gen::<f64>() - 0.5) * 1e-3;
            let dc = DVector::from_fn(2, |_, _| rng.gen::<f64>() - 0.5) * 1e-3;
            assert!(empirical(&(&fit.matrix + &dm), &(&fit.intercept + &dc)) > base);
        }
    }

    #[test]
    fn conv_fit_zero_targets_gives_zero_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<DVector<f64>> =
            (0..8).map(|_| DVector::from_fn(6, |_, _| rng.gen::<f64>() - 0.5)).collect();
        let ts: Vec<DVector<f64>> = (0..8).map(|_| DVector::zeros(6)).collect();
        let fit = conv_window_lsq(&xs, &ts, 3, 1).unwrap();
        assert!(fit.filter.norm() < 1e-12);
        assert!(fit.residual_mse < 1e-24);
    }

    #[test]
    fn insufficient_samples_error() {
        let xs = vec![scalar(1.0)];
        let ys = vec![scalar(1.0)];
        assert!(matches!(affine_lsq(&xs, &ys), Err(Error::InsufficientSamples { .. })));
    }
}
