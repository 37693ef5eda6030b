//! Seeded synthetic datasets and CSV ingestion.
//!
//! Everything is deterministic under a fixed seed: generation, noise, and the
//! train/validation split. Synthetic data is not standardized; CSV features
//! are standardized by default using statistics from the training split only.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
pub use crate::nn::Dataset;
use crate::nn::{Split, Target, Value};

pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two interleaved half-circles in the plane, one class each.
    TwoMoons,
    /// Scalar regression of `sin(x)` on `x` drawn uniformly from `[-pi, pi]`.
    SineRegression,
    /// Multi-channel sinusoid classification: the class sets the frequency,
    /// each sample carries a random global phase.
    Multichannel1dClasses { channels: usize, length: usize, classes: usize },
    /// Channels with exactly zero empirical cross-channel covariance,
    /// constructed by orthogonalizing Gaussian draws. The noise parameter is
    /// unused. Requires `n >= channels * length + 1`.
    OrthogonalChannels { channels: usize, length: usize },
}

impl SyntheticKind {
    fn name(&self) -> &'static str {
        match self {
            SyntheticKind::TwoMoons => "two_moons",
            SyntheticKind::SineRegression => "sine_regression",
            SyntheticKind::Multichannel1dClasses { .. } => "multichannel_1d_classes",
            SyntheticKind::OrthogonalChannels { .. } => "orthogonal_channels",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    DEFAULT_VAL_FRACTION
}

/// Generates a synthetic dataset with the default 20% validation split.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    gen_from_spec(&SyntheticSpec { kind, n, noise, seed, val_fraction: DEFAULT_VAL_FRACTION })
}

pub fn gen_from_spec(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n < 4 {
        return Err(Error::Config("synthetic datasets need at least 4 samples".into()));
    }
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(Error::Config("validation fraction must be in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (inputs, targets, n_classes) = match &spec.kind {
        SyntheticKind::TwoMoons => two_moons(spec.n, spec.noise, &mut rng),
        SyntheticKind::SineRegression => sine_regression(spec.n, spec.noise, &mut rng),
        SyntheticKind::Multichannel1dClasses { channels, length, classes } => {
            multichannel_classes(spec.n, spec.noise, *channels, *length, *classes, &mut rng)?
        }
        SyntheticKind::OrthogonalChannels { channels, length } => {
            orthogonal_channels(spec.n, *channels, *length, &mut rng)?
        }
    };
    let split = split_tags(spec.n, spec.val_fraction, spec.seed);
    let data = Dataset {
        inputs,
        targets,
        split,
        n_classes,
        provenance: format!(
            "{}(n={},noise={},seed={})",
            spec.kind.name(),
            spec.n,
            spec.noise,
            spec.seed
        ),
    };
    data.validate()?;
    Ok(data)
}

/// Deterministic split: a seeded shuffle marks the first `round(frac * n)`
/// indices as validation.
fn split_tags(n: usize, val_fraction: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5357_4147)); // distinct stream from generation
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let n_val = (val_fraction * n as f64).round() as usize;
    let mut tags = vec![Split::Train; n];
    for &i in order.iter().take(n_val) {
        tags[i] = Split::Validation;
    }
    tags
}

type Generated = (Vec<Value>, Vec<Target>, Option<usize>);

fn two_moons(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Generated {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n0 = n / 2;
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= n0);
        let count = if class == 0 { n0 } else { n - n0 };
        let idx = if class == 0 { i } else { i - n0 };
        let theta = PI * idx as f64 / (count.max(2) - 1) as f64;
        let (x, y) = if class == 0 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        let dx = noise * normal.sample(rng);
        let dy = noise * normal.sample(rng);
        inputs.push(Value::Flat(DVector::from_vec(vec![x + dx, y + dy])));
        targets.push(Target::Class(class));
    }
    (inputs, targets, Some(2))
}

fn sine_regression(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Generated {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.gen_range(-PI..PI);
        let y = x.sin() + noise * normal.sample(rng);
        inputs.push(Value::Flat(DVector::from_element(1, x)));
        targets.push(Target::Vector(DVector::from_element(1, y)));
    }
    (inputs, targets, None)
}

fn multichannel_classes(
    n: usize,
    noise: f64,
    channels: usize,
    length: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Generated> {
    if channels == 0 || length == 0 || classes < 2 {
        return Err(Error::Config("multichannel generator needs channels, length, and >= 2 classes".into()));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let freq = (class + 1) as f64;
        let mut sample = Vec::with_capacity(channels);
        for m in 0..channels {
            let channel_phase = PI * m as f64 / (2.0 * channels as f64);
            sample.push(DVector::from_fn(length, |l, _| {
                (2.0 * PI * freq * l as f64 / length as f64 + channel_phase + phase).sin()
                    + noise * normal.sample(rng)
            }));
        }
        inputs.push(Value::Channels(sample));
        targets.push(Target::Class(class));
    }
    Ok((inputs, targets, Some(classes)))
}

fn orthogonal_channels(
    n: usize,
    channels: usize,
    length: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Generated> {
    let dims = channels * length;
    if n < dims + 1 {
        return Err(Error::Config(format!(
            "orthogonal_channels needs n >= channels*length + 1 ({} needed, {} given)",
            dims + 1,
            n
        )));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut g = DMatrix::from_fn(n, dims, |_, _| normal.sample(rng));
    for c in 0..dims {
        let mean = g.column(c).sum() / n as f64;
        for r in 0..n {
            g[(r, c)] -= mean;
        }
    }
    // Orthonormal columns spanning the centered column space: distinct
    // columns are exactly uncorrelated over the sample index.
    let q = g.qr().q();
    let scales: Vec<f64> = (0..dims).map(|_| rng.gen_range(0.5..1.5) * (n as f64).sqrt()).collect();

    let readout = DVector::from_fn(dims, |_, _| normal.sample(rng));
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for t in 0..n {
        let mut sample = Vec::with_capacity(channels);
        let mut flat = DVector::zeros(dims);
        for m in 0..channels {
            let ch = DVector::from_fn(length, |l, _| q[(t, m * length + l)] * scales[m * length + l]);
            for l in 0..length {
                flat[m * length + l] = ch[l];
            }
            sample.push(ch);
        }
        inputs.push(Value::Channels(sample));
        targets.push(Target::Class(usize::from(readout.dot(&flat) > 0.0)));
    }
    Ok((inputs, targets, Some(2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Channel-major reshape of the feature vector: channel `m` takes features
/// `m*length .. (m+1)*length`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub channels: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSpec {
    pub path: String,
    /// Feature column names; defaults to every non-target column.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    pub target: String,
    pub task: TaskKind,
    /// Per-feature standardization (mean 0, variance 1), fitted on the
    /// training split only. On by default.
    #[serde(default = "default_standardize")]
    pub standardize: bool,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub channels: Option<ChannelLayout>,
    #[serde(default)]
    pub seed: u64,
}

fn default_standardize() -> bool {
    true
}

/// Loads a CSV file (header row, numeric features) into a dataset.
pub fn load_csv(spec: &CsvSpec) -> Result<Dataset> {
    let path = Path::new(&spec.path);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", spec.path)))?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();

    let target_idx = headers
        .iter()
        .position(|h| h == &spec.target)
        .ok_or_else(|| Error::CsvColumn { column: spec.target.clone(), msg: "target column not found".into() })?;

    let feature_names: Vec<String> = match &spec.features {
        Some(cols) => cols.clone(),
        None => headers.iter().filter(|h| *h != &spec.target).cloned().collect(),
    };
    let feature_idx: Vec<usize> = feature_names
        .iter()
        .map(|name| {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::CsvColumn {
                column: name.clone(),
                msg: "feature column not found".into(),
            })
        })
        .collect::<Result<_>>()?;

    if let Some(layout) = &spec.channels {
        if layout.channels * layout.length != feature_idx.len() {
            return Err(Error::Config(format!(
                "channel layout {}x{} does not match {} feature columns",
                layout.channels,
                layout.length,
                feature_idx.len()
            )));
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_targets: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::CsvRow {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(Error::CsvRow {
                line,
                msg: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(feature_idx.len());
        for (&idx, name) in feature_idx.iter().zip(&feature_names) {
            let field = &record[idx];
            let value: f64 = field.parse().map_err(|_| Error::CsvColumn {
                column: name.clone(),
                msg: format!("non-numeric value '{field}' at line {line}"),
            })?;
            row.push(value);
        }
        let target_field = &record[target_idx];
        let target_value: f64 = target_field.parse().map_err(|_| Error::CsvColumn {
            column: spec.target.clone(),
            msg: format!("non-numeric value '{target_field}' at line {line}"),
        })?;
        rows.push(row);
        raw_targets.push(target_value);
    }
    if rows.len() < 2 {
        return Err(Error::Data("csv needs at least 2 data rows".into()));
    }

    let n = rows.len();
    let split = split_tags(n, spec.val_fraction, spec.seed);

    if spec.standardize {
        standardize_in_place(&mut rows, &split);
    }

    let (targets, n_classes) = match spec.task {
        TaskKind::Classification => {
            let mut classes = Vec::with_capacity(n);
            for (i, &v) in raw_targets.iter().enumerate() {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::CsvColumn {
                        column: spec.target.clone(),
                        msg: format!("class labels must be non-negative integers, found {v} in row {}", i + 1),
                    });
                }
                classes.push(v as usize);
            }
            let n_classes = classes.iter().max().copied().unwrap_or(0) + 1;
            (classes.into_iter().map(Target::Class).collect(), Some(n_classes))
        }
        TaskKind::Regression => (
            raw_targets.iter().map(|&v| Target::Vector(DVector::from_element(1, v))).collect(),
            None,
        ),
    };

    let inputs: Vec<Value> = rows
        .into_iter()
        .map(|row| match &spec.channels {
            None => Value::Flat(DVector::from_vec(row)),
            Some(layout) => Value::Channels(
                (0..layout.channels)
                    .map(|m| DVector::from_fn(layout.length, |l, _| row[m * layout.length + l]))
                    .collect(),
            ),
        })
        .collect();

    let data = Dataset {
        inputs,
        targets,
        split,
        n_classes,
        provenance: format!("csv({},seed={})", spec.path, spec.seed),
    };
    data.validate()?;
    Ok(data)
}

/// Mean 0 / variance 1 per feature, with statistics from the training split
/// applied unchanged to validation. Near-constant features are only centered.
fn standardize_in_place(rows: &mut [Vec<f64>], split: &[Split]) {
    let dims = rows[0].len();
    let train_rows: Vec<usize> =
        (0..rows.len()).filter(|&i| split[i] == Split::Train).collect();
    let t = train_rows.len().max(1) as f64;
    for c in 0..dims {
        let mean = train_rows.iter().map(|&r| rows[r][c]).sum::<f64>() / t;
        let var = train_rows.iter().map(|&r| (rows[r][c] - mean).powi(2)).sum::<f64>() / t;
        let std = var.sqrt();
        for row in rows.iter_mut() {
            row[c] -= mean;
            if std > 1e-12 {
                row[c] /= std;
            }
        }
    }
}

/// Dataset source used in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Csv(CsvSpec),
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(spec) => gen_from_spec(spec),
            DatasetSpec::Csv(spec) => load_csv(spec),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_moons_points_lie_on_their_curves() {
        let data = gen_synthetic(SyntheticKind::TwoMoons, 60, 0.0, 3).unwrap();
        let mut class0 = Vec::new();
        let mut class1 = Vec::new();
        for (input, target) in data.inputs.iter().zip(&data.targets) {
            let v = input.as_flat().unwrap();
            let (x, y) = (v[0], v[1]);
            match target {
                Target::Class(0) => {
                    assert_relative_eq!(x * x + y * y, 1.0, epsilon = 1e-12);
                    assert!(y >= -1e-12);
                    class0.push((x, y));
                }
                Target::Class(1) => {
                    assert_relative_eq!((x - 1.0).powi(2) + (y - 0.5).powi(2), 1.0, epsilon = 1e-12);
                    assert!(y <= 0.5 + 1e-12);
                    class1.push((x, y));
                }
                _ => panic!("unexpected target"),
            }
        }
        // Noiseless classes are separated with a clear margin.
        let mut min_dist = f64::MAX;
        for &(x0, y0) in &class0 {
            for &(x1, y1) in &class1 {
                min_dist = min_dist.min(((x0 - x1).powi(2) + (y0 - y1).powi(2)).sqrt());
            }
        }
        assert!(min_dist > 0.4, "min inter-class distance {min_dist}");
    }

    #[test]
    fn same_seed_identical_dataset_and_split() {
        let a = gen_synthetic(SyntheticKind::TwoMoons, 40, 0.1, 9).unwrap();
        let b = gen_synthetic(SyntheticKind::TwoMoons, 40, 0.1, 9).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.split, b.split);
        let c = gen_synthetic(SyntheticKind::TwoMoons, 40, 0.1, 10).unwrap();
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn orthogonal_channels_cross_covariance_is_zero() {
        let (channels, length, n) = (2, 6, 40);
        let data = gen_synthetic(
            SyntheticKind::OrthogonalChannels { channels, length },
            n,
            0.0,
            5,
        )
        .unwrap();
        // Empirical centered cross-channel covariance, every position pair.
        let mut means = vec![DVector::zeros(length); channels];
        for input in &data.inputs {
            for (m, ch) in input.as_channels().unwrap().iter().enumerate() {
                means[m] += ch;
            }
        }
        for mean in &mut means {
            *mean /= n as f64;
        }
        let mut cross = DMatrix::zeros(length, length);
        for input in &data.inputs {
            let chans = input.as_channels().unwrap();
            let c0 = &chans[0] - &means[0];
            let c1 = &chans[1] - &means[1];
            cross += c0 * c1.transpose();
        }
        cross /= n as f64;
        let max_abs = cross.abs().max();
        assert!(max_abs <= 1e-12, "max cross-channel covariance {max_abs}");
    }

    #[test]
    fn orthogonal_channels_needs_enough_samples() {
        assert!(gen_synthetic(
            SyntheticKind::OrthogonalChannels { channels: 2, length: 8 },
            10,
            0.0,
            1
        )
        .is_err());
    }

    #[test]
    fn multichannel_classes_shape_and_determinism() {
        let kind = SyntheticKind::Multichannel1dClasses { channels: 2, length: 12, classes: 3 };
        let a = gen_synthetic(kind.clone(), 30, 0.05, 7).unwrap();
        assert_eq!(a.n_classes, Some(3));
        assert_eq!(a.input_shape(), crate::nn::Shape::Channels { channels: 2, length: 12 });
        let b = gen_synthetic(kind, 30, 0.05, 7).unwrap();
        assert_eq!(a.inputs, b.inputs);
    }

    fn write_csv(dir: &std::path::Path, body: &str) -> String {
        let path = dir.join("data.csv");
        std::fs::write(&path, body).unwrap();
        path.to_string_lossy().into_owned()
    }

    fn toy_spec(path: String) -> CsvSpec {
        CsvSpec {
            path,
            features: None,
            target: "label".into(),
            task: TaskKind::Classification,
            standardize: true,
            val_fraction: 0.5,
            channels: None,
            seed: 3,
        }
    }

    #[test]
    fn four_row_csv_splits_in_half() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "x1,x2,label\n1.0,2.0,0\n2.0,1.0,1\n3.0,4.0,0\n4.0,3.0,1\n");
        let data = load_csv(&toy_spec(path)).unwrap();
        assert_eq!(data.len(), 4);
        assert_eq!(data.indices(Split::Train).len(), 2);
        assert_eq!(data.indices(Split::Validation).len(), 2);
        assert_eq!(data.n_classes, Some(2));
    }

    #[test]
    fn standardization_zeroes_train_means() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(
            dir.path(),
            "x1,x2,label\n1.0,10.0,0\n2.0,20.0,1\n3.0,30.0,0\n4.0,40.0,1\n5.0,50.0,0\n6.0,60.0,1\n",
        );
        let mut spec = toy_spec(path);
        spec.val_fraction = 0.3;
        let data = load_csv(&spec).unwrap();
        let train = data.indices(Split::Train);
        for c in 0..2 {
            let mean: f64 = train
                .iter()
                .map(|&i| data.inputs[i].as_flat().unwrap()[c])
                .sum::<f64>()
                / train.len() as f64;
            assert!(mean.abs() <= 1e-12, "train mean {mean}");
        }
    }

    #[test]
    fn reload_same_seed_same_split() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "x1,x2,label\n1.0,2.0,0\n2.0,1.0,1\n3.0,4.0,0\n4.0,3.0,1\n");
        let a = load_csv(&toy_spec(path.clone())).unwrap();
        let b = load_csv(&toy_spec(path)).unwrap();
        assert_eq!(a.split, b.split);
    }

    #[test]
    fn malformed_rows_and_columns_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let bad_value = write_csv(dir.path(), "x1,label\n1.0,0\nnope,1\n");
        let err = load_csv(&CsvSpec { target: "label".into(), ..toy_spec(bad_value) }).unwrap_err();
        assert!(matches!(err, Error::CsvColumn { .. }), "{err}");

        let missing = CsvSpec { target: "missing".into(), ..toy_spec("/nonexistent.csv".into()) };
        assert!(load_csv(&missing).is_err());
    }

    #[test]
    fn csv_channel_reshape() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(
            dir.path(),
            "a,b,c,d,label\n1,2,3,4,0\n5,6,7,8,1\n9,10,11,12,0\n13,14,15,16,1\n",
        );
        let spec = CsvSpec {
            channels: Some(ChannelLayout { channels: 2, length: 2 }),
            standardize: false,
            ..toy_spec(path)
        };
        let data = load_csv(&spec).unwrap();
        let chans = data.inputs[0].as_channels().unwrap();
        assert_eq!(chans[0].as_slice(), &[1.0, 2.0]);
        assert_eq!(chans[1].as_slice(), &[3.0, 4.0]);
    }
}
