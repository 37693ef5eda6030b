//! End-to-end experiments: train a deep net, fuse neighboring layers, retrain
//! the shallower net, and compare against a randomly initialized net of the
//! same shallow shape over paired trials.
//!
//! Determinism contract: one master seed derives every per-trial seed, trials
//! are independent, and `report.json` is byte-identical across repeated runs
//! of the same config.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::fusion::{fusable_pairs, fuse_plan, fused_spec, rank_pairs, FuseOptions, FuseReport, FusionRanking};
use crate::nn::{
    batch_loss, evaluate, train, Dataset, EpochStats, Network, NetworkSpec, Split, Target,
    TrainConfig, Value,
};

/// Which layer pairs to fuse, or ranking-only mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FusionPlan {
    /// Layer indices of pair starts, applied sequentially; each index refers
    /// to the network as it stands at that step.
    Boundaries(Vec<usize>),
    Mode(PlanMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    RankOnly,
}

impl FusionPlan {
    pub fn boundaries(&self) -> Option<&[usize]> {
        match self {
            FusionPlan::Boundaries(b) => Some(b),
            FusionPlan::Mode(PlanMode::RankOnly) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// The deep network to train in phase 1.
    pub network: NetworkSpec,
    pub fusion_plan: FusionPlan,
    pub phase1: TrainConfig,
    pub phase3: TrainConfig,
    pub trials: usize,
    /// Master seed; every per-trial seed derives from it.
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    /// Scales the FuseInit arm's retraining epochs relative to the random
    /// arm's budget (1.0 = equal budgets).
    #[serde(default = "default_budget_factor")]
    pub budget_factor: f64,
    /// Fused conv filter length override.
    #[serde(default)]
    pub ktilde: Option<usize>,
    /// Cap on samples used for moment estimation.
    #[serde(default)]
    pub moment_samples: Option<usize>,
}

fn default_budget_factor() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("at least one trial is required".into()));
        }
        if !(self.budget_factor > 0.0) {
            return Err(Error::Config("budget factor must be positive".into()));
        }
        self.phase1.validate()?;
        self.phase3.validate()?;
        self.network.propagate_shapes()?;
        if let Some(plan) = self.fusion_plan.boundaries() {
            // Structural dry run; rejects bad plans before any training.
            fused_spec(&self.network, plan)?;
        }
        Ok(())
    }

    /// The shallow architecture the plan produces (the deep spec when the
    /// plan is empty or rank-only).
    pub fn shallow_spec(&self) -> Result<NetworkSpec> {
        match self.fusion_plan.boundaries() {
            Some(plan) => fused_spec(&self.network, plan),
            None => Ok(self.network.clone()),
        }
    }

    fn fuse_options(&self) -> FuseOptions {
        FuseOptions { ktilde: self.ktilde, moment_samples: self.moment_samples }
    }

    fn fused_epochs(&self) -> usize {
        ((self.phase3.epochs as f64) * self.budget_factor).round().max(1.0) as usize
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Splitmix-style seed derivation: independent streams per (tag, index).
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(mix(master) ^ tag) ^ index)
}

const TAG_PHASE1_INIT: u64 = 1;
const TAG_PHASE1_SHUFFLE: u64 = 2;
const TAG_PHASE3_SHUFFLE: u64 = 3;
const TAG_RANDOM_INIT: u64 = 4;
const TAG_RANDOM_SHUFFLE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Deep,
    Fuseinit,
    Random,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Deep => "deep",
            Arm::Fuseinit => "fuseinit",
            Arm::Random => "random",
        }
    }
}

/// One training run inside one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub arm: Arm,
    pub init_seed: u64,
    /// Training-split loss before the first parameter update.
    pub epoch0_train_loss: f64,
    pub epoch0_val_metric: f64,
    pub final_train_loss: f64,
    /// Validation metric after training: accuracy for classification,
    /// validation loss for regression.
    pub final_val_metric: f64,
    /// Epoch 0 is the pre-training state.
    pub curve: Vec<EpochStats>,
    /// Fusion diagnostics (FuseInit arm only): one entry per fused boundary.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fusion: Vec<FuseReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub final_metric_mean: f64,
    /// Sample standard deviation over trials (0 for a single trial).
    pub final_metric_std: f64,
    pub epoch0_loss_mean: f64,
    pub epoch0_loss_std: f64,
    pub per_trial: Vec<TrialRecord>,
}

impl ArmSummary {
    /// Aggregates are always recomputable from the stored per-trial records.
    pub fn from_trials(arm: Arm, per_trial: Vec<TrialRecord>) -> ArmSummary {
        let metrics: Vec<f64> = per_trial.iter().map(|t| t.final_val_metric).collect();
        let losses: Vec<f64> = per_trial.iter().map(|t| t.epoch0_train_loss).collect();
        let (final_metric_mean, final_metric_std) = mean_std(&metrics);
        let (epoch0_loss_mean, epoch0_loss_std) = mean_std(&losses);
        ArmSummary { arm, final_metric_mean, final_metric_std, epoch0_loss_mean, epoch0_loss_std, per_trial }
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Loss,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub arm: Arm,
    pub mean_metric: f64,
    pub std_metric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub metric: MetricKind,
    pub dataset_provenance: String,
    /// Phase-1 deep reference arm.
    pub deep: ArmSummary,
    /// Fused-then-retrained arm (absent in rank-only mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fuseinit: Option<ArmSummary>,
    /// Random-init shallow arm (absent for plain FuseInit runs).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random: Option<ArmSummary>,
    /// Per-epoch mean/std of the validation metric for every arm.
    pub curves: Vec<CurvePoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranking: Option<FusionRanking>,
}

fn metric_kind(data: &Dataset) -> MetricKind {
    if data.n_classes.is_some() {
        MetricKind::Accuracy
    } else {
        MetricKind::Loss
    }
}

fn val_metric(stats: &crate::nn::EvalStats, kind: MetricKind) -> f64 {
    match kind {
        MetricKind::Accuracy => stats.accuracy.unwrap_or(f64::NAN),
        MetricKind::Loss => stats.loss,
    }
}

fn epoch_metric(stats: &EpochStats, kind: MetricKind) -> Option<f64> {
    match kind {
        MetricKind::Accuracy => stats.val_accuracy,
        MetricKind::Loss => stats.val_loss,
    }
}

fn train_split_io(data: &Dataset) -> (Vec<Value>, Vec<Target>) {
    let idx = data.indices(Split::Train);
    (
        idx.iter().map(|&i| data.inputs[i].clone()).collect(),
        idx.iter().map(|&i| data.targets[i].clone()).collect(),
    )
}

/// Trains `net`, recording the pre-training state as epoch 0 of the curve.
fn run_arm(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    kind: MetricKind,
    trial: usize,
    arm: Arm,
    init_seed: u64,
) -> Result<(Network, TrialRecord)> {
    let (train_inputs, train_targets) = train_split_io(data);
    let epoch0_train_loss = batch_loss(net, &train_inputs, &train_targets, cfg.loss)?;
    let epoch0_eval = evaluate(net, data, Split::Validation, cfg.loss)?;
    let epoch0 = EpochStats {
        epoch: 0,
        train_loss: epoch0_train_loss,
        val_loss: Some(epoch0_eval.loss),
        val_accuracy: epoch0_eval.accuracy,
    };
    let (trained, mut curve) = train(net, data, cfg)?;
    let mut full_curve = vec![epoch0.clone()];
    full_curve.append(&mut curve);
    let last = full_curve.last().expect("curve holds at least epoch 0");
    // Evaluated at the final parameters (the curve holds running batch means).
    let final_train_loss = batch_loss(&trained, &train_inputs, &train_targets, cfg.loss)?;
    let record = TrialRecord {
        trial,
        arm,
        init_seed,
        epoch0_train_loss,
        epoch0_val_metric: val_metric(&epoch0_eval, kind),
        final_train_loss,
        final_val_metric: epoch_metric(last, kind).unwrap_or(val_metric(&epoch0_eval, kind)),
        curve: full_curve,
        fusion: Vec::new(),
    };
    Ok((trained, record))
}

struct TrialOutcome {
    deep: TrialRecord,
    fuseinit: TrialRecord,
    random: Option<TrialRecord>,
}

/// Unless the config names a schedule, the rate halves at 75% of the epochs.
fn with_default_schedule(cfg: &TrainConfig) -> TrainConfig {
    let mut cfg = cfg.clone();
    if cfg.lr_schedule.is_empty() && cfg.epochs >= 4 {
        cfg.lr_schedule = vec![crate::nn::LrStep {
            epoch: ((cfg.epochs as f64) * 0.75).ceil() as usize,
            multiplier: 0.5,
        }];
    }
    cfg
}

fn run_trial(
    cfg: &ExperimentConfig,
    data: &Dataset,
    shallow: &NetworkSpec,
    trial: usize,
    with_random_arm: bool,
) -> Result<TrialOutcome> {
    let kind = metric_kind(data);
    let plan = cfg.fusion_plan.boundaries().unwrap_or(&[]);

    // Step 1: train the deep network from random initialization.
    let p1_init = derive_seed(cfg.seed, TAG_PHASE1_INIT, trial as u64);
    let deep_net = cfg.network.random_init(p1_init)?;
    let mut phase1 = with_default_schedule(&cfg.phase1);
    phase1.seed = derive_seed(cfg.seed, TAG_PHASE1_SHUFFLE, trial as u64);
    let (deep_trained, deep_record) = run_arm(&deep_net, data, &phase1, kind, trial, Arm::Deep, p1_init)?;

    // Step 2: estimate moments on the training samples and fuse.
    let train_inputs = data.train_inputs();
    let (fused_net, reports) = fuse_plan(&deep_trained, plan, &train_inputs, &cfg.fuse_options())?;
    if NetworkSpec::of(&fused_net) != *shallow {
        return Err(Error::Config(
            "fused network shape disagrees with the derived shallow spec".into(),
        ));
    }

    // Step 3: retrain; non-fused layers keep their phase-1 parameters.
    let mut phase3 = with_default_schedule(&cfg.phase3);
    phase3.seed = derive_seed(cfg.seed, TAG_PHASE3_SHUFFLE, trial as u64);
    phase3.epochs = cfg.fused_epochs();
    let (_, mut fused_record) = run_arm(&fused_net, data, &phase3, kind, trial, Arm::Fuseinit, p1_init)?;
    fused_record.fusion = reports;

    // Paired baseline: random init of the same shallow shape, same data and
    // split, full phase-3 budget.
    let random = if with_random_arm {
        let rand_init = derive_seed(cfg.seed, TAG_RANDOM_INIT, trial as u64);
        let shallow_net = shallow.random_init(rand_init)?;
        let mut rand_cfg = with_default_schedule(&cfg.phase3);
        rand_cfg.seed = derive_seed(cfg.seed, TAG_RANDOM_SHUFFLE, trial as u64);
        let (_, record) = run_arm(&shallow_net, data, &rand_cfg, kind, trial, Arm::Random, rand_init)?;
        Some(record)
    } else {
        None
    };

    Ok(TrialOutcome { deep: deep_record, fuseinit: fused_record, random })
}

fn aggregate_curves(records: &[&ArmSummary], kind: MetricKind) -> Vec<CurvePoint> {
    let mut curves = Vec::new();
    for summary in records {
        let max_epoch = summary.per_trial.iter().map(|t| t.curve.len()).max().unwrap_or(0);
        for epoch in 0..max_epoch {
            let values: Vec<f64> = summary
                .per_trial
                .iter()
                .filter_map(|t| t.curve.get(epoch))
                .filter_map(|s| epoch_metric(s, kind))
                .collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&values);
            curves.push(CurvePoint { epoch, arm: summary.arm, mean_metric: mean, std_metric: std });
        }
    }
    curves
}

/// Runs the three-step procedure (train deep, fuse, retrain) over all trials,
/// without the random-baseline arm.
pub fn run_fuseinit(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment(cfg, false)
}

/// Runs FuseInit and the paired random-init baseline over all trials.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment(cfg, true)
}

fn run_experiment(cfg: &ExperimentConfig, with_random_arm: bool) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    let kind = metric_kind(&data);

    if cfg.fusion_plan.boundaries().is_none() {
        return rank_only_report(cfg, &data, kind);
    }
    let shallow = cfg.shallow_spec()?;

    let outcomes: Vec<TrialOutcome> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| run_trial(cfg, &data, &shallow, trial, with_random_arm))
        .collect::<Result<_>>()?;

    let deep = ArmSummary::from_trials(Arm::Deep, outcomes.iter().map(|o| o.deep.clone()).collect());
    let fuseinit =
        ArmSummary::from_trials(Arm::Fuseinit, outcomes.iter().map(|o| o.fuseinit.clone()).collect());
    let random = with_random_arm.then(|| {
        ArmSummary::from_trials(
            Arm::Random,
            outcomes.iter().filter_map(|o| o.random.clone()).collect(),
        )
    });

    let mut summaries: Vec<&ArmSummary> = vec![&deep, &fuseinit];
    if let Some(r) = &random {
        summaries.push(r);
    }
    let curves = aggregate_curves(&summaries, kind);

    Ok(ExperimentReport {
        config: cfg.clone(),
        metric: kind,
        dataset_provenance: data.provenance.clone(),
        deep,
        fuseinit: Some(fuseinit),
        random,
        curves,
        ranking: None,
    })
}

/// Rank-only mode: one phase-1 training, then a ranking of every fusable pair.
fn rank_only_report(cfg: &ExperimentConfig, data: &Dataset, kind: MetricKind) -> Result<ExperimentReport> {
    let p1_init = derive_seed(cfg.seed, TAG_PHASE1_INIT, 0);
    let deep_net = cfg.network.random_init(p1_init)?;
    let mut phase1 = with_default_schedule(&cfg.phase1);
    phase1.seed = derive_seed(cfg.seed, TAG_PHASE1_SHUFFLE, 0);
    let (deep_trained, deep_record) = run_arm(&deep_net, data, &phase1, kind, 0, Arm::Deep, p1_init)?;

    let train_inputs = data.train_inputs();
    let pairs = fusable_pairs(&deep_trained);
    let ranking = rank_pairs(&deep_trained, &train_inputs, &pairs)?;

    let deep = ArmSummary::from_trials(Arm::Deep, vec![deep_record]);
    let curves = aggregate_curves(&[&deep], kind);
    Ok(ExperimentReport {
        config: cfg.clone(),
        metric: kind,
        dataset_provenance: data.provenance.clone(),
        deep,
        fuseinit: None,
        random: None,
        curves,
        ranking: Some(ranking),
    })
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table: one row per network depth, FuseInit and Random
    /// columns with mean ± std.
    pub fn table_text(&self) -> String {
        let metric_label = match self.metric {
            MetricKind::Accuracy => "validation accuracy",
            MetricKind::Loss => "validation loss",
        };
        let deep_layers = self.config.network.layers.len();
        let shallow_layers = self
            .config
            .shallow_spec()
            .map(|s| s.layers.len())
            .unwrap_or(deep_layers);
        let trials = self.deep.per_trial.len();
        let mut out = String::new();
        out.push_str(&format!(
            "Dataset: {}   metric: {metric_label} ({trials} trial{})\n\n",
            self.dataset_provenance,
            if trials == 1 { "" } else { "s" }
        ));
        out.push_str(&format!("{:<34}{:>22}{:>22}\n", "Algorithm", "FuseInit", "Random"));
        out.push_str(&format!(
            "{:<34}{:>22}{:>22}\n",
            format!("{deep_layers}-layer (deep reference)"),
            "--",
            format!("{:.4} \u{00b1} {:.4}", self.deep.final_metric_mean, self.deep.final_metric_std),
        ));
        if let (Some(fuse), Some(rand)) = (&self.fuseinit, &self.random) {
            out.push_str(&format!(
                "{:<34}{:>22}{:>22}\n",
                format!("{shallow_layers}-layer (fused)"),
                format!("{:.4} \u{00b1} {:.4}", fuse.final_metric_mean, fuse.final_metric_std),
                format!("{:.4} \u{00b1} {:.4}", rand.final_metric_mean, rand.final_metric_std),
            ));
        } else if let Some(fuse) = &self.fuseinit {
            out.push_str(&format!(
                "{:<34}{:>22}{:>22}\n",
                format!("{shallow_layers}-layer (fused)"),
                format!("{:.4} \u{00b1} {:.4}", fuse.final_metric_mean, fuse.final_metric_std),
                "--",
            ));
        }
        if let Some(ranking) = &self.ranking {
            out.push_str("\nFusion ranking (ascending predicted MSE):\n");
            out.push_str(&format!(
                "{:<10}{:<14}{:>18}{:>18}\n",
                "pair", "kind", "predicted_mse", "normalized"
            ));
            for entry in &ranking.entries {
                out.push_str(&format!(
                    "{:<10}{:<14}{:>18.6e}{:>18.6e}\n",
                    format!("({},{})", entry.boundary.first, entry.boundary.second),
                    format!("{:?}", entry.kind),
                    entry.predicted_mse,
                    entry.normalized_mse,
                ));
            }
        }
        out
    }

    /// `epoch,arm,mean_metric,std_metric` rows for every arm.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("epoch,arm,mean_metric,std_metric\n");
        for point in &self.curves {
            out.push_str(&format!(
                "{},{},{},{}\n",
                point.epoch,
                point.arm.label(),
                point.mean_metric,
                point.std_metric
            ));
        }
        out
    }

    /// Writes report.json, table.txt, and curves.csv into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("table.txt"), self.table_text())?;
        std::fs::write(dir.join("curves.csv"), self.curves_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SyntheticKind, SyntheticSpec};
    use crate::nn::{ActivationKind, LayerSpec, LossKind, ShapeSpec};
    use approx::assert_relative_eq;

    fn small_cfg(plan: FusionPlan, trials: usize) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic(SyntheticSpec {
                kind: SyntheticKind::TwoMoons,
                n: 80,
                noise: 0.1,
                seed: 11,
                val_fraction: 0.25,
            }),
            network: NetworkSpec {
                input_shape: ShapeSpec::Flat { length: 2 },
                layers: vec![
                    LayerSpec::Dense { units: 8, activation: ActivationKind::Relu },
                    LayerSpec::Dense { units: 6, activation: ActivationKind::Relu },
                    LayerSpec::Dense { units: 2, activation: ActivationKind::Softmax },
                ],
            },
            fusion_plan: plan,
            phase1: TrainConfig {
                learning_rate: 0.1,
                momentum: 0.9,
                batch_size: 16,
                epochs: 8,
                seed: 0,
                loss: LossKind::CrossEntropy,
                lr_schedule: vec![],
            },
            phase3: TrainConfig {
                learning_rate: 0.1,
                momentum: 0.9,
                batch_size: 16,
                epochs: 6,
                seed: 0,
                loss: LossKind::CrossEntropy,
                lr_schedule: vec![],
            },
            trials,
            seed: 77,
            out_dir: None,
            budget_factor: 1.0,
            ktilde: None,
            moment_samples: None,
        }
    }

    #[test]
    fn empty_plan_reduces_to_plain_training() {
        let cfg = small_cfg(FusionPlan::Boundaries(vec![]), 2);
        let report = run_fuseinit(&cfg).unwrap();
        let fuse = report.fuseinit.as_ref().unwrap();
        // No fusion happened; the "fused" arm trains the same architecture.
        assert!(fuse.per_trial.iter().all(|t| t.fusion.is_empty()));
        assert_eq!(report.config.shallow_spec().unwrap(), cfg.network);
    }

    /// A purely linear middle pair collapses exactly: the fused net's epoch-0
    /// training loss equals the deep net's final training loss.
    #[test]
    fn linear_pair_collapse_preserves_loss() {
        let mut cfg = small_cfg(FusionPlan::Boundaries(vec![1]), 1);
        cfg.network = NetworkSpec {
            input_shape: ShapeSpec::Flat { length: 2 },
            layers: vec![
                LayerSpec::Dense { units: 8, activation: ActivationKind::Relu },
                LayerSpec::Dense { units: 6, activation: ActivationKind::Identity },
                LayerSpec::Dense { units: 4, activation: ActivationKind::Identity },
                LayerSpec::Dense { units: 2, activation: ActivationKind::Softmax },
            ],
        };
        let report = run_comparison(&cfg).unwrap();
        let deep = &report.deep.per_trial[0];
        let fused = &report.fuseinit.as_ref().unwrap().per_trial[0];
        assert!(
            (deep.final_train_loss - fused.epoch0_train_loss).abs() < 1e-6,
            "deep final {} vs fused epoch-0 {}",
            deep.final_train_loss,
            fused.epoch0_train_loss
        );
        assert!(fused.fusion[0].predicted_mse < 1e-8);
    }

    #[test]
    fn single_trial_reports_zero_std() {
        let cfg = small_cfg(FusionPlan::Boundaries(vec![0]), 1);
        let report = run_comparison(&cfg).unwrap();
        assert_eq!(report.deep.final_metric_std, 0.0);
        assert_eq!(report.fuseinit.unwrap().final_metric_std, 0.0);
        assert_eq!(report.random.unwrap().final_metric_std, 0.0);
    }

    #[test]
    fn equal_budgets_by_default() {
        let cfg = small_cfg(FusionPlan::Boundaries(vec![0]), 1);
        assert_eq!(cfg.fused_epochs(), cfg.phase3.epochs);
        let report = run_comparison(&cfg).unwrap();
        let fuse_epochs = report.fuseinit.unwrap().per_trial[0].curve.len() - 1;
        let rand_epochs = report.random.unwrap().per_trial[0].curve.len() - 1;
        assert_eq!(fuse_epochs, rand_epochs);
    }

    #[test]
    fn budget_factor_scales_fused_epochs() {
        let mut cfg = small_cfg(FusionPlan::Boundaries(vec![0]), 1);
        cfg.budget_factor = 0.5;
        let report = run_comparison(&cfg).unwrap();
        let fuse_epochs = report.fuseinit.unwrap().per_trial[0].curve.len() - 1;
        assert_eq!(fuse_epochs, 3);
    }

    #[test]
    fn repeated_runs_are_byte_identical() {
        let cfg = small_cfg(FusionPlan::Boundaries(vec![0]), 2);
        let a = run_comparison(&cfg).unwrap().to_json().unwrap();
        let b = run_comparison(&cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rank_only_mode_produces_a_ranking() {
        let cfg = small_cfg(FusionPlan::Mode(PlanMode::RankOnly), 1);
        let report = run_comparison(&cfg).unwrap();
        assert!(report.fuseinit.is_none());
        let text = report.table_text();
        assert!(text.contains("Fusion ranking"));
        let ranking = report.ranking.unwrap();
        assert_eq!(ranking.entries.len(), 1); // softmax pair excluded
    }

    #[test]
    fn plan_validation_happens_before_training() {
        let cfg = small_cfg(FusionPlan::Boundaries(vec![2]), 1); // softmax pair
        assert!(matches!(run_comparison(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn aggregates_recomputable_from_trials() {
        let cfg = small_cfg(FusionPlan::Boundaries(vec![0]), 3);
        let report = run_comparison(&cfg).unwrap();
        let fuse = report.fuseinit.unwrap();
        let again = ArmSummary::from_trials(Arm::Fuseinit, fuse.per_trial.clone());
        assert_relative_eq!(fuse.final_metric_mean, again.final_metric_mean);
        assert_relative_eq!(fuse.final_metric_std, again.final_metric_std);
    }

    #[test]
    fn fusion_plan_json_forms() {
        let boundaries: FusionPlan = serde_json::from_str("[0, 1]").unwrap();
        assert_eq!(boundaries, FusionPlan::Boundaries(vec![0, 1]));
        let rank: FusionPlan = serde_json::from_str("\"rank_only\"").unwrap();
        assert_eq!(rank, FusionPlan::Mode(PlanMode::RankOnly));
    }

    #[test]
    fn curves_csv_has_header_and_arms() {
        let cfg = small_cfg(FusionPlan::Boundaries(vec![0]), 1);
        let report = run_comparison(&cfg).unwrap();
        let csv = report.curves_csv();
        assert!(csv.starts_with("epoch,arm,mean_metric,std_metric\n"));
        assert!(csv.contains(",fuseinit,"));
        assert!(csv.contains(",random,"));
        assert!(csv.contains(",deep,"));
    }
}
