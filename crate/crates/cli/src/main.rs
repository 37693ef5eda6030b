//! `fuseinit` — train, fuse, retrain, and compare small networks.
//!
//! Subcommands: `init`, `train`, `fuse`, `retrain`, `eval`, `rank`,
//! `experiment`, `verify`. Most take `--config <json>` (the experiment
//! config schema; see the README). Exit codes: 0 success, 1 usage error,
//! 2 data error, 3 numerical failure.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

use fuseinit_core::error::Error;
use fuseinit_core::fusion::{self, FuseOptions};
use fuseinit_core::moments::Boundary;
use fuseinit_core::nn::{evaluate, train, Model, Split};
use fuseinit_core::pipeline::{self, ExperimentConfig};
use fuseinit_core::Result;

#[derive(Parser)]
#[command(name = "fuseinit", version, about = "MSE-optimal layer fusion for network initialization")]
struct Cli {
    /// Experiment config JSON (schema in the README).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; defaults to the config's out_dir, then "out".
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Worker threads for trial parallelism (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a randomly initialized model from the config's network spec.
    Init,
    /// Train a model (fresh from the spec, or --model) with the phase1 config.
    Train {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Fuse one layer pair of a trained model; writes the fused model and a
    /// diagnostics report.
    Fuse {
        #[arg(long)]
        model: PathBuf,
        /// First layer of the pair (the partner is the next parameterized
        /// layer).
        #[arg(long)]
        at: usize,
        /// Fuse everything from --at through this layer into one dense layer.
        #[arg(long)]
        end: Option<usize>,
        /// Fused conv filter length override.
        #[arg(long)]
        ktilde: Option<usize>,
        /// Cap on samples used for moment estimation.
        #[arg(long)]
        moment_samples: Option<usize>,
    },
    /// Retrain a (fused) model with the phase3 config.
    Retrain {
        #[arg(long)]
        model: PathBuf,
    },
    /// Validation loss/accuracy of a model; with --against, also the
    /// empirical fusion MSE of each fused layer.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// The pre-fusion model the fused layers came from.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Rank every fusable layer pair by predicted fusion MSE.
    Rank {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the full train -> fuse -> retrain comparison over paired trials;
    /// writes report.json, table.txt, and curves.csv.
    Experiment {
        /// Skip the random-init baseline arm.
        #[arg(long)]
        fuseinit_only: bool,
    },
    /// Run the built-in oracle cross-checks and print a pass/fail summary.
    Verify,
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders usage text itself.
            let _ = e.print();
            std::process::exit(1);
        }
    };
    std::process::exit(match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    });
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::NoFusablePair => 1,
        Error::Divergence { .. } | Error::SingularMoments { .. } => 3,
        _ => 2,
    }
}

fn execute(cli: Cli) -> Result<i32> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }

    let config = load_config(&cli)?;
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| config.as_ref().and_then(|c| c.out_dir.clone().map(PathBuf::from)))
        .unwrap_or_else(|| PathBuf::from("out"));

    match &cli.command {
        Command::Init => cmd_init(&require(config)?, &out_dir),
        Command::Train { model } => cmd_train(&require(config)?, model.as_deref(), &out_dir),
        Command::Fuse { model, at, end, ktilde, moment_samples } => cmd_fuse(
            &require(config)?,
            model,
            *at,
            *end,
            FuseOptions { ktilde: *ktilde, moment_samples: *moment_samples },
            &out_dir,
        ),
        Command::Retrain { model } => cmd_retrain(&require(config)?, model, &out_dir),
        Command::Eval { model, against } => cmd_eval(&require(config)?, model, against.as_deref()),
        Command::Rank { model } => cmd_rank(&require(config)?, model, &out_dir),
        Command::Experiment { fuseinit_only } => cmd_experiment(&require(config)?, *fuseinit_only, &out_dir),
        Command::Verify => cmd_verify(),
    }
}

fn load_config(cli: &Cli) -> Result<Option<ExperimentConfig>> {
    let Some(path) = &cli.config else { return Ok(None) };
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(Some(cfg))
}

fn require(config: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    config.ok_or_else(|| Error::Config("--config <json> is required for this subcommand".into()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_curve_csv(path: &Path, curve: &[fuseinit_core::nn::EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for point in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            point.epoch,
            point.train_loss,
            point.val_loss.map_or(String::new(), |v| v.to_string()),
            point.val_accuracy.map_or(String::new(), |v| v.to_string()),
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_init(cfg: &ExperimentConfig, out_dir: &Path) -> Result<i32> {
    ensure_dir(out_dir)?;
    let net = cfg.network.random_init(cfg.seed)?;
    let path = out_dir.join("model_init.json");
    Model::unfused(net).save(&path)?;
    println!("wrote {}", path.display());
    Ok(0)
}

fn cmd_train(cfg: &ExperimentConfig, model: Option<&Path>, out_dir: &Path) -> Result<i32> {
    ensure_dir(out_dir)?;
    let data = cfg.dataset.load()?;
    let net = match model {
        Some(path) => Model::load(path)?.network,
        None => cfg.network.random_init(cfg.seed)?,
    };
    let (trained, curve) = train(&net, &data, &cfg.phase1)?;
    let model_path = out_dir.join("model_trained.json");
    Model::unfused(trained).save(&model_path)?;
    write_curve_csv(&out_dir.join("train_curve.csv"), &curve)?;
    let last = curve.last();
    println!(
        "wrote {} (final train loss {:.6})",
        model_path.display(),
        last.map_or(f64::NAN, |s| s.train_loss)
    );
    Ok(0)
}

fn cmd_fuse(
    cfg: &ExperimentConfig,
    model: &Path,
    at: usize,
    end: Option<usize>,
    opts: FuseOptions,
    out_dir: &Path,
) -> Result<i32> {
    ensure_dir(out_dir)?;
    let data = cfg.dataset.load()?;
    let loaded = Model::load(model)?;
    let inputs = data.train_inputs();
    let (fused_net, report) = match end {
        Some(end) => fusion::fuse_boundary(&loaded.network, Boundary::new(at, end), &inputs, &opts),
        None => fusion::fuse_at(&loaded.network, at, &inputs, &opts),
    }?;

    let mut model_out = Model::unfused(fused_net);
    model_out.provenance[report.fused_layer_index] = Some(fuseinit_core::nn::FusedProvenance {
        fused_from: [report.boundary.first, report.boundary.second],
        predicted_mse: report.predicted_mse,
        ridge_used: report.ridge_used,
    });
    let model_path = out_dir.join("model_fused.json");
    model_out.save(&model_path)?;
    std::fs::write(out_dir.join("fuse_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "wrote {} (predicted fusion mse {:.6e}, empirical {:.6e})",
        model_path.display(),
        report.predicted_mse,
        report.empirical_mse
    );
    Ok(0)
}

fn cmd_retrain(cfg: &ExperimentConfig, model: &Path, out_dir: &Path) -> Result<i32> {
    ensure_dir(out_dir)?;
    let data = cfg.dataset.load()?;
    let loaded = Model::load(model)?;
    let (trained, curve) = train(&loaded.network, &data, &cfg.phase3)?;
    let model_path = out_dir.join("model_retrained.json");
    Model { network: trained, provenance: loaded.provenance }.save(&model_path)?;
    write_curve_csv(&out_dir.join("retrain_curve.csv"), &curve)?;
    println!("wrote {}", model_path.display());
    Ok(0)
}

#[derive(serde::Serialize)]
struct EvalOutput {
    split: &'static str,
    loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    fusion: Vec<FusionEval>,
}

#[derive(serde::Serialize)]
struct FusionEval {
    layer: usize,
    fused_from: [usize; 2],
    predicted_mse: f64,
    empirical_mse: f64,
}

fn cmd_eval(cfg: &ExperimentConfig, model: &Path, against: Option<&Path>) -> Result<i32> {
    let data = cfg.dataset.load()?;
    let loaded = Model::load(model)?;
    let loss_kind = cfg.phase3.loss;
    let stats = evaluate(&loaded.network, &data, Split::Validation, loss_kind)?;

    let mut fusion_evals = Vec::new();
    if let Some(original_path) = against {
        let original = Model::load(original_path)?;
        let inputs = data.train_inputs();
        for (layer_idx, prov) in loaded.provenance.iter().enumerate() {
            let Some(prov) = prov else { continue };
            let empirical = fusion::empirical_fusion_mse(
                &original.network,
                Boundary::new(prov.fused_from[0], prov.fused_from[1]),
                &loaded.network,
                layer_idx,
                &inputs,
            )?;
            fusion_evals.push(FusionEval {
                layer: layer_idx,
                fused_from: prov.fused_from,
                predicted_mse: prov.predicted_mse,
                empirical_mse: empirical,
            });
        }
    }

    let output = EvalOutput {
        split: "validation",
        loss: stats.loss,
        accuracy: stats.accuracy,
        fusion: fusion_evals,
    };
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(0)
}

fn cmd_rank(cfg: &ExperimentConfig, model: &Path, out_dir: &Path) -> Result<i32> {
    ensure_dir(out_dir)?;
    let data = cfg.dataset.load()?;
    let loaded = Model::load(model)?;
    let inputs = data.train_inputs();
    let pairs = fusion::fusable_pairs(&loaded.network);
    let ranking = fusion::rank_pairs(&loaded.network, &inputs, &pairs)?;
    std::fs::write(out_dir.join("ranking.json"), serde_json::to_string_pretty(&ranking)?)?;
    println!("{:<10}{:<14}{:>18}{:>18}", "pair", "kind", "predicted_mse", "normalized");
    for entry in &ranking.entries {
        println!(
            "{:<10}{:<14}{:>18.6e}{:>18.6e}",
            format!("({},{})", entry.boundary.first, entry.boundary.second),
            format!("{:?}", entry.kind),
            entry.predicted_mse,
            entry.normalized_mse,
        );
    }
    Ok(0)
}

fn cmd_experiment(cfg: &ExperimentConfig, fuseinit_only: bool, out_dir: &Path) -> Result<i32> {
    let report = if fuseinit_only {
        pipeline::run_fuseinit(cfg)?
    } else {
        pipeline::run_comparison(cfg)?
    };
    report.write_artifacts(out_dir)?;
    print!("{}", report.table_text());
    println!("\nartifacts in {}", out_dir.display());
    Ok(0)
}

fn cmd_verify() -> Result<i32> {
    let results = fuseinit_core::verify::run_all();
    let mut failures = 0;
    for check in &results {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<26} {}", check.name, check.detail);
        if !check.passed {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("all {} checks passed", results.len());
        Ok(0)
    } else {
        eprintln!("error: {failures} of {} verification checks failed", results.len());
        Ok(3)
    }
}
