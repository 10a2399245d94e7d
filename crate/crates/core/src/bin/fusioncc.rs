use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fusioncc::clipfeat::{synthetic_features, write_table, CLIP_DIM};
use fusioncc::pipeline::{gen_synthetic, load_dataset, save_dataset, SyntheticSpec, TemplateFamily};
use fusioncc::runner::{
    check_model_gradients, evaluate, export_attention, resolve_features, train_with, Checkpoint, CostComparison,
    Geometry, TrainConfig,
};
use fusioncc::{Error, Result};

/// Dual-branch ViT contrastive clustering.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value config file or preset name (desk, full, gradcheck).
    #[arg(long, global = true)]
    config: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Config override, e.g. `--set lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory and write the best checkpoint and the log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Cluster a dataset with a checkpoint and write metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write final-block attention maps for one dataset image.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Item id, e.g. `class00/00000.ppm`.
        #[arg(long)]
        id: String,
        #[command(flatten)]
        common: Common,
    },
    /// Attention work and memory of the baseline and fused encoders.
    Cost {
        #[arg(long, default_value_t = 4)]
        depth: u64,
        #[arg(long, default_value_t = 198)]
        tokens: u64,
        #[arg(long, default_value_t = 512)]
        embed: u64,
        #[arg(long, default_value_t = 128)]
        batch: u64,
        #[arg(long, default_value_t = 8)]
        heads: u64,
        /// Count the two branch passes of a shared block once.
        #[arg(long)]
        count_shared_once: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic image dataset, optionally with CLIP-like features.
    GenSynth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 128)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, value_enum, default_value_t = Family::Distinct)]
        family: Family,
        /// Also write `features.clft` with this class separation.
        #[arg(long)]
        class_sep: Option<f64>,
        #[arg(long, default_value_t = 0.1)]
        feature_sigma: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every parameter gradient.
    CheckGrad {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Std of the noise added to the initial weights.
        #[arg(long, default_value_t = 0.3)]
        perturb: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Distinct,
    Confusable,
}

fn config(common: &Common, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        None => base,
        Some(name) if Path::new(name).exists() => TrainConfig::load(name)?,
        Some(name) => TrainConfig::preset(name)?,
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("override {kv:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(|e| Error::Input(format!("cannot create {}: {e}", common.out.display())))?;
    Ok(&common.out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { data, common } => {
            let cfg = config(&common, TrainConfig::desk())?;
            let dataset = load_dataset(&data)?;
            let features = resolve_features(&cfg, &dataset)?;
            let out = out_dir(&common)?;
            let outcome = train_with(&cfg, &dataset, features.as_ref(), |l| eprintln!("{}", l.to_json()))?;
            outcome.best.save(out.join("best.ckpt"))?;
            write(out.join("train_log.jsonl"), outcome.log_jsonl())?;
            write(out.join("config.txt"), cfg.to_text())?;
            println!(
                "best epoch {} of {} (total loss {:.6}){}",
                outcome.best_epoch,
                outcome.log.len(),
                outcome.best.best_loss,
                if outcome.stopped_early { ", stopped early" } else { "" }
            );
        }
        Command::Eval { checkpoint, data, common } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let features = resolve_features(&ckpt.model.config, &dataset)?;
            let report = evaluate(&ckpt, &dataset, features.as_ref())?;
            let out = out_dir(&common)?;
            write(out.join("metrics.txt"), report.to_text())?;
            write(out.join("contingency.csv"), report.contingency_csv())?;
            print!("{}", report.to_text());
        }
        Command::ExportAttention {
            checkpoint,
            data,
            id,
            common,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let item = dataset
                .items
                .iter()
                .find(|i| i.id == id)
                .ok_or_else(|| Error::Input(format!("no item {id:?} in {}", data.display())))?;
            let features = resolve_features(&ckpt.model.config, &dataset)?;
            let seed = common.seed.unwrap_or(ckpt.model.config.seed);
            let written = export_attention(
                &ckpt,
                &item.image,
                features.as_ref().map(|t| (t, id.as_str())),
                out_dir(&common)?,
                seed,
            )?;
            for path in written {
                println!("{}", path.display());
            }
        }
        Command::Cost {
            depth,
            tokens,
            embed,
            batch,
            heads,
            count_shared_once,
            common,
        } => {
            let geometry = Geometry {
                depth,
                tokens,
                embed,
                batch,
                heads,
            };
            let text = CostComparison::new(geometry, count_shared_once).to_text();
            write(out_dir(&common)?.join("cost.txt"), &text)?;
            print!("{text}");
        }
        Command::GenSynth {
            classes,
            per_class,
            side,
            noise,
            family,
            class_sep,
            feature_sigma,
            common,
        } => {
            let spec = SyntheticSpec {
                family: match family {
                    Family::Distinct => TemplateFamily::Distinct,
                    Family::Confusable => TemplateFamily::Confusable,
                },
                ..SyntheticSpec::new(classes, per_class, side, noise)
            };
            let seed = common.seed.unwrap_or(0);
            let dataset = gen_synthetic(&spec, seed)?;
            let out = out_dir(&common)?;
            save_dataset(&dataset, out)?;
            if let Some(sep) = class_sep {
                let table = synthetic_features(&dataset.ids(), &dataset.labels()?, CLIP_DIM, sep, feature_sigma, seed)?;
                write_table(out.join("features.clft"), &table)?;
            }
            println!("{} images in {} classes under {}", dataset.len(), dataset.num_classes(), out.display());
        }
        Command::CheckGrad {
            h,
            perturb,
            tolerance,
            common,
        } => {
            let cfg = config(&common, TrainConfig::gradcheck())?;
            let report = check_model_gradients(&cfg, h, perturb)?;
            println!(
                "checked={} max_rel_error={:.3e} max_abs_error={:.3e} worst={:?}",
                report.checked, report.max_rel_error, report.max_abs_error, report.worst
            );
            if !report.passes(tolerance) {
                return Err(Error::Contract(format!("relative error above {tolerance:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
