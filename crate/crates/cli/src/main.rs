//! `datforecast`: batch pipeline driver.
//!
//! Stages: `gen-phantom` → `preprocess` → `train-encoder` → `train-diffusion`
//! → `forecast` / `evaluate`. Every stage writes its artifacts plus one
//! `manifest.json` under `--out`, reads upstream artifacts through their
//! manifests, and is deterministic given identical inputs and seed.
//!
//! Exit codes: 0 success, 2 usage/configuration, 3 data validation or missing
//! artifacts, 4 numeric failure.

mod config;
mod manifest;

use clap::{Parser, Subcommand};
use ndarray::Array3;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use datforecast::dataset::{Split, SubjectRecord};
use datforecast::eval::{build_report, forecast_records, report_to_csv, report_to_table, EvalItem};
use datforecast::io::{
    load_cohort, save_cohort, write_tensor_f32, write_triptych_png, Checkpoint, CheckpointBuilder,
};
use datforecast::ledd::{train_autoencoder, LeddAutoencoder};
use datforecast::phantom::generate_phantom_cohort;
use datforecast::preprocess::preprocess_record;
use datforecast::train::{load_trainer, run_training, save_trainer, Trainer};
use datforecast::{DatError, Result};

use config::CliConfig;
use manifest::RunContext;

#[derive(Parser)]
#[command(
    name = "datforecast",
    version,
    about = "Treatment-conditioned diffusion forecasting of DaTscan slices",
    after_help = "Every config key can be overridden via DATFORECAST_<SECTION>_<KEY> \
                  environment variables (arrays comma-separated). All runs are \
                  deterministic given identical inputs and seeds."
)]
struct Cli {
    /// TOML configuration file; omitted sections use compiled defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the active stage's seed (generation, training, or sampling).
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Compute device. This build is CPU-only.
    #[arg(long, global = true, default_value = "cpu", value_name = "STR")]
    device: String,

    /// Accepted for compatibility; execution is always deterministic.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generates a synthetic cohort with a known treatment→decay law.
    GenPhantom {
        /// Output directory (cohort lands under `<out>/cohort`).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Overrides `phantom.n_subjects`.
        #[arg(long, value_name = "N")]
        subjects: Option<usize>,
    },
    /// Applies soft-mask denoising and recomputes ROI masks for a cohort.
    Preprocess {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Cohort directory produced by `gen-phantom` (or a prior stage).
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
    },
    /// Trains the dose-sequence autoencoder on the cohort's train split.
    TrainEncoder {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
    },
    /// Trains the conditional diffusion denoiser.
    TrainDiffusion {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
        /// Encoder checkpoint from `train-encoder`.
        #[arg(long, value_name = "FILE")]
        encoder: PathBuf,
    },
    /// Samples month-12 forecasts for one cohort split.
    Forecast {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
        /// Trainer checkpoint from `train-diffusion`.
        #[arg(long, value_name = "FILE")]
        trainer: PathBuf,
        #[arg(long, value_name = "FILE")]
        encoder: PathBuf,
        /// Split to forecast (defaults to `eval.split` from the config).
        #[arg(long, value_name = "NAME")]
        split: Option<String>,
        /// Reverse-process steps (defaults to `eval.steps`).
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
    },
    /// Forecasts a split and scores it against ground truth.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
        #[arg(long, value_name = "FILE")]
        trainer: PathBuf,
        #[arg(long, value_name = "FILE")]
        encoder: PathBuf,
        #[arg(long, value_name = "NAME")]
        split: Option<String>,
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(match e {
                DatError::Config(_) => 2,
                DatError::Validation(_) | DatError::Format(_) | DatError::Io(_) => 3,
                DatError::Internal(_) => 4,
            });
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.device != "cpu" {
        return Err(DatError::config(format!(
            "unsupported --device `{}`: this build is CPU-only",
            cli.device
        )));
    }
    let cfg = CliConfig::load(cli.config.as_deref())?;
    let config_toml = cfg.canonical_toml()?;
    let config_sha256: String = {
        let digest = Sha256::digest(config_toml.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    };

    match cli.cmd {
        Cmd::GenPhantom { out, subjects } => {
            let mut spec = cfg.phantom.clone();
            if let Some(n) = subjects {
                spec.n_subjects = n;
            }
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            if spec.n_subjects == 0 {
                return Err(DatError::config("--subjects must be at least 1"));
            }
            let mut ctx = RunContext::new("gen-phantom", config_sha256, spec.seed);
            cmd_gen_phantom(&cfg, &spec, &out, &mut ctx)?;
            finish(ctx, &cfg, &config_toml, &out)
        }
        Cmd::Preprocess { out, cohort } => {
            let mut ctx = RunContext::new("preprocess", config_sha256, 0);
            cmd_preprocess(&cfg, &cohort, &out, &mut ctx)?;
            finish(ctx, &cfg, &config_toml, &out)
        }
        Cmd::TrainEncoder { out, cohort } => {
            let mut opts = cfg.encoder_train.clone();
            if let Some(s) = cli.seed {
                opts.seed = s;
            }
            let mut ctx = RunContext::new("train-encoder", config_sha256, opts.seed);
            cmd_train_encoder(&cfg, &opts, &cohort, &out, &mut ctx)?;
            finish(ctx, &cfg, &config_toml, &out)
        }
        Cmd::TrainDiffusion {
            out,
            cohort,
            encoder,
        } => {
            let mut train_cfg = cfg.train.clone();
            if let Some(s) = cli.seed {
                train_cfg.seed = s;
            }
            let mut ctx = RunContext::new("train-diffusion", config_sha256, train_cfg.seed);
            cmd_train_diffusion(&cfg, &train_cfg, &cohort, &encoder, &out, &mut ctx)?;
            finish(ctx, &cfg, &config_toml, &out)
        }
        Cmd::Forecast {
            out,
            cohort,
            trainer,
            encoder,
            split,
            steps,
        } => {
            let seed = cli.seed.unwrap_or(cfg.eval.seed);
            let steps = steps.unwrap_or(cfg.eval.steps);
            let split = parse_split(split.as_deref().unwrap_or(&cfg.eval.split))?;
            let mut ctx = RunContext::new("forecast", config_sha256, seed);
            cmd_forecast(&cohort, &trainer, &encoder, split, steps, seed, &out, &mut ctx)?;
            finish(ctx, &cfg, &config_toml, &out)
        }
        Cmd::Evaluate {
            out,
            cohort,
            trainer,
            encoder,
            split,
            steps,
        } => {
            let seed = cli.seed.unwrap_or(cfg.eval.seed);
            let steps = steps.unwrap_or(cfg.eval.steps);
            let split = parse_split(split.as_deref().unwrap_or(&cfg.eval.split))?;
            let mut ctx = RunContext::new("evaluate", config_sha256, seed);
            cmd_evaluate(&cohort, &trainer, &encoder, split, steps, seed, &out, &mut ctx)?;
            finish(ctx, &cfg, &config_toml, &out)
        }
    }
}

/// Writes the resolved config snapshot and the run manifest.
fn finish(mut ctx: RunContext, _cfg: &CliConfig, config_toml: &str, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let cfg_path = out.join("config.resolved.toml");
    std::fs::write(&cfg_path, config_toml)?;
    ctx.output(cfg_path);
    let path = ctx.finish(out)?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(DatError::config(format!(
            "unknown split `{other}` (expected train, val, or test)"
        ))),
    }
}

/// `2968` → `"2,968"`.
fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn cmd_gen_phantom(
    cfg: &CliConfig,
    spec: &datforecast::phantom::PhantomSpec,
    out: &Path,
    ctx: &mut RunContext,
) -> Result<()> {
    let records = generate_phantom_cohort(spec)?;
    let ids: Vec<String> = records.iter().map(|r| r.subject_id.clone()).collect();
    let splits: HashMap<String, Split> =
        datforecast::dataset::split_subjects(&ids, cfg.split, spec.seed)
            .into_iter()
            .collect();
    let cohort_dir = out.join("cohort");
    save_cohort(&cohort_dir, &records, &splits)?;
    ctx.output(&cohort_dir);

    let pairs: usize = records.iter().map(|r| r.screening.len()).sum();
    println!(
        "generated {} subjects ({} screening/month-12 pairs) under {}",
        thousands(records.len()),
        thousands(pairs),
        cohort_dir.display()
    );
    Ok(())
}

fn cmd_preprocess(cfg: &CliConfig, cohort: &Path, out: &Path, ctx: &mut RunContext) -> Result<()> {
    ctx.input(cohort);
    let (records, manifest) = load_cohort(cohort)?;
    let processed: Vec<SubjectRecord> = records
        .iter()
        .map(|r| preprocess_record(r, &cfg.preprocess))
        .collect::<Result<_>>()?;
    let splits: HashMap<String, Split> = manifest
        .subjects
        .iter()
        .map(|e| (e.id.clone(), e.split))
        .collect();
    let cohort_dir = out.join("cohort");
    save_cohort(&cohort_dir, &processed, &splits)?;
    ctx.output(&cohort_dir);
    println!(
        "preprocessed {} subjects into {}",
        thousands(processed.len()),
        cohort_dir.display()
    );
    Ok(())
}

fn split_records(
    cohort: &Path,
    wanted: Split,
) -> Result<(Vec<SubjectRecord>, Vec<SubjectRecord>)> {
    let (records, manifest) = load_cohort(cohort)?;
    let split_of: HashMap<&str, Split> = manifest
        .subjects
        .iter()
        .map(|e| (e.id.as_str(), e.split))
        .collect();
    let mut selected = Vec::new();
    let mut rest = Vec::new();
    for record in records {
        if split_of.get(record.subject_id.as_str()) == Some(&wanted) {
            selected.push(record);
        } else {
            rest.push(record);
        }
    }
    Ok((selected, rest))
}

const ENCODER_CKPT_KIND: &str = "ledd_autoencoder";

fn cmd_train_encoder(
    cfg: &CliConfig,
    opts: &datforecast::ledd::AutoencoderTrainOptions,
    cohort: &Path,
    out: &Path,
    ctx: &mut RunContext,
) -> Result<()> {
    ctx.input(cohort);
    let (train, _) = split_records(cohort, Split::Train)?;
    if train.is_empty() {
        return Err(DatError::validation("cohort has no train-split subjects"));
    }
    let series: Vec<_> = train.iter().map(|r| r.ledd.clone()).collect();
    let (model, losses) = train_autoencoder(&series, &cfg.encoder, opts)?;

    std::fs::create_dir_all(out)?;
    let ckpt_path = out.join("encoder.ckpt");
    let meta = serde_json::json!({
        "kind": ENCODER_CKPT_KIND,
        "config": cfg.encoder,
        "seed": opts.seed,
        "epochs": losses.len(),
        "final_loss": losses.last().map(|l| l.total),
    });
    let mut builder = CheckpointBuilder::new(meta);
    builder.add_param_set("encoder.", &model.params)?;
    builder.write(&ckpt_path)?;
    ctx.output(&ckpt_path);

    let mut csv = String::from("epoch,total,reconstruction,contrastive\n");
    for l in &losses {
        csv.push_str(&format!("{},{},{},{}\n", l.epoch, l.total, l.rec, l.cl));
    }
    let csv_path = out.join("encoder_losses.csv");
    std::fs::write(&csv_path, csv)?;
    ctx.output(&csv_path);

    let last = losses.last().expect("at least one epoch");
    println!(
        "trained encoder on {} sequences for {} epochs (final loss {:.4}) -> {}",
        thousands(series.len()),
        losses.len(),
        last.total,
        ckpt_path.display()
    );
    Ok(())
}

fn load_encoder(path: &Path) -> Result<LeddAutoencoder<f32>> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some(ENCODER_CKPT_KIND) {
        return Err(DatError::format(format!(
            "{} is not an encoder checkpoint",
            path.display()
        )));
    }
    let cfg: datforecast::ledd::EncoderConfig = ckpt
        .meta
        .get("config")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| DatError::format(format!("bad encoder config in checkpoint: {e}")))?
        .ok_or_else(|| DatError::format("encoder checkpoint lacks a config"))?;
    let mut model = LeddAutoencoder::<f32>::new(&cfg, 0)?;
    ckpt.load_param_set("encoder.", &mut model.params)?;
    Ok(model)
}

fn cmd_train_diffusion(
    cfg: &CliConfig,
    train_cfg: &datforecast::train::TrainConfig,
    cohort: &Path,
    encoder_path: &Path,
    out: &Path,
    ctx: &mut RunContext,
) -> Result<()> {
    ctx.input(cohort);
    ctx.input(encoder_path);
    let encoder = load_encoder(encoder_path)?;
    if encoder.cfg.latent_dim != cfg.unet.treatment_dim {
        return Err(DatError::config(format!(
            "encoder latent dim {} is incompatible with unet.treatment_dim {}",
            encoder.cfg.latent_dim, cfg.unet.treatment_dim
        )));
    }
    let (train, _) = split_records(cohort, Split::Train)?;
    let (val, _) = split_records(cohort, Split::Val)?;
    if train.is_empty() || val.is_empty() {
        return Err(DatError::validation(
            "diffusion training needs non-empty train and val splits",
        ));
    }

    let mut trainer = Trainer::new(cfg.unet.clone(), train_cfg.clone(), cfg.augment.clone())?;
    let history = run_training(&mut trainer, &train, &val, &encoder, Some(out))?;
    let ckpt_path = out.join("trainer.ckpt");
    save_trainer(&ckpt_path, &trainer)?;
    ctx.output(&ckpt_path);
    ctx.output(out.join("model_card.json"));
    ctx.output(out.join("metrics.csv"));

    let last = history.last().expect("at least one epoch");
    println!(
        "trained denoiser for {} epochs ({} train / {} val subjects); final val loss {:.5} -> {}",
        history.len(),
        thousands(train.len()),
        thousands(val.len()),
        last.val_loss,
        ckpt_path.display()
    );
    Ok(())
}

/// Loads the sampling stack and checks cross-stage compatibility.
fn load_stack(
    trainer_path: &Path,
    encoder_path: &Path,
) -> Result<(Trainer, datforecast::unet::UNet<f32>, LeddAutoencoder<f32>)> {
    let trainer = load_trainer(trainer_path)?;
    let encoder = load_encoder(encoder_path)?;
    if encoder.cfg.latent_dim != trainer.unet_cfg.treatment_dim {
        return Err(DatError::config(format!(
            "encoder latent dim {} does not match the denoiser's treatment dim {}",
            encoder.cfg.latent_dim, trainer.unet_cfg.treatment_dim
        )));
    }
    let ema = trainer.ema_model()?;
    Ok((trainer, ema, encoder))
}

#[allow(clippy::too_many_arguments)]
fn cmd_forecast(
    cohort: &Path,
    trainer_path: &Path,
    encoder_path: &Path,
    split: Split,
    steps: usize,
    seed: u64,
    out: &Path,
    ctx: &mut RunContext,
) -> Result<()> {
    ctx.input(cohort);
    ctx.input(trainer_path);
    ctx.input(encoder_path);
    let (trainer, ema, encoder) = load_stack(trainer_path, encoder_path)?;
    let (records, _) = split_records(cohort, split)?;
    if records.is_empty() {
        return Err(DatError::validation(format!(
            "cohort has no {split:?}-split subjects"
        )));
    }

    let items = forecast_records(&ema, &trainer.schedule, &records, &encoder, steps, seed)?;
    let mut by_subject: HashMap<&str, Vec<&EvalItem>> = HashMap::new();
    for item in &items {
        by_subject.entry(item.subject_id.as_str()).or_default().push(item);
    }
    let forecasts_dir = out.join("forecasts");
    let mut ids: Vec<&&str> = by_subject.keys().collect::<Vec<_>>();
    ids.sort();
    for id in ids {
        let mut slices = by_subject[*id].clone();
        slices.sort_by_key(|i| i.slice_index);
        let (h, w) = slices[0].prediction.dim();
        let mut stack = Array3::<f32>::zeros((slices.len(), h, w));
        let mut indices = Vec::with_capacity(slices.len());
        let dir = forecasts_dir.join(id);
        std::fs::create_dir_all(&dir)?;
        for (i, item) in slices.iter().enumerate() {
            stack
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&item.prediction);
            indices.push(item.slice_index);
            datforecast::io::write_heatmap_png(
                &dir.join(format!("forecast_{}.png", item.slice_index)),
                &item.prediction,
                -1.0,
                1.0,
            )?;
        }
        write_tensor_f32(&dir.join("forecast.bin"), stack.view().into_dyn(), Some(&indices))?;
    }
    ctx.output(&forecasts_dir);
    println!(
        "forecast {} slices for {} subjects ({} steps, seed {}) -> {}",
        thousands(items.len()),
        thousands(by_subject.len()),
        steps,
        seed,
        forecasts_dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    cohort: &Path,
    trainer_path: &Path,
    encoder_path: &Path,
    split: Split,
    steps: usize,
    seed: u64,
    out: &Path,
    ctx: &mut RunContext,
) -> Result<()> {
    ctx.input(cohort);
    ctx.input(trainer_path);
    ctx.input(encoder_path);
    let (trainer, ema, encoder) = load_stack(trainer_path, encoder_path)?;
    let (records, _) = split_records(cohort, split)?;
    if records.is_empty() {
        return Err(DatError::validation(format!(
            "cohort has no {split:?}-split subjects"
        )));
    }

    let items = forecast_records(&ema, &trainer.schedule, &records, &encoder, steps, seed)?;
    let report = build_report(&items)?;

    std::fs::create_dir_all(out)?;
    let csv_path = out.join("report.csv");
    std::fs::write(&csv_path, report_to_csv(&report))?;
    ctx.output(&csv_path);
    let table = report_to_table(&report);
    let table_path = out.join("report.txt");
    std::fs::write(&table_path, &table)?;
    ctx.output(&table_path);

    let figures_dir = out.join("figures");
    for item in &items {
        // Panels left to right: screening, ground truth, forecast.
        write_triptych_png(
            &figures_dir.join(format!("{}_slice_{}.png", item.subject_id, item.slice_index)),
            [&item.condition, &item.target, &item.prediction],
            -1.0,
            1.0,
        )?;
    }
    ctx.output(&figures_dir);

    print!("{table}");
    println!(
        "evaluated {} subjects / {} slices ({} steps, seed {}); report -> {}",
        thousands(records.len()),
        thousands(items.len()),
        steps,
        seed,
        csv_path.display()
    );
    Ok(())
}
