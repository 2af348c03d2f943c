use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dtcn_core::data::{generate_synthetic, load_dataset, save_dataset, Dataset};
use dtcn_core::experiments::{
    datasets, federated_config, mask_seed, run_balance_sim, run_sweep, train_config, validate_config, write_metrics,
    write_rounds, ExperimentConfig,
};
use dtcn_core::federated::federated_pipeline;
use dtcn_core::jscrc::{Mode, Pipeline};
use dtcn_core::training::{evaluate_with, train_all};
use dtcn_core::{Error, ExecMode};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dtcn", version, about = "Semantic relay coding simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed; for `sweep` it replaces the configured seed list.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "dtcn")]
    mode: Mode,
    /// Training and evaluation SNR in dB.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    snr: f64,
    /// Directory written by `generate-data`; regenerated from the config when omitted.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/test splits of one seed.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Three-phase centralized training of one mode at one SNR.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Accuracy of a saved checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Evaluation SNR in dB; `inf` for noiseless channels.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        snr: f64,
        /// Fraction of modality-A coordinates to mask.
        #[arg(long, default_value_t = 0.0)]
        mask: f64,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Every configured (seed, mode, SNR) cell with its variants.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Federated three-phase training of one mode at one SNR.
    Federated {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Replay a workload trace with and without balancing.
    BalanceSim {
        #[command(flatten)]
        common: Common,
        /// CSV with columns tick,device_id,workload.
        #[arg(long, value_name = "PATH")]
        trace: PathBuf,
    },
    /// Check a configuration file and list every violation.
    ValidateConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(path) => Ok(validate_config(path)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn exec(common: &Common) -> ExecMode {
    if common.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

fn run_seed(common: &Common, cfg: &ExperimentConfig) -> u64 {
    common.seed.or_else(|| cfg.seeds.first().copied()).unwrap_or(0)
}

fn splits(cfg: &ExperimentConfig, seed: u64, dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match dir {
        Some(d) => Ok((load_dataset(&d.join("train.bin"))?, load_dataset(&d.join("test.bin"))?)),
        None => Ok(datasets(cfg, seed)?),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run_name(mode: Mode, snr: f64, seed: u64) -> String {
    format!("{}_snr{snr}_seed{seed}", mode.as_str())
}

fn generate_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = run_seed(common, &cfg);
    let spec = cfg.dataset_for(seed);
    let (train, test) = generate_synthetic(&spec)?;
    fs::create_dir_all(&common.out)?;
    save_dataset(&train, &common.out.join("train.bin"))?;
    save_dataset(&test, &common.out.join("test.bin"))?;
    write_json(&common.out.join("dataset.json"), &serde_json::to_value(&spec)?)?;
    println!(
        "wrote {} train and {} test samples to {}",
        train.len(),
        test.len(),
        common.out.display()
    );
    Ok(())
}

fn train(common: &Common, run: &RunArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = run_seed(common, &cfg);
    let (train, test) = splits(&cfg, seed, run.data.as_deref())?;
    let tc = train_config(&cfg, run.snr, seed);
    let mut pipeline = Pipeline::new(cfg.dims, run.mode, seed);
    let records = train_all(&mut pipeline, &train, &tc)?;
    let rel = format!("checkpoints/{}", run_name(run.mode, run.snr, seed));
    let dir = common.out.join(&rel);
    pipeline.save(&dir)?;
    write_metrics(&records, &dir.join("metrics.csv"))?;
    let accuracy = evaluate_with(&pipeline, &test, run.snr, seed, exec(common))?;
    write_json(
        &common.out.join("train.json"),
        &json!({ "mode": run.mode, "snr_db": run.snr, "seed": seed, "accuracy": accuracy, "checkpoint": rel }),
    )?;
    println!(
        "{} at {} dB, seed {seed}: test accuracy {accuracy:.4}; checkpoint {}",
        run.mode,
        run.snr,
        dir.display()
    );
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, snr: f64, mask: f64, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = run_seed(common, &cfg);
    let pipeline = Pipeline::load(checkpoint)?;
    let (_, mut test) = splits(&cfg, seed, data)?;
    if mask > 0.0 {
        test = test.masked(mask, mask_seed(seed))?;
    }
    let accuracy = evaluate_with(&pipeline, &test, snr, seed, exec(common))?;
    fs::create_dir_all(&common.out)?;
    write_json(
        &common.out.join("eval.json"),
        &json!({
            "checkpoint": checkpoint.display().to_string(),
            "mode": pipeline.mode,
            "snr_db": snr.to_string(),
            "mask_fraction": mask,
            "seed": seed,
            "accuracy": accuracy,
        }),
    )?;
    println!("accuracy {accuracy:.4}");
    Ok(())
}

fn sweep(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    let res = run_sweep(&cfg, &common.out, exec(common))?;
    println!(
        "{} rows written to {}",
        res.rows.len(),
        common.out.join("results.csv").display()
    );
    Ok(())
}

fn federated(common: &Common, run: &RunArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let Some(fl) = &cfg.fl else {
        bail!("the configuration has no [fl] section");
    };
    let seed = run_seed(common, &cfg);
    let ex = exec(common);
    let (train, test) = splits(&cfg, seed, run.data.as_deref())?;
    let tc = train_config(&cfg, run.snr, seed);
    let mut pipeline = Pipeline::new(cfg.dims, run.mode, seed);
    let reports = federated_pipeline(
        &mut pipeline,
        &train,
        &tc,
        &federated_config(&fl.federated, seed),
        |p| evaluate_with(p, &test, run.snr, seed, ExecMode::Sequential),
        ex,
    )?;
    let rel = format!("checkpoints/{}_fl", run_name(run.mode, run.snr, seed));
    let dir = common.out.join(&rel);
    pipeline.save(&dir)?;
    write_rounds(&reports, &dir.join("rounds.csv"))?;
    let accuracy = reports.last().map_or(f64::NAN, |r| r.global_accuracy);
    let bytes = reports.last().map_or(0, |r| r.bytes_exchanged);
    write_json(
        &common.out.join("federated.json"),
        &json!({
            "mode": run.mode,
            "snr_db": run.snr,
            "seed": seed,
            "clients": fl.federated.n_clients,
            "rounds": reports.len(),
            "accuracy": accuracy,
            "bytes_exchanged": bytes,
            "checkpoint": rel,
        }),
    )?;
    println!(
        "{} rounds, final accuracy {accuracy:.4}, {bytes} bytes exchanged",
        reports.len()
    );
    Ok(())
}

fn balance_sim(common: &Common, trace: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let report = run_balance_sim(trace, &cfg.balance, &common.out)?;
    println!(
        "{} ticks, {} devices: max load {:.3} balanced vs {:.3} unbalanced, mean {:.3} vs {:.3}",
        report.ticks,
        report.devices,
        report.balanced_max,
        report.unbalanced_max,
        report.balanced_mean,
        report.unbalanced_mean
    );
    Ok(())
}

fn validate(common: &Common) -> Result<ExitCode> {
    let Some(path) = &common.config else {
        bail!("validate-config needs --config PATH");
    };
    match validate_config(path) {
        Ok(_) => {
            println!("{}: ok", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(Error::Config(issues)) => {
            for issue in &issues {
                println!("{}: {issue}", path.display());
            }
            Ok(ExitCode::from(2))
        }
        Err(e) => Err(e.into()),
    }
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::GenerateData { common } => generate_data(common)?,
        Command::Train { common, run } => train(common, run)?,
        Command::Eval {
            common,
            checkpoint,
            snr,
            mask,
            data,
        } => eval(common, checkpoint, *snr, *mask, data.as_deref())?,
        Command::Sweep { common } => sweep(common)?,
        Command::Federated { common, run } => federated(common, run)?,
        Command::BalanceSim { common, trace } => balance_sim(common, trace)?,
        Command::ValidateConfig { common } => return validate(common),
    }
    log::debug!("done");
    Ok(ExitCode::SUCCESS)
}
