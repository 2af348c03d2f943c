use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::data::{generate_synthetic, Dataset};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::federated::{federated_pipeline, write_round_reports, FederatedConfig, RoundReport};
use crate::jscrc::{Mode, Pipeline};
use crate::rng::{self, stream};
use crate::training::{evaluate_with, train_all, MetricsRecord, TrainConfig};

/// One accuracy measurement of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: Mode,
    /// SNR the model was trained at (and, unless `upper_bound`, evaluated at).
    #[serde(serialize_with = "serialize_snr")]
    pub snr_db: f64,
    pub masked: bool,
    pub fl: bool,
    /// Evaluated with noiseless channels.
    pub upper_bound: bool,
    pub seed: u64,
    pub accuracy: f64,
    /// Checkpoint directory relative to the output directory.
    pub checkpoint: String,
}

fn serialize_snr<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&v.to_string())
    }
}

impl SweepRow {
    pub fn variant(&self) -> Variant {
        Variant {
            masked: self.masked,
            fl: self.fl,
            upper_bound: self.upper_bound,
        }
    }

    fn key_cmp(&self, other: &Self) -> Ordering {
        self.mode
            .cmp(&other.mode)
            .then(self.snr_db.total_cmp(&other.snr_db))
            .then(self.masked.cmp(&other.masked))
            .then(self.fl.cmp(&other.fl))
            .then(self.upper_bound.cmp(&other.upper_bound))
            .then(self.seed.cmp(&other.seed))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// Which rows of a sweep to select.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Variant {
    pub masked: bool,
    pub fl: bool,
    pub upper_bound: bool,
}

impl Variant {
    pub const MATCHED: Variant = Variant {
        masked: false,
        fl: false,
        upper_bound: false,
    };
    pub const MASKED: Variant = Variant {
        masked: true,
        ..Variant::MATCHED
    };
    pub const FL: Variant = Variant {
        fl: true,
        ..Variant::MATCHED
    };
    pub const UPPER_BOUND: Variant = Variant {
        upper_bound: true,
        ..Variant::MATCHED
    };
}

impl SweepResult {
    pub fn select(&self, mode: Mode, snr_db: f64, v: Variant) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| {
            r.mode == mode
                && r.snr_db == snr_db
                && r.masked == v.masked
                && r.fl == v.fl
                && r.upper_bound == v.upper_bound
        })
    }

    /// Mean accuracy over seeds, if any row matches.
    pub fn mean(&self, mode: Mode, snr_db: f64, v: Variant) -> Option<f64> {
        let acc: Vec<f64> = self.select(mode, snr_db, v).map(|r| r.accuracy).collect();
        (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mode", "snr_db", "masked", "fl", "upper_bound", "seed", "accuracy"])?;
        for r in &self.rows {
            w.write_record([
                r.mode.as_str().to_string(),
                r.snr_db.to_string(),
                r.masked.to_string(),
                r.fl.to_string(),
                r.upper_bound.to_string(),
                r.seed.to_string(),
                r.accuracy.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::io("results.csv", e.into_error()))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

fn snr_tag(snr: f64) -> String {
    format!("snr{snr}")
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        context: path.display().to_string(),
        reason: e.to_string(),
    })?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_rounds(reports: &[RoundReport], path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_round_reports(reports, std::io::BufWriter::new(f))
}

/// Train and test splits of one run.
pub fn datasets(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    generate_synthetic(&cfg.dataset_for(seed))
}

/// Training configuration of one run.
pub fn train_config(cfg: &ExperimentConfig, snr_db: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        train_snr_db: snr_db,
        seed,
        ..cfg.train.clone()
    }
}

/// Federated settings of one run.
pub fn federated_config(fl: &FederatedConfig, seed: u64) -> FederatedConfig {
    FederatedConfig { seed, ..fl.clone() }
}

/// Seed of the masking pattern applied to the test split.
pub fn mask_seed(seed: u64) -> u64 {
    rng::derive(seed, &[stream::MASK])
}

struct Cell {
    seed: u64,
    mode: Mode,
    snr: f64,
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell, out: &Path) -> Result<Vec<SweepRow>> {
    let Cell { seed, mode, snr } = *cell;
    let (train, test) = datasets(cfg, seed)?;
    let tc = train_config(cfg, snr, seed);
    let exec = ExecMode::Sequential;
    let name = format!("{}_{}_seed{seed}", mode.as_str(), snr_tag(snr));
    let rel = format!("checkpoints/{name}");
    let dir = out.join(&rel);

    let mut pipeline = Pipeline::new(cfg.dims, mode, seed);
    let records = train_all(&mut pipeline, &train, &tc)?;
    pipeline.save(&dir)?;
    write_metrics(&records, &dir.join("metrics.csv"))?;

    let row = |v: Variant, accuracy: f64, checkpoint: &str| SweepRow {
        mode,
        snr_db: snr,
        masked: v.masked,
        fl: v.fl,
        upper_bound: v.upper_bound,
        seed,
        accuracy,
        checkpoint: checkpoint.to_string(),
    };
    let mut rows = vec![row(
        Variant::MATCHED,
        evaluate_with(&pipeline, &test, snr, seed, exec)?,
        &rel,
    )];
    if cfg.upper_bound {
        let acc = evaluate_with(&pipeline, &test, f64::INFINITY, seed, exec)?;
        rows.push(row(Variant::UPPER_BOUND, acc, &rel));
    }
    if cfg.mask_fraction > 0.0 {
        let masked = test.masked(cfg.mask_fraction, mask_seed(seed))?;
        rows.push(row(
            Variant::MASKED,
            evaluate_with(&pipeline, &masked, snr, seed, exec)?,
            &rel,
        ));
    }
    if let Some(fl) = &cfg.fl {
        if fl.modes.contains(&mode) && fl.snr_sweep.contains(&snr) {
            let fl_rel = format!("{rel}_fl");
            let fl_dir = out.join(&fl_rel);
            let mut fed = Pipeline::new(cfg.dims, mode, seed);
            let reports = federated_pipeline(
                &mut fed,
                &train,
                &tc,
                &federated_config(&fl.federated, seed),
                |p| evaluate_with(p, &test, snr, seed, exec),
                exec,
            )?;
            fed.save(&fl_dir)?;
            write_rounds(&reports, &fl_dir.join("rounds.csv"))?;
            rows.push(row(Variant::FL, evaluate_with(&fed, &test, snr, seed, exec)?, &fl_rel));
        }
    }
    Ok(rows)
}

/// Trains and evaluates every `(seed, mode, snr)` cell, writing checkpoints
/// under `out/checkpoints`, and `out/results.csv` and `out/results.json`.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path, exec: ExecMode) -> Result<SweepResult> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &mode in &cfg.modes {
            for &snr in &cfg.snr_sweep {
                cells.push(Cell { seed, mode, snr });
            }
        }
    }
    let per_cell = exec.try_map(&cells, |_, c| {
        log::info!("cell {} snr {} seed {}", c.mode, c.snr, c.seed);
        run_cell(cfg, c, out)
    })?;
    let mut rows: Vec<SweepRow> = per_cell.into_iter().flatten().collect();
    rows.sort_by(SweepRow::key_cmp);
    let result = SweepResult { rows };
    write_file(&out.join("results.csv"), &result.to_csv()?)?;
    write_file(&out.join("results.json"), &result.to_json()?)?;
    Ok(result)
}

pub(crate) fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
