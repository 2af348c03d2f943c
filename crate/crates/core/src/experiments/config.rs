//! Experiment configuration: a TOML file parsed into a permissive raw form,
//! then validated into runtime types with every violation reported at once.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{ConfigIssue, Error, Result};
use crate::federated::{FederatedConfig, Partition};
use crate::jscrc::{Mode, PipelineDims};
use crate::scheduler::DEFAULT_ALPHA;
use crate::training::TrainConfig;

/// Federated variant of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlExperiment {
    pub federated: FederatedConfig,
    /// Modes that get a federated row.
    pub modes: Vec<Mode>,
    /// SNRs that get a federated row.
    pub snr_sweep: Vec<f64>,
}

/// Cluster settings of the balance simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub alpha: f64,
    pub default_capacity: f64,
    pub capacities: BTreeMap<String, f64>,
    /// Resource budget split by contribution each tick.
    pub budget: f64,
    /// Contribution scores by device; missing devices score 1.
    pub scores: BTreeMap<String, f64>,
    pub edge_cap: Option<f64>,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            default_capacity: 1.0,
            capacities: BTreeMap::new(),
            budget: 1.0,
            scores: BTreeMap::new(),
            edge_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: SyntheticSpec,
    pub dims: PipelineDims,
    pub train: TrainConfig,
    pub snr_sweep: Vec<f64>,
    pub modes: Vec<Mode>,
    pub mask_fraction: f64,
    pub upper_bound: bool,
    pub seeds: Vec<u64>,
    pub fl: Option<FlExperiment>,
    pub balance: BalanceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let snr_sweep = vec![-10.0, -5.0, 0.0, 5.0, 10.0];
        Self {
            dataset: SyntheticSpec::default(),
            dims: PipelineDims::default(),
            train: TrainConfig::default(),
            snr_sweep: snr_sweep.clone(),
            modes: Mode::ALL.to_vec(),
            mask_fraction: 0.5,
            upper_bound: true,
            seeds: (0..5).collect(),
            fl: Some(FlExperiment {
                federated: FederatedConfig {
                    local_batch_size: Some(4),
                    ..FederatedConfig::default()
                },
                modes: vec![Mode::Dtcn],
                snr_sweep,
            }),
            balance: BalanceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Dataset spec of one run; the generator seed mixes in the run seed.
    pub fn dataset_for(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed: crate::rng::derive(self.dataset.seed, &[crate::rng::stream::DATA, seed]),
            ..self.dataset.clone()
        }
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Format {
            context: origin.to_string(),
            reason: e.to_string(),
        })?;
        raw.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }
}

/// Parses and validates the file at `path`.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    seeds: Vec<i64>,
    snr_sweep: Vec<f64>,
    modes: Vec<String>,
    mask_fraction: f64,
    upper_bound: bool,
    dataset: RawDataset,
    pipeline: RawPipeline,
    train: RawTrain,
    fl: Option<RawFl>,
    balance: RawBalance,
}

impl Default for RawConfig {
    fn default() -> Self {
        let d = ExperimentConfig::default();
        Self {
            seeds: d.seeds.iter().map(|&s| s as i64).collect(),
            snr_sweep: d.snr_sweep,
            modes: d.modes.iter().map(|m| m.as_str().to_string()).collect(),
            mask_fraction: d.mask_fraction,
            upper_bound: d.upper_bound,
            dataset: RawDataset::default(),
            pipeline: RawPipeline::default(),
            train: RawTrain::default(),
            fl: None,
            balance: RawBalance::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawDataset {
    classes: i64,
    img_dim: i64,
    txt_dim: i64,
    separation: f64,
    sigma_a: f64,
    sigma_b: f64,
    rho: f64,
    n_train: i64,
    n_test: i64,
    seed: i64,
}

impl Default for RawDataset {
    fn default() -> Self {
        let d = SyntheticSpec::default();
        Self {
            classes: d.classes as i64,
            img_dim: d.img_dim as i64,
            txt_dim: d.txt_dim as i64,
            separation: d.separation,
            sigma_a: d.sigma_a,
            sigma_b: d.sigma_b,
            rho: d.rho,
            n_train: d.n_train as i64,
            n_test: d.n_test as i64,
            seed: d.seed as i64,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawPipeline {
    img_dim: Option<i64>,
    txt_dim: Option<i64>,
    classes: Option<i64>,
    d_sem: i64,
    d_txt: i64,
    d_fused: i64,
    n_sym1: i64,
    n_sym2: i64,
    hidden: i64,
}

impl Default for RawPipeline {
    fn default() -> Self {
        let d = PipelineDims::default();
        Self {
            img_dim: None,
            txt_dim: None,
            classes: None,
            d_sem: d.d_sem as i64,
            d_txt: d.d_txt as i64,
            d_fused: d.d_fused as i64,
            n_sym1: d.n_sym1 as i64,
            n_sym2: d.n_sym2 as i64,
            hidden: d.hidden as i64,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawTrain {
    phase_epochs: Vec<i64>,
    learning_rates: Vec<f64>,
    batch_size: i64,
    momentum: f64,
}

impl Default for RawTrain {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            phase_epochs: d.phase_epochs.iter().map(|&e| e as i64).collect(),
            learning_rates: d.learning_rates.to_vec(),
            batch_size: d.batch_size as i64,
            momentum: d.momentum,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawFl {
    n_clients: i64,
    local_epochs: i64,
    local_batch_size: Option<i64>,
    client_weights: Option<Vec<f64>>,
    partition: String,
    classes_per_client: i64,
    modes: Vec<String>,
    snr_sweep: Option<Vec<f64>>,
}

impl Default for RawFl {
    fn default() -> Self {
        let d = FederatedConfig::default();
        Self {
            n_clients: d.n_clients as i64,
            local_epochs: d.local_epochs as i64,
            local_batch_size: None,
            client_weights: None,
            partition: "iid_equal".into(),
            classes_per_client: d.classes_per_client as i64,
            modes: vec![Mode::Dtcn.as_str().into()],
            snr_sweep: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawBalance {
    alpha: f64,
    default_capacity: f64,
    capacities: BTreeMap<String, f64>,
    budget: f64,
    scores: BTreeMap<String, f64>,
    edge_cap: Option<f64>,
}

impl Default for RawBalance {
    fn default() -> Self {
        let d = BalanceConfig::default();
        Self {
            alpha: d.alpha,
            default_capacity: d.default_capacity,
            capacities: d.capacities,
            budget: d.budget,
            scores: d.scores,
            edge_cap: d.edge_cap,
        }
    }
}

#[derive(Default)]
struct Issues(Vec<ConfigIssue>);

impl Issues {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(ConfigIssue {
            field: field.into(),
            message: message.into(),
        });
    }

    fn count(&mut self, field: &str, v: i64, min: i64) -> usize {
        if v < min {
            self.push(field, format!("must be at least {min}, got {v}"));
        }
        v.max(0) as usize
    }

    fn real(&mut self, field: &str, v: f64, lo: f64, hi: f64) -> f64 {
        if !(lo..=hi).contains(&v) {
            self.push(field, format!("must lie in [{lo}, {hi}], got {v}"));
        }
        v
    }

    fn modes(&mut self, field: &str, names: &[String]) -> Vec<Mode> {
        if names.is_empty() {
            self.push(field, "must list at least one mode");
        }
        let mut out = Vec::new();
        for (i, n) in names.iter().enumerate() {
            match n.parse::<Mode>() {
                Ok(m) if out.contains(&m) => self.push(format!("{field}[{i}]"), format!("duplicate mode {n}")),
                Ok(m) => out.push(m),
                Err(_) => self.push(format!("{field}[{i}]"), format!("unknown mode {n:?}")),
            }
        }
        out
    }

    fn snrs(&mut self, field: &str, snrs: &[f64]) {
        if snrs.is_empty() {
            self.push(field, "must contain at least one SNR");
        }
        for (i, s) in snrs.iter().enumerate() {
            if s.is_nan() || *s == f64::NEG_INFINITY {
                self.push(format!("{field}[{i}]"), format!("invalid SNR {s}"));
            }
        }
    }
}

impl RawConfig {
    fn validate(self) -> Result<ExperimentConfig> {
        let mut is = Issues::default();

        if self.seeds.is_empty() {
            is.push("seeds", "must contain at least one seed");
        }
        let seeds: Vec<u64> = self
            .seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| is.count(&format!("seeds[{i}]"), s, 0) as u64)
            .collect();
        is.snrs("snr_sweep", &self.snr_sweep);
        let modes = is.modes("modes", &self.modes);
        let mask_fraction = is.real("mask_fraction", self.mask_fraction, 0.0, 1.0);

        let r = &self.dataset;
        let dataset = SyntheticSpec {
            classes: is.count("dataset.classes", r.classes, 2),
            img_dim: is.count("dataset.img_dim", r.img_dim, 1),
            txt_dim: is.count("dataset.txt_dim", r.txt_dim, 1),
            separation: r.separation,
            sigma_a: is.real("dataset.sigma_a", r.sigma_a, 0.0, f64::MAX),
            sigma_b: is.real("dataset.sigma_b", r.sigma_b, 0.0, f64::MAX),
            rho: is.real("dataset.rho", r.rho, 0.0, 1.0),
            n_train: is.count("dataset.n_train", r.n_train, 1),
            n_test: is.count("dataset.n_test", r.n_test, 1),
            seed: is.count("dataset.seed", r.seed, 0) as u64,
        };
        if !(r.separation > 0.0 && r.separation.is_finite()) {
            is.push("dataset.separation", format!("must be positive, got {}", r.separation));
        }

        let p = &self.pipeline;
        for (field, given, expect) in [
            ("pipeline.img_dim", p.img_dim, dataset.img_dim),
            ("pipeline.txt_dim", p.txt_dim, dataset.txt_dim),
            ("pipeline.classes", p.classes, dataset.classes),
        ] {
            if let Some(g) = given {
                if g != expect as i64 {
                    is.push(field, format!("{g} does not match the dataset ({expect})"));
                }
            }
        }
        let dims = PipelineDims {
            img_dim: dataset.img_dim,
            txt_dim: dataset.txt_dim,
            classes: dataset.classes,
            d_sem: is.count("pipeline.d_sem", p.d_sem, 1),
            d_txt: is.count("pipeline.d_txt", p.d_txt, 1),
            d_fused: is.count("pipeline.d_fused", p.d_fused, 1),
            n_sym1: is.count("pipeline.n_sym1", p.n_sym1, 1),
            n_sym2: is.count("pipeline.n_sym2", p.n_sym2, 1),
            hidden: is.count("pipeline.hidden", p.hidden, 1),
        };

        let t = &self.train;
        let mut phase_epochs = [0usize; 3];
        if t.phase_epochs.len() != 3 {
            is.push(
                "train.phase_epochs",
                format!("needs 3 entries, got {}", t.phase_epochs.len()),
            );
        }
        for (i, &e) in t.phase_epochs.iter().enumerate().take(3) {
            phase_epochs[i] = is.count(&format!("train.phase_epochs[{i}]"), e, 0);
        }
        let mut learning_rates = [0.0; 3];
        if t.learning_rates.len() != 3 {
            is.push(
                "train.learning_rates",
                format!("needs 3 entries, got {}", t.learning_rates.len()),
            );
        }
        for (i, &lr) in t.learning_rates.iter().enumerate().take(3) {
            learning_rates[i] = is.real(&format!("train.learning_rates[{i}]"), lr, 0.0, f64::MAX);
        }
        if !(0.0..1.0).contains(&t.momentum) {
            is.push("train.momentum", format!("must lie in [0, 1), got {}", t.momentum));
        }
        let train = TrainConfig {
            phase_epochs,
            learning_rates,
            batch_size: is.count("train.batch_size", t.batch_size, 1),
            momentum: t.momentum,
            train_snr_db: 0.0,
            seed: 0,
        };

        let fl = self.fl.map(|f| {
            let n_clients = is.count("fl.n_clients", f.n_clients, 1);
            if n_clients > dataset.n_train {
                is.push(
                    "fl.n_clients",
                    format!("{n_clients} clients exceed {} training samples", dataset.n_train),
                );
            }
            let local_epochs = is.count("fl.local_epochs", f.local_epochs, 1);
            if local_epochs > 0 {
                for (i, e) in phase_epochs.iter().enumerate() {
                    if e % local_epochs != 0 {
                        is.push(
                            "fl.local_epochs",
                            format!("does not divide train.phase_epochs[{i}] = {e}"),
                        );
                    }
                }
            }
            if let Some(w) = &f.client_weights {
                if w.len() != n_clients {
                    is.push(
                        "fl.client_weights",
                        format!("{} weights for {n_clients} clients", w.len()),
                    );
                }
                if w.iter().any(|v| v.is_nan() || *v < 0.0) {
                    is.push("fl.client_weights", "weights must be nonnegative");
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    is.push("fl.client_weights", format!("weights sum to {sum}, expected 1"));
                }
            }
            let partition = match f.partition.as_str() {
                "iid_equal" => Partition::IidEqual,
                "label_skew" => Partition::LabelSkew,
                other => {
                    is.push("fl.partition", format!("unknown partition {other:?}"));
                    Partition::IidEqual
                }
            };
            let snr_sweep = f.snr_sweep.unwrap_or_else(|| self.snr_sweep.clone());
            is.snrs("fl.snr_sweep", &snr_sweep);
            FlExperiment {
                federated: FederatedConfig {
                    n_clients,
                    local_epochs,
                    client_weights: f.client_weights.clone(),
                    partition,
                    classes_per_client: is.count("fl.classes_per_client", f.classes_per_client, 1),
                    local_batch_size: f.local_batch_size.map(|b| is.count("fl.local_batch_size", b, 1)),
                    // rounds and seed are set per phase and per run
                    ..FederatedConfig::default()
                },
                modes: is.modes("fl.modes", &f.modes),
                snr_sweep,
            }
        });

        let b = &self.balance;
        let balance = BalanceConfig {
            alpha: is.real("balance.alpha", b.alpha, 0.0, 1.0),
            default_capacity: b.default_capacity,
            capacities: b.capacities.clone(),
            budget: is.real("balance.budget", b.budget, 0.0, f64::MAX),
            scores: b.scores.clone(),
            edge_cap: b.edge_cap,
        };
        if !(b.default_capacity.is_finite() && b.default_capacity > 0.0) {
            is.push(
                "balance.default_capacity",
                format!("must be positive, got {}", b.default_capacity),
            );
        }
        for (id, c) in &b.capacities {
            if !(c.is_finite() && *c > 0.0) {
                is.push(format!("balance.capacities.{id}"), format!("must be positive, got {c}"));
            }
        }
        for (id, s) in &b.scores {
            if !(s.is_finite() && *s >= 0.0) {
                is.push(format!("balance.scores.{id}"), format!("must be nonnegative, got {s}"));
            }
        }
        if let Some(c) = b.edge_cap {
            if c.is_nan() || c < 0.0 {
                is.push("balance.edge_cap", format!("must be nonnegative, got {c}"));
            }
        }

        if !is.0.is_empty() {
            return Err(Error::Config(is.0));
        }
        Ok(ExperimentConfig {
            dataset,
            dims,
            train,
            snr_sweep: self.snr_sweep,
            modes,
            mask_fraction,
            upper_bound: self.upper_bound,
            seeds,
            fl,
            balance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn issues(text: &str) -> Vec<ConfigIssue> {
        match ExperimentConfig::from_toml(text, "test") {
            Err(Error::Config(v)) => v,
            other => panic!("expected config issues, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults_without_fl() {
        let cfg = ExperimentConfig::from_toml("", "test").unwrap();
        assert_eq!(cfg.fl, None);
        assert_eq!(cfg.dataset, SyntheticSpec::default());
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn negative_snr_fine_negative_epochs_not() {
        let v = issues("snr_sweep = [-10.0, -5.0]\n[train]\nphase_epochs = [20, -1, 20]\n");
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "train.phase_epochs[1]");
    }

    #[test]
    fn unnormalized_weights_name_the_field() {
        let v = issues("[fl]\nn_clients = 2\nclient_weights = [0.5, 0.4]\n");
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "fl.client_weights");
        assert!(v[0].message.contains("0.9"));
    }

    #[test]
    fn all_violations_reported() {
        let v = issues("seeds = []\nmodes = [\"dtcn\", \"bogus\"]\nmask_fraction = 2.0\n[dataset]\nclasses = 1\n[pipeline]\nimg_dim = 3\n");
        let fields: Vec<&str> = v.iter().map(|i| i.field.as_str()).collect();
        assert_eq!(
            fields,
            [
                "seeds",
                "modes[1]",
                "mask_fraction",
                "dataset.classes",
                "pipeline.img_dim"
            ]
        );
    }

    #[test]
    fn syntax_errors_are_format_errors() {
        assert!(matches!(
            ExperimentConfig::from_toml("seeds = [", "x"),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("nonsense = 1", "x"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn indivisible_local_epochs() {
        let v = issues("[train]\nphase_epochs = [20, 20, 15]\n[fl]\nlocal_epochs = 2\n");
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("phase_epochs[2]"));
    }
}
