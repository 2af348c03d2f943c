//! Federated parameter sharing: clients train locally, the relay averages.
//!
//! Transport is simulated in-process. Each round broadcasts the global
//! parameters, runs every client's local update (concurrently when the
//! execution mode allows), and replaces the global model with the weighted
//! average of the returned parameter sets. Aggregation always runs in client
//! index order, so the result does not depend on which client finishes first.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::jscrc::Pipeline;
use crate::numcore::{ParameterSet, Tensor};
use crate::rng::{self, stream};
use crate::training::{run_phase, EpochWindow, Phase, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    IidEqual,
    LabelSkew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Per-client aggregation weights; shard-size proportions when absent.
    pub client_weights: Option<Vec<f64>>,
    pub partition: Partition,
    /// Classes per client under [`Partition::LabelSkew`].
    pub classes_per_client: usize,
    /// Minibatch size of local training in [`federated_pipeline`]; the
    /// centralized batch size when absent.
    pub local_batch_size: Option<usize>,
    /// Stop once global accuracy gains less than 0.1 pp over three rounds.
    pub early_stop: bool,
    pub seed: u64,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            n_clients: 10,
            rounds: 10,
            local_epochs: 1,
            client_weights: None,
            partition: Partition::IidEqual,
            classes_per_client: 2,
            local_batch_size: None,
            early_stop: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Mean training loss of each client's last local epoch; NaN when skipped.
    pub client_losses: Vec<f64>,
    pub global_accuracy: f64,
    /// Cumulative bytes moved so far: 8 bytes per scalar, down and up, per
    /// participating client.
    pub bytes_exchanged: u64,
}

/// Splits `data` into one shard per client. Shards keep the original sample order.
pub fn partition_dataset(data: &Dataset, cfg: &FederatedConfig) -> Result<Vec<Dataset>> {
    let n = cfg.n_clients;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if data.len() < n {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot feed {n} clients",
            data.len()
        )));
    }
    let mut r = rng::rng_from(cfg.seed, &[stream::PARTITION]);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
    match cfg.partition {
        Partition::IidEqual => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut r);
            let (base, extra) = (data.len() / n, data.len() % n);
            // the last `extra` clients take one more sample
            let mut pos = 0;
            for (c, shard) in shards.iter_mut().enumerate() {
                let size = base + usize::from(c >= n - extra);
                shard.extend_from_slice(&idx[pos..pos + size]);
                pos += size;
            }
        }
        Partition::LabelSkew => {
            let k = data.classes();
            let per = cfg.classes_per_client.clamp(1, k);
            let mut classes: Vec<usize> = (0..k).collect();
            classes.shuffle(&mut r);
            let mut holders: Vec<Vec<usize>> = vec![Vec::new(); k];
            for c in 0..n {
                for j in 0..per {
                    let class = classes[(c * per + j) % k];
                    if !holders[class].contains(&c) {
                        holders[class].push(c);
                    }
                }
            }
            let mut next = vec![0usize; k];
            for (i, &label) in data.labels().iter().enumerate() {
                let h = &holders[label];
                let client = if h.is_empty() {
                    label % n
                } else {
                    let c = h[next[label] % h.len()];
                    next[label] += 1;
                    c
                };
                shards[client].push(i);
            }
        }
    }
    Ok(shards
        .into_iter()
        .map(|mut s| {
            s.sort_unstable();
            data.subset(&s)
        })
        .collect())
}

/// Elementwise `sum_i w_i * params_i`. Weights must be nonnegative and sum to 1.
pub fn weighted_average(locals: &[(ParameterSet, f64)]) -> Result<ParameterSet> {
    let Some(((first, w0), rest)) = locals.split_first() else {
        return Err(Error::InvalidArgument("nothing to average".into()));
    };
    if locals.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    let total: f64 = locals.iter().map(|(_, w)| w).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("weights sum to {total}, not 1")));
    }
    for (p, _) in rest {
        first.check_compatible(p)?;
    }
    let mut out = ParameterSet::new();
    for (name, t) in first.iter() {
        let mut acc: Vec<f64> = t.data().iter().map(|v| w0 * v).collect();
        for (p, w) in rest {
            let other = p.get(name).expect("checked compatible");
            for (a, v) in acc.iter_mut().zip(other.data()) {
                *a += w * v;
            }
        }
        out.insert(name, Tensor::new(t.shape().to_vec(), acc)?)?;
    }
    Ok(out)
}

/// Where a local update sits in the federation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalContext {
    pub client: usize,
    pub round: usize,
    pub epochs: usize,
}

/// Client-side training.
pub trait LocalTrainer: Sync {
    /// Trains a copy of `global` on `shard`; returns the new parameters and
    /// the mean loss of the last epoch.
    fn train(&self, global: &ParameterSet, shard: &Dataset, ctx: LocalContext) -> Result<(ParameterSet, f64)>;
}

/// Copy of the global parameters advanced by `ctx.epochs` epochs on `shard`.
pub fn local_update(
    global: &ParameterSet,
    shard: &Dataset,
    trainer: &impl LocalTrainer,
    ctx: LocalContext,
) -> Result<(ParameterSet, f64)> {
    if ctx.epochs == 0 {
        return Ok((global.clone(), f64::NAN));
    }
    let (params, loss) = trainer.train(global, shard, ctx)?;
    global.check_compatible(&params)?;
    Ok((params, loss))
}

fn resolve_weights(cfg: &FederatedConfig, shards: &[Dataset]) -> Result<Vec<f64>> {
    let mut w = match &cfg.client_weights {
        Some(w) => {
            if w.len() != cfg.n_clients {
                return Err(Error::InvalidArgument(format!(
                    "{} weights for {} clients",
                    w.len(),
                    cfg.n_clients
                )));
            }
            if (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 || w.iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidArgument(
                    "client weights must be >= 0 and sum to 1".into(),
                ));
            }
            w.clone()
        }
        None => {
            let total: usize = shards.iter().map(Dataset::len).sum();
            shards.iter().map(|s| s.len() as f64 / total as f64).collect()
        }
    };
    for (c, s) in shards.iter().enumerate() {
        if s.is_empty() {
            log::warn!("client {c} has an empty shard and is skipped");
            w[c] = 0.0;
        }
    }
    let sum: f64 = w.iter().sum();
    if sum <= 0.0 {
        return Err(Error::EmptyDataset("no client with data and positive weight"));
    }
    if (sum - 1.0).abs() > 0.0 {
        for v in &mut w {
            *v /= sum;
        }
    }
    Ok(w)
}

/// Broadcast, local updates, weighted average and evaluation, `cfg.rounds` times.
///
/// `first_round` offsets round numbers (and local epoch windows) when several
/// federations are chained, as in the three-phase pipeline schedule.
pub fn run_federated<T, E>(
    cfg: &FederatedConfig,
    template: &ParameterSet,
    data: &Dataset,
    trainer: &T,
    evaluate: E,
    exec: ExecMode,
) -> Result<(ParameterSet, Vec<RoundReport>)>
where
    T: LocalTrainer,
    E: Fn(&ParameterSet) -> Result<f64>,
{
    let shards = partition_dataset(data, cfg)?;
    run_on_shards(cfg, template, &shards, trainer, evaluate, exec, 0, 0)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_on_shards<T, E>(
    cfg: &FederatedConfig,
    template: &ParameterSet,
    shards: &[Dataset],
    trainer: &T,
    evaluate: E,
    exec: ExecMode,
    round_offset: usize,
    bytes_offset: u64,
) -> Result<(ParameterSet, Vec<RoundReport>)>
where
    T: LocalTrainer,
    E: Fn(&ParameterSet) -> Result<f64>,
{
    let weights = resolve_weights(cfg, shards)?;
    let active: Vec<usize> = (0..shards.len()).filter(|&c| weights[c] > 0.0).collect();
    let per_round = 8 * template.scalar_count() as u64 * 2 * active.len() as u64;
    let mut global = template.clone();
    let mut reports: Vec<RoundReport> = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let results = exec.try_map(&active, |_, &c| {
            let ctx = LocalContext {
                client: c,
                round,
                epochs: cfg.local_epochs,
            };
            local_update(&global, &shards[c], trainer, ctx)
        })?;
        let mut client_losses = vec![f64::NAN; shards.len()];
        let mut locals = Vec::with_capacity(active.len());
        for (&c, (params, loss)) in active.iter().zip(results) {
            client_losses[c] = loss;
            locals.push((params, weights[c]));
        }
        global = weighted_average(&locals)?;
        let global_accuracy = evaluate(&global)?;
        reports.push(RoundReport {
            round: round_offset + round,
            client_losses,
            global_accuracy,
            bytes_exchanged: bytes_offset + per_round * (round as u64 + 1),
        });
        if cfg.early_stop && reports.len() > 3 {
            let last = reports[reports.len() - 1].global_accuracy;
            let before = reports[reports.len() - 4].global_accuracy;
            if last - before < 0.001 {
                break;
            }
        }
    }
    Ok((global, reports))
}

/// Local training of one phase of the relay pipeline.
pub struct PipelinePhaseTrainer<'a> {
    pub template: &'a Pipeline,
    pub phase: Phase,
    pub train: &'a TrainConfig,
    pub lr: f64,
}

impl LocalTrainer for PipelinePhaseTrainer<'_> {
    fn train(&self, global: &ParameterSet, shard: &Dataset, ctx: LocalContext) -> Result<(ParameterSet, f64)> {
        let mut p = self.template.clone();
        p.set_parameters(global)?;
        let window = EpochWindow {
            client: ctx.client as u64,
            first_epoch: ctx.round * ctx.epochs,
            epochs: ctx.epochs,
        };
        let records = run_phase(&mut p, shard, self.train, self.phase, window, self.lr)?;
        let loss = records.last().map_or(f64::NAN, |r| r.loss);
        Ok((p.parameters(), loss))
    }
}

/// Federated three-phase training: every phase runs as its own sequence of
/// rounds with `epochs / local_epochs` rounds, so the total epoch budget
/// matches centralized training.
pub fn federated_pipeline<E>(
    pipeline: &mut Pipeline,
    data: &Dataset,
    train: &TrainConfig,
    fl: &FederatedConfig,
    evaluate: E,
    exec: ExecMode,
) -> Result<Vec<RoundReport>>
where
    E: Fn(&Pipeline) -> Result<f64>,
{
    if fl.local_epochs == 0 {
        return Err(Error::InvalidArgument("local_epochs must be positive".into()));
    }
    let shards = partition_dataset(data, fl)?;
    let local = TrainConfig {
        batch_size: fl.local_batch_size.unwrap_or(train.batch_size),
        ..train.clone()
    };
    let train = &local;
    let mut reports: Vec<RoundReport> = Vec::new();
    for phase in Phase::ALL {
        let epochs = phase.epochs(train);
        if epochs % fl.local_epochs != 0 {
            return Err(Error::InvalidArgument(format!(
                "phase {} epochs ({epochs}) not divisible by local_epochs ({})",
                phase.number(),
                fl.local_epochs
            )));
        }
        let cfg = FederatedConfig {
            rounds: epochs / fl.local_epochs,
            early_stop: false,
            ..fl.clone()
        };
        let template = pipeline.clone();
        let trainer = PipelinePhaseTrainer {
            template: &template,
            phase,
            train,
            lr: phase.learning_rate(train),
        };
        let eval = |p: &ParameterSet| {
            let mut m = template.clone();
            m.set_parameters(p)?;
            evaluate(&m)
        };
        let offset = reports.len();
        let bytes = reports.last().map_or(0, |r| r.bytes_exchanged);
        let (global, mut r) = run_on_shards(
            &cfg,
            &pipeline.parameters(),
            &shards,
            &trainer,
            eval,
            exec,
            offset,
            bytes,
        )?;
        pipeline.set_parameters(&global)?;
        reports.append(&mut r);
    }
    Ok(reports)
}

/// Writes `round,client_0_loss,...,global_accuracy,bytes_exchanged`.
pub fn write_round_reports(reports: &[RoundReport], w: impl std::io::Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let n = reports.first().map_or(0, |r| r.client_losses.len());
    let mut header = vec!["round".to_string()];
    header.extend((0..n).map(|c| format!("client_{c}_loss")));
    header.push("global_accuracy".into());
    header.push("bytes_exchanged".into());
    csv.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.round.to_string()];
        row.extend(r.client_losses.iter().map(f64::to_string));
        row.push(r.global_accuracy.to_string());
        row.push(r.bytes_exchanged.to_string());
        csv.write_record(&row)?;
    }
    csv.flush().map_err(|e| Error::io("round report", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn data(n: usize) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            n_train: n,
            n_test: 10,
            seed: 1,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .0
    }

    fn set(values: &[f64]) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(values.to_vec())).unwrap();
        p
    }

    #[test]
    fn exact_division() {
        let shards = partition_dataset(&data(100), &FederatedConfig::default()).unwrap();
        assert!(shards.iter().all(|s| s.len() == 10));
    }

    #[test]
    fn remainder_goes_to_one_client() {
        let shards = partition_dataset(&data(101), &FederatedConfig::default()).unwrap();
        let mut sizes: Vec<usize> = shards.iter().map(Dataset::len).collect();
        sizes.sort();
        assert_eq!(sizes, [vec![10; 9], vec![11]].concat());
    }

    #[test]
    fn too_small_dataset() {
        assert!(partition_dataset(&data(9), &FederatedConfig::default()).is_err());
    }

    fn multiset(ds: &Dataset) -> Vec<Vec<u64>> {
        let mut rows: Vec<Vec<u64>> = ds
            .samples()
            .map(|s| {
                let mut k: Vec<u64> = s.x_img.iter().chain(&s.x_txt).map(|v| v.to_bits()).collect();
                k.push(s.label as u64);
                k
            })
            .collect();
        rows.sort();
        rows
    }

    #[test]
    fn shards_cover_the_dataset_exactly() {
        let d = data(137);
        for partition in [Partition::IidEqual, Partition::LabelSkew] {
            let cfg = FederatedConfig {
                partition,
                ..FederatedConfig::default()
            };
            let shards = partition_dataset(&d, &cfg).unwrap();
            let mut all = Vec::new();
            for s in &shards {
                all.extend(multiset(s));
            }
            all.sort();
            assert_eq!(all, multiset(&d), "{partition:?}");
        }
    }

    #[test]
    fn label_skew_limits_classes() {
        let cfg = FederatedConfig {
            partition: Partition::LabelSkew,
            classes_per_client: 2,
            n_clients: 5,
            ..FederatedConfig::default()
        };
        for s in partition_dataset(&data(200), &cfg).unwrap() {
            let mut labels = s.labels().to_vec();
            labels.sort();
            labels.dedup();
            assert!(labels.len() <= 2);
        }
    }

    #[test]
    fn averaging_identities() {
        let p = set(&[1.0, -2.0, 0.5]);
        let same = weighted_average(&[(p.clone(), 0.5), (p.clone(), 0.25), (p.clone(), 0.25)]).unwrap();
        assert_eq!(same, p);
        let neg = set(&[-1.0, 2.0, -0.5]);
        let zero = weighted_average(&[(p, 0.5), (neg, 0.5)]).unwrap();
        assert!(zero.get("w").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn averaging_matches_scalar_loop() {
        let sets = [set(&[0.1, 0.2]), set(&[1.5, -3.0]), set(&[7.0, 0.25])];
        let w = [0.5, 0.3, 0.2];
        let avg = weighted_average(&sets.iter().cloned().zip(w).collect::<Vec<_>>()).unwrap();
        for i in 0..2 {
            let mut expect = 0.0;
            for (s, wi) in sets.iter().zip(w) {
                expect += wi * s.get("w").unwrap().data()[i];
            }
            assert!((avg.get("w").unwrap().data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn averaging_rejects_mismatch() {
        let mut other = ParameterSet::new();
        other.insert("v", Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert!(weighted_average(&[(set(&[1.0, 2.0]), 0.5), (other, 0.5)]).is_err());
        assert!(weighted_average(&[(set(&[1.0]), 0.9)]).is_err());
    }

    struct Shift;

    impl LocalTrainer for Shift {
        fn train(&self, global: &ParameterSet, shard: &Dataset, ctx: LocalContext) -> Result<(ParameterSet, f64)> {
            let mut p = global.clone();
            let step = shard.len() as f64 * ctx.epochs as f64;
            for v in p.get_mut("w").unwrap().data_mut() {
                *v += step;
            }
            Ok((p, 0.0))
        }
    }

    #[test]
    fn zero_local_epochs_is_identity() {
        let g = set(&[3.0]);
        let ctx = LocalContext {
            client: 0,
            round: 0,
            epochs: 0,
        };
        assert_eq!(local_update(&g, &data(10), &Shift, ctx).unwrap().0, g);
    }

    #[test]
    fn empty_shard_is_skipped_and_weights_renormalized() {
        let cfg = FederatedConfig {
            n_clients: 3,
            rounds: 1,
            ..FederatedConfig::default()
        };
        let d = data(30);
        let shards = vec![
            d.subset(&(0..10).collect::<Vec<_>>()),
            d.subset(&[]),
            d.subset(&(10..30).collect::<Vec<_>>()),
        ];
        let (g, reports) = run_on_shards(
            &cfg,
            &set(&[0.0]),
            &shards,
            &Shift,
            |_| Ok(0.0),
            ExecMode::Sequential,
            0,
            0,
        )
        .unwrap();
        // shard-size weights 1/3 and 2/3 of steps 10 and 20
        assert!((g.get("w").unwrap().item() - (10.0 / 3.0 + 40.0 / 3.0)).abs() < 1e-12);
        assert!(reports[0].client_losses[1].is_nan());
        assert_eq!(reports[0].bytes_exchanged, 8 * 2 * 2);
    }

    #[test]
    fn bytes_grow_linearly() {
        let cfg = FederatedConfig {
            n_clients: 4,
            rounds: 3,
            ..FederatedConfig::default()
        };
        let (_, r) = run_federated(
            &cfg,
            &set(&[0.0, 0.0]),
            &data(40),
            &Shift,
            |_| Ok(0.5),
            ExecMode::Parallel,
        )
        .unwrap();
        let b: Vec<u64> = r.iter().map(|x| x.bytes_exchanged).collect();
        assert_eq!(b, vec![128, 256, 384]);
    }
}
