use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::Serialize;

use super::config::BalanceConfig;
use crate::error::{Error, Result};
use crate::scheduler::{
    allocate_resources, apply_transfers, balance_workloads_capped, predict_workload, ContributionScore, DeviceState,
};

/// Work arriving at each device, tick by tick.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadTrace {
    /// Device ids in order of first appearance.
    pub devices: Vec<String>,
    /// Arrivals per tick, indexed like `devices`.
    pub ticks: BTreeMap<u64, Vec<f64>>,
}

fn trace_error(line: u64, reason: impl Into<String>) -> Error {
    Error::Trace {
        line: line as usize,
        reason: reason.into(),
    }
}

impl WorkloadTrace {
    /// Parses `tick,device_id,workload` rows after a header line.
    pub fn parse(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let expect = ["tick", "device_id", "workload"];
        if header.iter().map(str::trim).ne(expect) {
            return Err(trace_error(1, format!("header must be {}", expect.join(","))));
        }
        let mut devices: Vec<String> = Vec::new();
        let mut rows: Vec<(u64, usize, f64)> = Vec::new();
        let mut seen: BTreeSet<(u64, usize)> = BTreeSet::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 3 {
                return Err(trace_error(line, format!("expected 3 fields, found {}", rec.len())));
            }
            let tick: u64 = rec[0]
                .trim()
                .parse()
                .map_err(|_| trace_error(line, format!("tick {:?} is not a nonnegative integer", &rec[0])))?;
            let id = rec[1].trim();
            if id.is_empty() {
                return Err(trace_error(line, "empty device id"));
            }
            let w: f64 = rec[2]
                .trim()
                .parse()
                .map_err(|_| trace_error(line, format!("workload {:?} is not a number", &rec[2])))?;
            if !(w.is_finite() && w >= 0.0) {
                return Err(trace_error(
                    line,
                    format!("workload {w} must be finite and nonnegative"),
                ));
            }
            let idx = match devices.iter().position(|d| d == id) {
                Some(i) => i,
                None => {
                    devices.push(id.to_string());
                    devices.len() - 1
                }
            };
            if !seen.insert((tick, idx)) {
                return Err(trace_error(
                    line,
                    format!("duplicate entry for device {id} at tick {tick}"),
                ));
            }
            rows.push((tick, idx, w));
        }
        if devices.is_empty() {
            return Err(trace_error(1, "trace has no rows"));
        }
        let mut ticks: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for (t, d, w) in rows {
            ticks.entry(t).or_insert_with(|| vec![0.0; devices.len()])[d] = w;
        }
        for v in ticks.values_mut() {
            v.resize(devices.len(), 0.0);
        }
        Ok(Self { devices, ticks })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub tick: u64,
    pub device_id: String,
    /// Queued work after arrivals, before transfers.
    pub pre_load: f64,
    /// Queued work after transfers, before processing.
    pub post_load: f64,
    pub allocation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub ticks: usize,
    pub devices: usize,
    pub balanced_max: f64,
    pub balanced_mean: f64,
    pub unbalanced_max: f64,
    pub unbalanced_mean: f64,
    /// Largest per-tick gap between total work before and after transfers.
    pub max_conservation_error: f64,
    #[serde(skip)]
    pub rows: Vec<BalanceRow>,
}

/// Replays `trace` on a cluster with and without balancing.
///
/// Each tick: arrivals join the queues, the next arrivals are predicted by
/// EWMA, a plan is computed on queued plus predicted work, transfers are
/// scaled down so no device sends more than it actually holds, and every
/// device then processes up to its capacity. Normalized load is queued work
/// over capacity just before processing.
pub fn simulate_balance(trace: &WorkloadTrace, cfg: &BalanceConfig) -> Result<BalanceReport> {
    let n = trace.devices.len();
    let capacity: Vec<f64> = trace
        .devices
        .iter()
        .map(|d| cfg.capacities.get(d).copied().unwrap_or(cfg.default_capacity))
        .collect();
    let scores: Vec<ContributionScore> = trace
        .devices
        .iter()
        .map(|d| ContributionScore {
            device: d.clone(),
            score: cfg.scores.get(d).copied().unwrap_or(1.0),
        })
        .collect();
    let allocation = allocate_resources(&scores, cfg.budget)?;

    let mut queue = vec![0.0; n];
    let mut plain = vec![0.0; n];
    let mut history: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut rows = Vec::with_capacity(trace.ticks.len() * n);
    let (mut bal_max, mut bal_sum, mut raw_max, mut raw_sum, mut cons) = (0.0f64, 0.0, 0.0f64, 0.0, 0.0f64);

    for (&tick, arrivals) in &trace.ticks {
        let mut devices = Vec::with_capacity(n);
        for i in 0..n {
            queue[i] += arrivals[i];
            plain[i] += arrivals[i];
            history[i].push(arrivals[i]);
            let mut d = DeviceState::new(trace.devices[i].clone(), queue[i], capacity[i]);
            d.predicted = predict_workload(&history[i], cfg.alpha)?;
            d.history = history[i].clone();
            devices.push(d);
        }
        let mut plan = balance_workloads_capped(&devices, cfg.edge_cap)?;
        for (i, d) in devices.iter().enumerate() {
            let out = plan.outgoing(i);
            if out > d.workload {
                plan.scale_outgoing(i, d.workload / out);
            }
        }
        let real: Vec<DeviceState> = devices
            .iter()
            .map(|d| DeviceState {
                predicted: 0.0,
                ..d.clone()
            })
            .collect();
        let after = apply_transfers(&real, &plan)?;
        let before: f64 = queue.iter().sum();
        let total: f64 = after.iter().map(|d| d.workload).sum();
        cons = cons.max((total - before).abs());
        for i in 0..n {
            let post = after[i].workload;
            rows.push(BalanceRow {
                tick,
                device_id: trace.devices[i].clone(),
                pre_load: queue[i],
                post_load: post,
                allocation: allocation[i],
            });
            let (b, r) = (post / capacity[i], plain[i] / capacity[i]);
            bal_max = bal_max.max(b);
            raw_max = raw_max.max(r);
            bal_sum += b;
            raw_sum += r;
            queue[i] = (post - capacity[i]).max(0.0);
            plain[i] = (plain[i] - capacity[i]).max(0.0);
        }
    }
    let count = (trace.ticks.len() * n) as f64;
    Ok(BalanceReport {
        ticks: trace.ticks.len(),
        devices: n,
        balanced_max: bal_max,
        balanced_mean: bal_sum / count,
        unbalanced_max: raw_max,
        unbalanced_mean: raw_sum / count,
        max_conservation_error: cons,
        rows,
    })
}

/// Runs [`simulate_balance`] on the trace at `trace_path` and writes
/// `balance.csv` and `balance.json` into `out`.
pub fn run_balance_sim(trace_path: &Path, cfg: &BalanceConfig, out: &Path) -> Result<BalanceReport> {
    let trace = WorkloadTrace::load(trace_path)?;
    let report = simulate_balance(&trace, cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("balance.csv", e.into_error()))?;
    super::sweep::write_file(&out.join("balance.csv"), &bytes)?;
    super::sweep::write_file(&out.join("balance.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}
