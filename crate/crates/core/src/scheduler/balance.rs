use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub id: String,
    /// Pending work units.
    pub workload: f64,
    /// Work expected to arrive before the next tick.
    pub predicted: f64,
    /// Work units processed per tick.
    pub capacity: f64,
    pub history: Vec<f64>,
}

impl DeviceState {
    pub fn new(id: impl Into<String>, workload: f64, capacity: f64) -> Self {
        Self {
            id: id.into(),
            workload,
            predicted: 0.0,
            capacity,
            history: Vec::new(),
        }
    }

    /// Current plus predicted work.
    pub fn load(&self) -> f64 {
        self.workload + self.predicted
    }

    fn check(&self) -> Result<()> {
        if !(self.workload >= 0.0 && self.predicted >= 0.0) || !self.load().is_finite() {
            return Err(Error::InvalidArgument(format!(
                "device {}: negative or non-finite load",
                self.id
            )));
        }
        if !(self.capacity.is_finite() && self.capacity > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "device {}: capacity must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// Work moved between devices, keyed by `(from, to)` device index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    moves: BTreeMap<(usize, usize), f64>,
}

impl TransferPlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `amount` to the transfer `from -> to`.
    pub fn add(&mut self, from: usize, to: usize, amount: f64) -> Result<()> {
        if from == to {
            return Err(Error::InvalidArgument(format!("transfer from device {from} to itself")));
        }
        if !(amount.is_finite() && amount >= 0.0) {
            return Err(Error::InvalidArgument(format!("transfer amount {amount}")));
        }
        if amount > 0.0 {
            *self.moves.entry((from, to)).or_insert(0.0) += amount;
        }
        Ok(())
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.moves.get(&(from, to)).copied().unwrap_or(0.0)
    }

    /// `x[i][j] - x[j][i]`.
    pub fn net(&self, i: usize, j: usize) -> f64 {
        self.get(i, j) - self.get(j, i)
    }

    pub fn outgoing(&self, i: usize) -> f64 {
        self.moves.iter().filter(|((f, _), _)| *f == i).map(|(_, v)| v).sum()
    }

    pub fn incoming(&self, i: usize) -> f64 {
        self.moves.iter().filter(|((_, t), _)| *t == i).map(|(_, v)| v).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }

    pub fn len(&self) -> usize {
        self.moves.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.moves.iter().map(|(&k, &v)| (k, v))
    }

    /// Multiplies every transfer leaving `from` by `factor`.
    pub fn scale_outgoing(&mut self, from: usize, factor: f64) {
        for ((f, _), v) in self.moves.iter_mut() {
            if *f == from {
                *v *= factor;
            }
        }
        self.moves.retain(|_, v| *v > 0.0);
    }
}

/// Largest `load / capacity` over the devices.
pub fn max_normalized_load(devices: &[DeviceState]) -> f64 {
    devices
        .iter()
        .map(|d| d.load() / d.capacity)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Water-filling plan: every device ends at `L * capacity` with
/// `L = sum(load) / sum(capacity)`.
pub fn balance_workloads(devices: &[DeviceState]) -> Result<TransferPlan> {
    balance_workloads_capped(devices, None)
}

/// Water-filling with an optional limit on each directed transfer.
///
/// Sources (above level) are visited in order of decreasing excess and sinks
/// in order of decreasing deficit; each pair moves as much as the source
/// still has, the sink still lacks and the edge allows. No device crosses the
/// level, so the largest normalized load never increases.
pub fn balance_workloads_capped(devices: &[DeviceState], edge_cap: Option<f64>) -> Result<TransferPlan> {
    if devices.is_empty() {
        return Err(Error::InvalidArgument("no devices to balance".into()));
    }
    for d in devices {
        d.check()?;
    }
    if let Some(c) = edge_cap {
        if c.is_nan() || c < 0.0 {
            return Err(Error::InvalidArgument(format!("edge cap {c}")));
        }
    }
    let mut plan = TransferPlan::new();
    if devices.len() == 1 {
        return Ok(plan);
    }
    let total: f64 = devices.iter().map(DeviceState::load).sum();
    let cap: f64 = devices.iter().map(|d| d.capacity).sum();
    let level = total / cap;
    let diff: Vec<f64> = devices.iter().map(|d| d.load() - level * d.capacity).collect();
    // ignore imbalances at rounding level
    let eps = 1e-12 * total.max(1.0);
    let mut sources: Vec<(usize, f64)> = diff
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > eps)
        .map(|(i, &e)| (i, e))
        .collect();
    let mut sinks: Vec<(usize, f64)> = diff
        .iter()
        .enumerate()
        .filter(|(_, &e)| e < -eps)
        .map(|(i, &e)| (i, -e))
        .collect();
    let by_amount = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    sources.sort_by(by_amount);
    sinks.sort_by(by_amount);
    for (src, excess) in sources.iter_mut() {
        for (dst, deficit) in sinks.iter_mut() {
            if *excess <= eps {
                break;
            }
            if *deficit <= eps {
                continue;
            }
            let amount = excess.min(*deficit).min(edge_cap.unwrap_or(f64::INFINITY));
            if amount > 0.0 {
                plan.add(*src, *dst, amount)?;
                *excess -= amount;
                *deficit -= amount;
            }
        }
    }
    Ok(plan)
}

/// Applies `plan`: `u_i = w_i + predicted_i + incoming_i - outgoing_i`.
///
/// The returned devices carry `u_i` as workload and no pending prediction.
pub fn apply_transfers(devices: &[DeviceState], plan: &TransferPlan) -> Result<Vec<DeviceState>> {
    for ((from, to), _) in plan.iter() {
        if from >= devices.len() || to >= devices.len() {
            return Err(Error::InvalidArgument(format!(
                "transfer {from} -> {to} outside {} devices",
                devices.len()
            )));
        }
    }
    devices
        .iter()
        .enumerate()
        .map(|(i, d)| {
            d.check()?;
            let (out, inc) = (plan.outgoing(i), plan.incoming(i));
            let available = d.load();
            if out > available * (1.0 + 1e-12) + 1e-12 {
                return Err(Error::InfeasiblePlan {
                    device: d.id.clone(),
                    requested: out,
                    available,
                });
            }
            let u = available + inc - out;
            Ok(DeviceState {
                workload: u.max(0.0),
                predicted: 0.0,
                ..d.clone()
            })
        })
        .collect()
}
