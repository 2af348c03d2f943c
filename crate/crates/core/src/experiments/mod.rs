//! Configuration, sweeps over modes, SNRs and seeds, and the workload
//! balancing simulation.

mod balance;
mod config;
mod sweep;

pub use balance::{run_balance_sim, simulate_balance, BalanceReport, BalanceRow, WorkloadTrace};
pub use config::{validate_config, BalanceConfig, ExperimentConfig, FlExperiment};
pub use sweep::{datasets, federated_config, mask_seed, run_sweep, train_config, SweepResult, SweepRow, Variant};
pub use sweep::{write_metrics, write_rounds};
