//! Workload balancing and resource allocation across the devices of one
//! cluster, and split device/server inference.

mod allocate;
mod balance;
mod inference;
mod predict;

pub use allocate::{allocate_resources, contribution_score, ContributionScore};
pub use balance::{
    apply_transfers, balance_workloads, balance_workloads_capped, max_normalized_load, DeviceState, TransferPlan,
};
pub use inference::{joint_inference, ByteAccount, JointInference};
pub use predict::{predict_workload, RecurrentPredictor, DEFAULT_ALPHA};
