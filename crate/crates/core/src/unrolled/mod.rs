//! Unrolled reconstruction network: a shared U-Net denoiser alternating with
//! CG data consistency, and its training.

mod network;
mod train;

pub use network::{cg_on_tape, modl_forward, modl_on_tape, modl_residuals, ReconNet, UNetConfig, UnrollConfig};
pub use train::{
    load_recon, recon_from_container, recon_to_container, save_recon, train_modl, train_modl_with, ReconCheckpoint,
    ReconEpochStats, TrainedRecon,
};
