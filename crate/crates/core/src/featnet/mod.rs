//! Patch feature network, memory bank and instance-discrimination
//! pretraining.

mod bank;
mod network;
mod train;

pub use bank::{contrastive_loss, contrastive_step, instance_probability, train_features, ContrastiveStep, MemoryBank};
pub use network::{FeatNet, FeatNetConfig, BN_MOMENTUM};
pub use train::{
    featnet_from_container, featnet_to_container, load_featnet, pretrain_ufnet, pretrain_with,
    sample_instances, save_featnet, EpochStats, FeatCheckpoint, FeatTrainConfig, PatchRef, Pretrained,
};
