//! Pretraining of the feature network and its checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bank::{contrastive_step, MemoryBank};
use super::network::{FeatNet, FeatNetConfig, BN_MOMENTUM};
use crate::autodiff::Adam;
use crate::container::Container;
use crate::data::{Dataset, Patch};
use crate::error::{ensure, Error, Result};
use crate::scalar::Real;
use crate::CImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatTrainConfig {
    pub tau: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub patches_per_slice: usize,
    pub patch_size: usize,
    /// Blend factor for bank updates; 0 replaces rows outright.
    #[serde(default)]
    pub bank_momentum: f64,
    /// Where to write the last good state if training hits a non-finite loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_checkpoint: Option<PathBuf>,
}

impl Default for FeatTrainConfig {
    fn default() -> Self {
        FeatTrainConfig {
            tau: 1.0,
            batch: 16,
            epochs: 100,
            lr: 1e-4,
            patches_per_slice: 80,
            patch_size: 40,
            bank_momentum: 0.0,
            abort_checkpoint: None,
        }
    }
}

impl FeatTrainConfig {
    /// Five epochs at a larger step size, which fits a 64x64 desk run.
    pub fn desk() -> Self {
        FeatTrainConfig { epochs: 5, lr: 1e-3, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau > 0.0, InvalidParam, "tau must be positive");
        ensure!(
            self.batch >= 1 && self.epochs >= 1 && self.patches_per_slice >= 1 && self.patch_size >= 1,
            InvalidParam,
            "batch, epochs, patches_per_slice and patch_size must all be at least 1"
        );
        ensure!(self.lr > 0.0, InvalidParam, "learning rate must be positive");
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Largest row-norm error of the bank at the end of the epoch.
    pub bank_norm_error: f64,
    /// Largest probability-sum error over every batch of the epoch.
    pub prob_sum_error: f64,
}

#[derive(Clone, Debug)]
pub struct Pretrained<T: Real> {
    pub net: FeatNet<T>,
    pub bank: MemoryBank<T>,
    pub history: Vec<EpochStats>,
    /// Training instances in bank order.
    pub instances: Vec<PatchRef>,
}

/// A training patch identified by slice index and origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRef {
    pub slice: usize,
    pub origin: (usize, usize),
}

/// Uniformly random patch origins for every slice, in bank order.
pub fn sample_instances<T: Real>(dataset: &Dataset<T>, per_slice: usize, size: usize, seed: u64) -> Result<Vec<PatchRef>> {
    let mut out = Vec::with_capacity(dataset.len() * per_slice);
    for (s, slice) in dataset.slices.iter().enumerate() {
        let (h, w) = slice.shape();
        ensure!(size <= h.min(w), InvalidParam, "patch size {size} exceeds slice {s} of {h}x{w}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(s as u64));
        for _ in 0..per_slice {
            out.push(PatchRef { slice: s, origin: (rng.random_range(0..=h - size), rng.random_range(0..=w - size)) });
        }
    }
    Ok(out)
}

fn crop<T: Real>(dataset: &Dataset<T>, r: PatchRef, size: usize) -> CImage<T> {
    let s = &dataset.slices[r.slice];
    Patch::crop(&s.image, r.origin, size, &s.subject).pixels
}

/// Trains the feature network by instance discrimination against a memory
/// bank holding one feature per training patch.
pub fn pretrain_ufnet<T: Real>(
    dataset: &Dataset<T>,
    net_cfg: &FeatNetConfig,
    cfg: &FeatTrainConfig,
    seed: u64,
) -> Result<Pretrained<T>> {
    pretrain_with(dataset, FeatNet::new(net_cfg.clone(), seed)?, cfg, seed, |_| {})
}

/// As [`pretrain_ufnet`] starting from `net`, calling `on_epoch` after every
/// epoch.
pub fn pretrain_with<T: Real>(
    dataset: &Dataset<T>,
    mut net: FeatNet<T>,
    cfg: &FeatTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Pretrained<T>> {
    cfg.validate()?;
    ensure!(!dataset.is_empty(), InvalidParam, "pretraining needs a non-empty dataset");
    ensure!(
        cfg.patch_size == net.patch_size(),
        InvalidParam,
        "training patch size {} vs network input {}",
        cfg.patch_size,
        net.patch_size()
    );
    let instances = sample_instances(dataset, cfg.patches_per_slice, cfg.patch_size, seed)?;
    let mut bank = MemoryBank::random(instances.len(), net.dim(), seed ^ 0xba4c)?;
    let mut opt = Adam::new(&net.params, cfg.lr);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5417);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut prob_err) = (0.0, 0.0f64);
        for batch in order.chunks(cfg.batch) {
            let patches: Vec<CImage<T>> = batch.iter().map(|&i| crop(dataset, instances[i], cfg.patch_size)).collect();
            let refs: Vec<&CImage<T>> = patches.iter().collect();
            let step = match contrastive_step(&net, &bank, batch, &refs, cfg.tau) {
                Ok(s) if s.grads.iter().all(|g| g.is_finite()) => s,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    let mut msg = format!("non-finite pretraining loss in epoch {epoch}");
                    if let Some(path) = &cfg.abort_checkpoint {
                        save_featnet(path, &net, Some(&bank), cfg)?;
                        msg.push_str(&format!("; last good state written to {}", path.display()));
                    }
                    return Err(Error::NonFinite(msg));
                }
                Err(e) => return Err(e),
            };
            total += step.loss * batch.len() as f64;
            prob_err = prob_err.max(step.max_prob_sum_error);
            opt.step(&mut net.params, &step.grads);
            net.update_running(&step.bn_stats, BN_MOMENTUM)?;
            bank.update(batch, &step.features, cfg.bank_momentum)?;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / instances.len() as f64,
            bank_norm_error: bank.max_norm_error(),
            prob_sum_error: prob_err,
        };
        log::info!(
            "feature pretraining epoch {epoch}: loss {:.5}, bank norm error {:.2e}",
            stats.mean_loss,
            stats.bank_norm_error
        );
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(Pretrained { net, bank, history, instances })
}

#[derive(Serialize, Deserialize)]
struct FeatCheckpointMeta {
    scalar: String,
    network: FeatNetConfig,
    training: FeatTrainConfig,
}

/// Writes weights, bank (when given) and configuration to one container.
pub fn save_featnet<T: Real>(
    path: impl AsRef<Path>,
    net: &FeatNet<T>,
    bank: Option<&MemoryBank<T>>,
    cfg: &FeatTrainConfig,
) -> Result<()> {
    featnet_to_container(net, bank, cfg)?.save(path)
}

pub fn featnet_to_container<T: Real>(
    net: &FeatNet<T>,
    bank: Option<&MemoryBank<T>>,
    cfg: &FeatTrainConfig,
) -> Result<Container> {
    let mut c = Container::new();
    net.params.write_to(&mut c, "weights");
    net.buffers.write_to(&mut c, "buffers");
    if let Some(b) = bank {
        c.put_real("bank", b.rows());
    }
    let meta = FeatCheckpointMeta { scalar: T::NAME.into(), network: net.config.clone(), training: cfg.clone() };
    c.put_text("config", &serde_json::to_string_pretty(&meta).expect("config serialises"));
    Ok(c)
}

/// Loaded feature-network checkpoint.
pub struct FeatCheckpoint<T: Real> {
    pub net: FeatNet<T>,
    pub bank: Option<MemoryBank<T>>,
    pub training: FeatTrainConfig,
}

pub fn load_featnet<T: Real>(path: impl AsRef<Path>) -> Result<FeatCheckpoint<T>> {
    featnet_from_container(&Container::load(path)?)
}

pub fn featnet_from_container<T: Real>(c: &Container) -> Result<FeatCheckpoint<T>> {
    let meta: FeatCheckpointMeta = serde_json::from_str(&c.text("config")?)
        .map_err(|e| Error::Format(format!("feature checkpoint config: {e}")))?;
    let mut net = FeatNet::new(meta.network, 0)?;
    net.params.read_from(c, "weights")?;
    net.buffers.read_from(c, "buffers")?;
    let bank = if c.contains("bank") {
        let rows = c.real::<T>("bank")?;
        let rows = rows.into_dimensionality().map_err(|e| Error::Shape(format!("bank: {e}")))?;
        Some(MemoryBank::from_rows(rows)?)
    } else {
        None
    };
    Ok(FeatCheckpoint { net, bank, training: meta.training })
}
