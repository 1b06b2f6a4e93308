//! Supervised training of the unrolled network and its checkpoints.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{modl_forward, modl_on_tape, ReconNet, UNetConfig, UnrollConfig};
use crate::autodiff::{Adam, Tape, Tensor};
use crate::container::Container;
use crate::encode::{Encoding, KSpaceSample};
use crate::error::{ensure, Error, Result};
use crate::eval::{nrmse, ssim};
use crate::featnet::FeatNet;
use crate::scalar::Real;
use crate::ufloss::{draw_shift, feature_mse_on_tape, pixel_loss_on_tape, recon_loss, ufloss, ReconLoss, UflossConfig};
use crate::CImage;

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconEpochStats {
    pub epoch: usize,
    pub train_total: f64,
    pub train_mse: f64,
    pub train_ufloss: f64,
    /// Mean validation value of the objective being trained.
    pub val_objective: f64,
    pub val_nrmse: f64,
    pub val_ssim: f64,
    /// Mean validation UFLoss at shift (0, 0); absent without a feature network.
    pub val_ufloss: Option<f64>,
    pub lam: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedRecon<T: Real> {
    /// Weights of the epoch with the lowest validation objective.
    pub net: ReconNet<T>,
    pub best_epoch: usize,
    pub history: Vec<ReconEpochStats>,
}

struct Prepared<'a, T: Real> {
    enc: Arc<Encoding<T>>,
    aty: CImage<T>,
    target: &'a CImage<T>,
    y: &'a crate::CStack<T>,
}

fn prepare<T: Real>(samples: &[KSpaceSample<T>]) -> Result<Vec<Prepared<'_, T>>> {
    samples
        .iter()
        .map(|s| {
            let enc = Arc::new(s.encoding()?);
            let aty = enc.adjoint(&s.y)?;
            ensure!(aty.dim() == s.target.image.dim(), Shape, "k-space and target shapes disagree");
            Ok(Prepared { enc, aty, target: &s.target.image, y: &s.y })
        })
        .collect()
}

/// Objective value and parameter gradients for one sample.
fn sample_step<T: Real>(
    net: &ReconNet<T>,
    feat: Option<&FeatNet<T>>,
    s: &Prepared<'_, T>,
    cfg: &UnrollConfig,
    ucfg: &UflossConfig,
    step_seed: u64,
) -> Result<(ReconLoss, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape, true);
    let x = modl_on_tape(&mut tape, net, &p, &s.enc, &s.aty, cfg.unrolls, cfg.cg_steps);
    let pix = pixel_loss_on_tape(&mut tape, x, s.target, ucfg.pixel_reduction);
    let (total, feat_part) = match feat {
        Some(f) if ucfg.mu > 0.0 => {
            let frozen = f.params.bind(&mut tape, false);
            let fm = feature_mse_on_tape(&mut tape, x, s.target, f, &frozen, ucfg, draw_shift(ucfg, step_seed))?;
            let weighted = tape.scale(fm, T::lit(ucfg.mu));
            (tape.add(pix, weighted), tape.value(fm).item().as_f64())
        }
        _ => (pix, 0.0),
    };
    let loss = ReconLoss {
        total: tape.value(total).item().as_f64(),
        mse_part: tape.value(pix).item().as_f64(),
        ufloss_part: feat_part,
    };
    let mut grads = tape.backward_scalar(total);
    Ok((loss, net.params.collect_grads(&mut grads, &p)))
}

fn validate<T: Real>(
    net: &ReconNet<T>,
    feat: Option<&FeatNet<T>>,
    val: &[Prepared<'_, T>],
    cfg: &UnrollConfig,
    ucfg: &UflossConfig,
) -> Result<(f64, f64, f64, Option<f64>)> {
    let (mut obj, mut err, mut sim, mut uf) = (0.0, 0.0, 0.0, 0.0);
    for (i, s) in val.iter().enumerate() {
        let xhat = modl_forward(s.y, &s.enc, net, cfg.unrolls, cfg.cg_steps)?;
        obj += recon_loss(s.target, &xhat, feat, ucfg, i as u64)?.total;
        err += nrmse(&xhat, s.target)?;
        sim += ssim(&xhat, s.target)?;
        if let Some(f) = feat {
            uf += ufloss(s.target, &xhat, f, ucfg, (0, 0))?;
        }
    }
    let n = val.len() as f64;
    Ok((obj / n, err / n, sim / n, feat.map(|_| uf / n)))
}

/// Trains the unrolled network on `pixel + mu * feature-MSE`. Without a
/// feature network `mu` is taken as 0, which is the pixel-loss baseline.
pub fn train_modl<T: Real>(
    train: &[KSpaceSample<T>],
    val: &[KSpaceSample<T>],
    feat: Option<&FeatNet<T>>,
    unet: &UNetConfig,
    cfg: &UnrollConfig,
    ucfg: &UflossConfig,
    seed: u64,
) -> Result<TrainedRecon<T>> {
    train_modl_with(train, val, feat, ReconNet::new(unet.clone(), cfg.lam_init, seed)?, cfg, ucfg, seed, |_| {})
}

/// As [`train_modl`] starting from `net`, calling `on_epoch` after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_modl_with<T: Real>(
    train: &[KSpaceSample<T>],
    val: &[KSpaceSample<T>],
    feat: Option<&FeatNet<T>>,
    mut net: ReconNet<T>,
    cfg: &UnrollConfig,
    ucfg: &UflossConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&ReconEpochStats),
) -> Result<TrainedRecon<T>> {
    cfg.validate()?;
    ucfg.validate()?;
    ensure!(!train.is_empty() && !val.is_empty(), InvalidParam, "training and validation sets must be non-empty");
    let mut ucfg = ucfg.clone();
    if feat.is_none() {
        ucfg.mu = 0.0;
    }
    let train = prepare(train)?;
    let val = prepare(val)?;
    for s in train.iter().chain(&val) {
        net.check_shape(s.aty.dim())?;
    }

    let mut opt = Adam::new(&net.params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70de);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ReconNet<T>)> = None;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut mse, mut uf) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch) {
            let mut acc: Option<Vec<Tensor<T>>> = None;
            for &i in batch {
                let (loss, grads) = sample_step(&net, feat, &train[i], cfg, &ucfg, step)?;
                step += 1;
                if !loss.total.is_finite() || !grads.iter().all(Tensor::is_finite) {
                    let mut msg = format!("non-finite reconstruction loss in epoch {epoch}");
                    if let Some(path) = &cfg.abort_checkpoint {
                        save_recon(path, &net, cfg, &ucfg)?;
                        msg.push_str(&format!("; last good weights written to {}", path.display()));
                    }
                    return Err(Error::NonFinite(msg));
                }
                total += loss.total;
                mse += loss.mse_part;
                uf += loss.ufloss_part;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = T::lit(1.0 / batch.len() as f64);
            grads.iter_mut().for_each(|g| g.scale_in_place(inv));
            opt.step(&mut net.params, &grads);
        }
        let n = train.len() as f64;
        let (val_objective, val_nrmse, val_ssim, val_ufloss) = validate(&net, feat, &val, cfg, &ucfg)?;
        let stats = ReconEpochStats {
            epoch,
            train_total: total / n,
            train_mse: mse / n,
            train_ufloss: uf / n,
            val_objective,
            val_nrmse,
            val_ssim,
            val_ufloss,
            lam: net.lam(),
        };
        log::info!(
            "reconstruction epoch {epoch}: train {:.4e}, val objective {:.4e}, val NRMSE {:.4}, lambda {:.4}",
            stats.train_total,
            val_objective,
            val_nrmse,
            stats.lam
        );
        on_epoch(&stats);
        history.push(stats);
        if best.as_ref().is_none_or(|(b, _, _)| val_objective < *b) {
            best = Some((val_objective, epoch, net.clone()));
        }
    }
    let (_, best_epoch, net) = best.expect("at least one epoch");
    Ok(TrainedRecon { net, best_epoch, history })
}

#[derive(Serialize, Deserialize)]
struct ReconCheckpointMeta {
    scalar: String,
    unet: UNetConfig,
    unroll: UnrollConfig,
    ufloss: UflossConfig,
}

/// Loaded reconstruction checkpoint.
pub struct ReconCheckpoint<T: Real> {
    pub net: ReconNet<T>,
    pub unroll: UnrollConfig,
    /// Loss configuration the weights were trained with (`mu = 0` for the
    /// pixel-loss arm).
    pub ufloss: UflossConfig,
}

pub fn save_recon<T: Real>(
    path: impl AsRef<Path>,
    net: &ReconNet<T>,
    cfg: &UnrollConfig,
    ucfg: &UflossConfig,
) -> Result<()> {
    recon_to_container(net, cfg, ucfg).save(path)
}

pub fn recon_to_container<T: Real>(net: &ReconNet<T>, cfg: &UnrollConfig, ucfg: &UflossConfig) -> Container {
    let mut c = Container::new();
    net.params.write_to(&mut c, "weights");
    c.put_scalar("lam", net.lam());
    let meta =
        ReconCheckpointMeta { scalar: T::NAME.into(), unet: net.unet.clone(), unroll: cfg.clone(), ufloss: ucfg.clone() };
    c.put_text("config", &serde_json::to_string_pretty(&meta).expect("config serialises"));
    c
}

pub fn load_recon<T: Real>(path: impl AsRef<Path>) -> Result<ReconCheckpoint<T>> {
    recon_from_container(&Container::load(path)?)
}

pub fn recon_from_container<T: Real>(c: &Container) -> Result<ReconCheckpoint<T>> {
    let meta: ReconCheckpointMeta = serde_json::from_str(&c.text("config")?)
        .map_err(|e| Error::Format(format!("reconstruction checkpoint config: {e}")))?;
    let mut net = ReconNet::new(meta.unet, meta.unroll.lam_init, 0)?;
    net.params.read_from(c, "weights")?;
    let lam = c.scalar("lam")?;
    ensure!(
        (net.lam() - lam).abs() <= 1e-6 * lam.max(1.0),
        Format,
        "stored lambda {lam} disagrees with the weights ({})",
        net.lam()
    );
    Ok(ReconCheckpoint { net, unroll: meta.unroll, ufloss: meta.ufloss })
}
