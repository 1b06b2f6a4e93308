//! Patch-feature loss between a reconstruction and its reference, and the
//! combined training objective.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Tape, Tensor, Var};
use crate::data::grid_origins;
use crate::error::{ensure, Result};
use crate::featnet::FeatNet;
use crate::scalar::Real;
use crate::CImage;

/// How the pixel term of the training objective is reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelReduction {
    /// `||xhat - x||^2`.
    Sum,
    /// `||xhat - x||^2 / (H W)`.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UflossConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub mu: f64,
    pub shift_seed: u64,
    #[serde(default = "default_reduction")]
    pub pixel_reduction: PixelReduction,
}

fn default_reduction() -> PixelReduction {
    PixelReduction::Sum
}

impl Default for UflossConfig {
    fn default() -> Self {
        UflossConfig { patch_size: 40, stride: 5, mu: 1.5, shift_seed: 0, pixel_reduction: PixelReduction::Sum }
    }
}

impl UflossConfig {
    /// Mean-reduced pixel term; mu picked by validation UFLoss on the 64x64
    /// desk set.
    pub fn desk() -> Self {
        UflossConfig { mu: 0.05, pixel_reduction: PixelReduction::Mean, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.stride >= 1 && self.stride <= self.patch_size,
            InvalidParam,
            "stride {} must lie in [1, patch size {}]",
            self.stride,
            self.patch_size
        );
        ensure!(self.mu >= 0.0 && self.mu.is_finite(), InvalidParam, "mu must be non-negative, got {}", self.mu);
        Ok(())
    }
}

/// Grid shift for one training step, uniform in `[0, stride)^2`.
pub fn draw_shift(cfg: &UflossConfig, step_seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shift_seed ^ step_seed.wrapping_mul(0x2545_f491_4f6c_dd1d));
    (rng.random_range(0..cfg.stride), rng.random_range(0..cfg.stride))
}

fn origins<T: Real>(
    x: &CImage<T>,
    xhat: &CImage<T>,
    net: &FeatNet<T>,
    cfg: &UflossConfig,
    shift: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    ensure!(x.dim() == xhat.dim(), Shape, "images differ in shape: {:?} vs {:?}", x.dim(), xhat.dim());
    ensure!(
        cfg.patch_size == net.patch_size(),
        InvalidParam,
        "loss patch size {} vs network input {}",
        cfg.patch_size,
        net.patch_size()
    );
    let o = grid_origins(x.dim(), cfg.patch_size, cfg.stride, shift)?;
    ensure!(!o.is_empty(), Degenerate, "no {} pixel patch fits the grid", cfg.patch_size);
    Ok(o)
}

fn grid_features<T: Real>(img: &CImage<T>, origins: &[(usize, usize)], net: &FeatNet<T>) -> Result<ndarray::Array2<T>> {
    let p = net.patch_size();
    let patches: Vec<CImage<T>> =
        origins.iter().map(|&(r, c)| img.slice(ndarray::s![r..r + p, c..c + p]).to_owned()).collect();
    net.features(&patches)
}

/// `(1/M) sum_j (1 - <f(p_j), f(phat_j)>)` over the shifted patch grid.
pub fn ufloss<T: Real>(
    x: &CImage<T>,
    xhat: &CImage<T>,
    net: &FeatNet<T>,
    cfg: &UflossConfig,
    shift: (usize, usize),
) -> Result<f64> {
    let o = origins(x, xhat, net, cfg, shift)?;
    let (f, g) = (grid_features(x, &o, net)?, grid_features(xhat, &o, net)?);
    let ip: f64 = f.iter().zip(g.iter()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    Ok(1.0 - ip / o.len() as f64)
}

/// `(1/2M) sum_j ||f(p_j) - f(phat_j)||^2`; equal to [`ufloss`] for unit features.
pub fn ufloss_mse_form<T: Real>(
    x: &CImage<T>,
    xhat: &CImage<T>,
    net: &FeatNet<T>,
    cfg: &UflossConfig,
    shift: (usize, usize),
) -> Result<f64> {
    let o = origins(x, xhat, net, cfg, shift)?;
    let (f, g) = (grid_features(x, &o, net)?, grid_features(xhat, &o, net)?);
    let sq: f64 = f.iter().zip(g.iter()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(sq / (2 * o.len()) as f64)
}

/// Records `(1/M) sum_j ||f(phat_j) - f(p_j)||^2` on the tape, with `xhat` a
/// planar `[2, H, W]` node and the reference features held constant.
pub fn feature_mse_on_tape<T: Real>(
    tape: &mut Tape<T>,
    xhat: Var,
    x: &CImage<T>,
    net: &FeatNet<T>,
    frozen: &Bound,
    cfg: &UflossConfig,
    shift: (usize, usize),
) -> Result<Var> {
    let o = origins(x, x, net, cfg, shift)?;
    let (h, w) = x.dim();
    ensure!(tape.value(xhat).len() == 2 * h * w, Shape, "reconstruction node does not match {h}x{w}");
    let reference = grid_features(x, &o, net)?;
    let fref = tape.constant(Tensor::new(vec![o.len(), net.dim()], reference.into_raw_vec_and_offset().0)?);
    let patches = tape.extract_patches(xhat, &o, cfg.patch_size);
    let f = net.forward(tape, frozen, patches);
    let diff = tape.sub(f, fref);
    let ss = tape.sum_squares(diff);
    Ok(tape.scale(ss, T::lit(1.0 / o.len() as f64)))
}

/// UFLoss value and its gradient with respect to `xhat` (real and imaginary
/// parts as the real and imaginary components of the returned image).
pub fn ufloss_with_grad<T: Real>(
    x: &CImage<T>,
    xhat: &CImage<T>,
    net: &FeatNet<T>,
    cfg: &UflossConfig,
    shift: (usize, usize),
) -> Result<(f64, CImage<T>)> {
    ensure!(x.dim() == xhat.dim(), Shape, "images differ in shape: {:?} vs {:?}", x.dim(), xhat.dim());
    let mut tape = Tape::new();
    let frozen = net.params.bind(&mut tape, false);
    let xv = tape.leaf(Tensor::from_complex(xhat), true);
    let mse = feature_mse_on_tape(&mut tape, xv, x, net, &frozen, cfg, shift)?;
    let half = tape.scale(mse, T::lit(0.5));
    let value = tape.value(half).item().as_f64();
    let g = tape.backward_scalar(half);
    let grad = g.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(&[2, x.dim().0, x.dim().1]));
    Ok((value, grad.to_complex()?))
}

/// Components of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconLoss {
    pub total: f64,
    pub mse_part: f64,
    /// `(1/M) sum_j ||f(p_j) - f(phat_j)||^2`, i.e. twice the UFLoss.
    pub ufloss_part: f64,
}

/// Pixel term of the objective on the tape.
pub fn pixel_loss_on_tape<T: Real>(tape: &mut Tape<T>, xhat: Var, x: &CImage<T>, reduction: PixelReduction) -> Var {
    let target = tape.constant(Tensor::from_complex(x).reshaped(tape.shape(xhat)));
    let d = tape.sub(xhat, target);
    let ss = tape.sum_squares(d);
    match reduction {
        PixelReduction::Sum => ss,
        PixelReduction::Mean => tape.scale(ss, T::lit(1.0 / x.len() as f64)),
    }
}

/// `pixel(xhat - x) + mu (1/M) sum_j ||f(p_j) - f(phat_j)||^2` with the grid
/// shift drawn from `step_seed`. Without a network the feature term is 0.
pub fn recon_loss<T: Real>(
    x: &CImage<T>,
    xhat: &CImage<T>,
    net: Option<&FeatNet<T>>,
    cfg: &UflossConfig,
    step_seed: u64,
) -> Result<ReconLoss> {
    cfg.validate()?;
    ensure!(x.dim() == xhat.dim(), Shape, "images differ in shape: {:?} vs {:?}", x.dim(), xhat.dim());
    let sq: f64 = x.iter().zip(xhat).map(|(a, b)| (a - b).norm_sqr().as_f64()).sum();
    let mse_part = match cfg.pixel_reduction {
        PixelReduction::Sum => sq,
        PixelReduction::Mean => sq / x.len() as f64,
    };
    let ufloss_part = match net {
        Some(net) if cfg.mu > 0.0 => 2.0 * ufloss_mse_form(x, xhat, net, cfg, draw_shift(cfg, step_seed))?,
        _ => 0.0,
    };
    Ok(ReconLoss { total: mse_part + cfg.mu * ufloss_part, mse_part, ufloss_part })
}

/// CSV log of `(step, mse_part, ufloss_part)` rows.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(mut out: W, header_comment: &str) -> Result<Self> {
        if !header_comment.is_empty() {
            writeln!(out, "# {header_comment}")?;
        }
        writeln!(out, "step,mse_part,ufloss_part")?;
        Ok(LossLog { out })
    }

    pub fn record(&mut self, step: usize, loss: &ReconLoss) -> Result<()> {
        writeln!(self.out, "{step},{:.9e},{:.9e}", loss.mse_part, loss.ufloss_part)?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
