//! l1-wavelet regularised SENSE reconstruction by accelerated proximal
//! gradient.

use ndarray::Array2;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wavelet::{dwt2, idwt2, soft_threshold};
use crate::encode::{CoilMaps, Encoding, SamplingMask};
use crate::error::{ensure, Error, Result};
use crate::scalar::Real;
use crate::{CImage, CStack};

/// Gradient step size for the data term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// `1 / L` with `L` from power iteration on `E^H E`.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicsConfig {
    pub lam: f64,
    pub iters: usize,
    pub wavelet_levels: usize,
    pub step: Step,
}

impl Default for PicsConfig {
    fn default() -> Self {
        PicsConfig { lam: 1e-3, iters: 200, wavelet_levels: 3, step: Step::Auto }
    }
}

#[derive(Clone, Debug)]
pub struct PicsResult<T: Real> {
    pub image: CImage<T>,
    /// Objective after each iteration.
    pub objective: Vec<f64>,
    pub step: f64,
}

const POWER_ITERS: usize = 30;
const LIPSCHITZ_MARGIN: f64 = 1.02;
const DIVERGENCE_RUN: usize = 5;
const DIVERGENCE_TOL: f64 = 1e-6;

/// Largest eigenvalue of `E^H E`, estimated by power iteration.
pub fn lipschitz_estimate<T: Real>(enc: &Encoding<T>, seed: u64) -> f64 {
    let (h, w) = enc.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<Complex<T>> =
        (0..h * w).map(|_| Complex::new(T::lit(rng.random_range(-1.0..1.0)), T::lit(rng.random_range(-1.0..1.0)))).collect();
    let mut y = x.clone();
    let mut est = 0.0;
    for _ in 0..POWER_ITERS {
        let n = norm(&x);
        if n == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v = v.unscale(T::lit(n)));
        enc.normal_slice(&x, &mut y);
        est = norm(&y);
        std::mem::swap(&mut x, &mut y);
    }
    est
}

fn norm<T: Real>(x: &[Complex<T>]) -> f64 {
    x.iter().map(|v| v.norm_sqr().as_f64()).sum::<f64>().sqrt()
}

/// Minimises `0.5 ||E x - y||^2 + lam ||W x||_1` with FISTA, restarting
/// momentum whenever the objective would increase.
pub fn pics_reconstruct<T: Real>(
    y: &CStack<T>,
    maps: &CoilMaps<T>,
    mask: &SamplingMask,
    cfg: &PicsConfig,
) -> Result<PicsResult<T>> {
    let enc = Encoding::new(maps, mask)?;
    pics_with_operator(y, &enc, cfg)
}

pub fn pics_with_operator<T: Real>(y: &CStack<T>, enc: &Encoding<T>, cfg: &PicsConfig) -> Result<PicsResult<T>> {
    ensure!(cfg.lam > 0.0 && cfg.lam.is_finite(), InvalidParam, "PICS lambda must be positive, got {}", cfg.lam);
    ensure!(cfg.iters >= 1, InvalidParam, "PICS needs at least one iteration");
    let (h, w) = enc.shape();
    dwt2(&Array2::<Complex<T>>::zeros((h, w)), cfg.wavelet_levels)?;
    let step = match cfg.step {
        Step::Auto => {
            let l = lipschitz_estimate(enc, 0) * LIPSCHITZ_MARGIN;
            ensure!(l > 0.0, Degenerate, "encoding operator is zero");
            1.0 / l
        }
        Step::Fixed(s) => {
            ensure!(s > 0.0 && s.is_finite(), InvalidParam, "step must be positive, got {s}");
            s
        }
    };
    let levels = cfg.wavelet_levels;
    let aty = enc.adjoint(y)?;
    let lam = cfg.lam;
    let t_thresh = T::lit(step * lam);

    let objective = |x: &CImage<T>| -> Result<f64> {
        let r = enc.forward(x)? - y;
        let data = 0.5 * r.iter().map(|v| v.norm_sqr().as_f64()).sum::<f64>();
        let l1: f64 = dwt2(x, levels)?.iter().map(|v| v.norm().as_f64()).sum();
        Ok(data + lam * l1)
    };
    // prox(z - step * (E^H E z - E^H y))
    let prox_grad = |z: &CImage<T>| -> Result<CImage<T>> {
        let g = enc.normal(z)? - &aty;
        let v = z - &g.mapv(|c| c.scale(T::lit(step)));
        let c = dwt2(&v, levels)?.mapv(|c| soft_threshold(c, t_thresh));
        idwt2(&c, levels)
    };

    let mut x = Array2::<Complex<T>>::zeros((h, w));
    let mut f = objective(&x)?;
    let mut z = x.clone();
    let mut t = 1.0f64;
    let mut history = Vec::with_capacity(cfg.iters);
    let mut rising = 0usize;
    for _ in 0..cfg.iters {
        let mut x_new = prox_grad(&z)?;
        let mut f_new = objective(&x_new)?;
        if f_new > f {
            // Restart: plain proximal step from the current iterate.
            t = 1.0;
            x_new = prox_grad(&x)?;
            f_new = objective(&x_new)?;
        }
        if !f_new.is_finite() {
            return Err(Error::NonFinite(format!("PICS objective became non-finite with step {step:.3e}")));
        }
        rising = if f_new > f + DIVERGENCE_TOL { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_RUN {
            return Err(Error::Diverged(format!(
                "PICS objective increased {DIVERGENCE_RUN} times in a row with step {step:.3e}; use a smaller step"
            )));
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = T::lit((t - 1.0) / t_new);
        z = &x_new + &(&x_new - &x).mapv(|c| c.scale(beta));
        x = x_new;
        f = f_new;
        t = t_new;
        history.push(f);
    }
    Ok(PicsResult { image: x, objective: history, step })
}
