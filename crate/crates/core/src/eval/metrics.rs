//! Image quality metrics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scalar::Real;
use crate::CImage;

/// `||xhat - x|| / ||x||` over complex values.
pub fn nrmse<T: Real>(xhat: &CImage<T>, x: &CImage<T>) -> Result<f64> {
    ensure!(xhat.dim() == x.dim(), Shape, "images differ in shape: {:?} vs {:?}", xhat.dim(), x.dim());
    let den: f64 = x.iter().map(|v| v.norm_sqr().as_f64()).sum();
    ensure!(den > 0.0, Degenerate, "NRMSE reference is all zero");
    let num: f64 = xhat.iter().zip(x).map(|(a, b)| (a - b).norm_sqr().as_f64()).sum();
    Ok((num / den).sqrt())
}

pub const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filtering over the valid region.
fn filter_valid(a: &Array2<f64>, g: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = a.dim();
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let rows = Array2::from_shape_fn((h, wo), |(i, j)| (0..SSIM_WINDOW).map(|k| g[k] * a[[i, j + k]]).sum::<f64>());
    Array2::from_shape_fn((ho, wo), |(i, j)| (0..SSIM_WINDOW).map(|k| g[k] * rows[[i + k, j]]).sum::<f64>())
}

/// Mean structural similarity of magnitude images with a 7x7 Gaussian
/// window (sigma 1.5) and dynamic range `max |x|`.
pub fn ssim<T: Real>(xhat: &CImage<T>, x: &CImage<T>) -> Result<f64> {
    ensure!(xhat.dim() == x.dim(), Shape, "images differ in shape: {:?} vs {:?}", xhat.dim(), x.dim());
    let (h, w) = x.dim();
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        InvalidParam,
        "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
    );
    let a = xhat.mapv(|v| v.norm().as_f64());
    let b = x.mapv(|v| v.norm().as_f64());
    ssim_real(&a, &b)
}

/// SSIM of two real images; the second one sets the dynamic range.
pub fn ssim_real(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    ensure!(a.dim() == b.dim(), Shape, "images differ in shape: {:?} vs {:?}", a.dim(), b.dim());
    let mut range = b.iter().copied().fold(0.0, f64::max);
    if range == 0.0 {
        range = 1.0;
    }
    let (c1, c2) = ((SSIM_K1 * range).powi(2), (SSIM_K2 * range).powi(2));
    let g = gaussian_window();
    let mu_a = filter_valid(a, &g);
    let mu_b = filter_valid(b, &g);
    let aa = filter_valid(&(a * a), &g);
    let bb = filter_valid(&(b * b), &g);
    let ab = filter_valid(&(a * b), &g);
    let mut total = 0.0;
    for idx in 0..mu_a.len() {
        let (i, j) = (idx / mu_a.ncols(), idx % mu_a.ncols());
        let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
        let va = aa[[i, j]] - ma * ma;
        let vb = bb[[i, j]] - mb * mb;
        let cov = ab[[i, j]] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// One metric evaluation of a reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub slice_id: String,
    pub nrmse: f64,
    pub ssim: f64,
    pub ufloss: f64,
}
