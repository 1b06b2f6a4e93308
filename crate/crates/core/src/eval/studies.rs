//! Perturbation, deblurring, retrieval and correlation studies of the
//! feature loss.

use ndarray::{s, Array2};
use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::metrics::{nrmse, ssim_real};
use crate::data::percentile;
use crate::encode::{fft2c, ifft2c};
use crate::error::{ensure, Error, Result};
use crate::featnet::{FeatNet, MemoryBank};
use crate::scalar::Real;
use crate::ufloss::{ufloss, ufloss_with_grad, UflossConfig};
use crate::CImage;

/// `(1 - beta) x + beta n` with `n` circular complex normal of unit variance.
pub fn perturb_noise<T: Real>(x: &CImage<T>, beta: f64, seed: u64) -> Result<CImage<T>> {
    ensure!((0.0..=0.1).contains(&beta), InvalidParam, "noise level {beta} outside [0, 0.1]");
    if beta == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let (a, b) = (T::lit(1.0 - beta), T::lit(beta));
    Ok(x.mapv(|v| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        v.scale(a) + Complex::new(T::lit(re * s), T::lit(im * s)).scale(b)
    }))
}

/// Side of the kept k-space band: `n / r` rounded to the nearest even integer.
pub fn blur_band(n: usize, r: f64) -> usize {
    let band = 2 * ((n as f64 / r) / 2.0).round() as usize;
    band.clamp(2.min(n), n)
}

/// Keeps the central `(H/R) x (W/R)` block of k-space.
pub fn perturb_blur<T: Real>(x: &CImage<T>, r: f64) -> Result<CImage<T>> {
    ensure!(r >= 1.0 && r.is_finite(), InvalidParam, "crop rate {r} below 1");
    let (h, w) = x.dim();
    let (bh, bw) = (blur_band(h, r), blur_band(w, r));
    let k = fft2c(x);
    let mut kept = Array2::zeros((h, w));
    let (r0, c0) = (h / 2 - bh / 2, w / 2 - bw / 2);
    kept.slice_mut(s![r0..r0 + bh, c0..c0 + bw]).assign(&k.slice(s![r0..r0 + bh, c0..c0 + bw]));
    Ok(ifft2c(&kept))
}

/// A study response: UFLoss and NRMSE at each perturbation level or iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyCurve {
    pub x_values: Vec<f64>,
    pub ufloss: Vec<f64>,
    pub nrmse: Vec<f64>,
}

impl StudyCurve {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.ufloss.len() == self.x_values.len() && self.nrmse.len() == self.x_values.len(),
            Shape,
            "curve columns differ in length"
        );
        ensure!(
            self.x_values.windows(2).all(|w| w[0] < w[1]),
            InvalidParam,
            "curve abscissae must be strictly increasing"
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_values.is_empty()
    }
}

/// Which perturbation a study applies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// Additive noise at level beta, averaged over these seeds.
    Noise { seeds: Vec<u64> },
    /// k-space cropping at rate R.
    Blur,
}

/// UFLoss (at grid shift zero) and NRMSE of `x` against perturbed copies of itself.
pub fn perturbation_study<T: Real>(
    x: &CImage<T>,
    levels: &[f64],
    kind: &Perturbation,
    net: &FeatNet<T>,
    cfg: &UflossConfig,
) -> Result<StudyCurve> {
    ensure!(!levels.is_empty(), InvalidParam, "no perturbation levels");
    let mut curve = StudyCurve { x_values: levels.to_vec(), ufloss: Vec::new(), nrmse: Vec::new() };
    for &level in levels {
        let perturbed = match kind {
            Perturbation::Noise { seeds } => {
                ensure!(seeds.len() >= 3, InvalidParam, "noise arm needs at least 3 seeds, got {}", seeds.len());
                seeds.iter().map(|&s| perturb_noise(x, level, s)).collect::<Result<Vec<_>>>()?
            }
            Perturbation::Blur => vec![perturb_blur(x, level)?],
        };
        let n = perturbed.len() as f64;
        let (mut u, mut e) = (0.0, 0.0);
        for p in &perturbed {
            u += ufloss(x, p, net, cfg, (0, 0))?;
            e += nrmse(p, x)?;
        }
        curve.ufloss.push(u / n);
        curve.nrmse.push(e / n);
    }
    curve.validate()?;
    Ok(curve)
}

/// Spearman rank correlation, with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(a.len() == b.len() && a.len() >= 2, InvalidParam, "spearman needs two equal series of length >= 2");
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            idx[i..=j].iter().for_each(|&k| r[k] = avg);
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    ensure!(va > 0.0 && vb > 0.0, Degenerate, "spearman of a constant series");
    Ok(cov / (va * vb).sqrt())
}

/// `y[i-1] - 2 y[i] + y[i+1]`.
pub fn second_differences(y: &[f64]) -> Vec<f64> {
    y.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect()
}

/// Outcome of [`deblur_descent`].
#[derive(Clone, Debug)]
pub struct Deblurred<T: Real> {
    pub image: CImage<T>,
    /// UFLoss and NRMSE to the original at iterations `0..=steps`.
    pub curve: StudyCurve,
}

/// Consecutive loss increases that count as divergence.
const DIVERGENCE_RUN: usize = 10;

/// Gradient descent on UFLoss(x_o, x_p) from a k-space cropped copy of
/// `x_o`, with the patch grid fixed at shift zero.
pub fn deblur_descent<T: Real>(
    x_o: &CImage<T>,
    r0: f64,
    alpha: f64,
    steps: usize,
    net: &FeatNet<T>,
    cfg: &UflossConfig,
) -> Result<Deblurred<T>> {
    descend(x_o, perturb_blur(x_o, r0)?, alpha, steps, net, cfg)
}

fn descend<T: Real>(
    x_o: &CImage<T>,
    x: CImage<T>,
    alpha: f64,
    steps: usize,
    net: &FeatNet<T>,
    cfg: &UflossConfig,
) -> Result<Deblurred<T>> {
    descend_with(x_o, x, alpha, steps, |xp| ufloss_with_grad(x_o, xp, net, cfg, (0, 0)))
}

/// Gradient descent on `loss_grad`, logging the loss and the NRMSE to `x_o`.
fn descend_with<T: Real>(
    x_o: &CImage<T>,
    mut x: CImage<T>,
    alpha: f64,
    steps: usize,
    mut loss_grad: impl FnMut(&CImage<T>) -> Result<(f64, CImage<T>)>,
) -> Result<Deblurred<T>> {
    ensure!(alpha > 0.0 && alpha.is_finite(), InvalidParam, "step size must be positive, got {alpha}");
    let mut curve = StudyCurve { x_values: Vec::new(), ufloss: Vec::new(), nrmse: Vec::new() };
    let mut increases = 0;
    for k in 0..=steps {
        let (loss, grad) = loss_grad(&x)?;
        ensure!(loss.is_finite(), NonFinite, "UFLoss at descent step {k}");
        if let Some(&prev) = curve.ufloss.last() {
            increases = if loss > prev { increases + 1 } else { 0 };
            if increases >= DIVERGENCE_RUN {
                return Err(Error::Diverged(format!(
                    "UFLoss rose for {DIVERGENCE_RUN} consecutive steps at step {k}; try a smaller step than {alpha}"
                )));
            }
        }
        curve.x_values.push(k as f64);
        curve.ufloss.push(loss);
        curve.nrmse.push(nrmse(&x, x_o)?);
        if k < steps {
            let a = T::lit(alpha);
            x.zip_mut_with(&grad, |v, &g| *v = *v - g.scale(a));
        }
    }
    Ok(Deblurred { image: x, curve })
}

/// Picks the step size among `candidates` whose `probe_steps`-step descent
/// ends at the lowest UFLoss; diverging candidates are skipped.
pub fn line_search_alpha<T: Real>(
    x_o: &CImage<T>,
    r0: f64,
    candidates: &[f64],
    probe_steps: usize,
    net: &FeatNet<T>,
    cfg: &UflossConfig,
) -> Result<f64> {
    ensure!(!candidates.is_empty(), InvalidParam, "no candidate step sizes");
    let start = perturb_blur(x_o, r0)?;
    let mut best: Option<(f64, f64)> = None;
    for &alpha in candidates {
        match descend(x_o, start.clone(), alpha, probe_steps, net, cfg) {
            Ok(d) => {
                let last = *d.curve.ufloss.last().expect("at least one point");
                if best.is_none_or(|(b, _)| last < b) {
                    best = Some((last, alpha));
                }
            }
            Err(Error::Diverged(_)) => {}
            Err(e) => return Err(e),
        }
    }
    best.map(|(_, a)| a).ok_or_else(|| Error::Diverged("every candidate step size diverged".into()))
}

/// The `k` bank rows with the largest inner product with the query's
/// feature, descending; ties go to the lower index.
pub fn retrieve_neighbors<T: Real>(
    query: &CImage<T>,
    net: &FeatNet<T>,
    bank: &MemoryBank<T>,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    ensure!(!bank.is_empty(), InvalidParam, "empty memory bank");
    ensure!(k >= 1 && k <= bank.len(), InvalidParam, "k = {k} outside [1, {}]", bank.len());
    ensure!(net.dim() == bank.dim(), Shape, "feature dim {} vs bank dim {}", net.dim(), bank.dim());
    let f = net.feature_map(query)?;
    let mut scored: Vec<(usize, f64)> = bank
        .rows()
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| (i, row.iter().zip(&f).map(|(a, b)| a.as_f64() * b.as_f64()).sum()))
        .collect();
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored)
}

/// Similarity of a source patch to every grid patch of a target image.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap {
    pub stride: usize,
    pub patch_size: usize,
    /// Value at grid cell `(i, j)`, i.e. the patch at `(i * stride, j * stride)`.
    pub values: Array2<f64>,
}

impl CorrelationMap {
    /// Values with negatives set to zero, for display.
    pub fn positive_part(&self) -> Array2<f64> {
        self.values.mapv(|v| v.max(0.0))
    }
}

fn grid_dims(shape: (usize, usize), p: usize, stride: usize) -> Result<(usize, usize)> {
    ensure!(stride >= 1, InvalidParam, "stride must be positive");
    ensure!(p <= shape.0.min(shape.1), InvalidParam, "patch size {p} does not fit {shape:?}");
    Ok(((shape.0 - p) / stride + 1, (shape.1 - p) / stride + 1))
}

/// Feature inner products `<f(source), f(p_ij)>` over the target's patch grid.
pub fn correlation_map<T: Real>(
    source: &CImage<T>,
    target: &CImage<T>,
    net: &FeatNet<T>,
    stride: usize,
) -> Result<CorrelationMap> {
    let p = net.patch_size();
    let (gh, gw) = grid_dims(target.dim(), p, stride)?;
    let f = net.feature_map(source)?;
    let patches: Vec<CImage<T>> = (0..gh * gw)
        .map(|c| {
            let (r0, c0) = (c / gw * stride, c % gw * stride);
            target.slice(s![r0..r0 + p, c0..c0 + p]).to_owned()
        })
        .collect();
    let feats = net.features(&patches)?;
    let values = Array2::from_shape_fn((gh, gw), |(i, j)| {
        feats.row(i * gw + j).iter().zip(&f).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
    });
    Ok(CorrelationMap { stride, patch_size: p, values })
}

/// SSIM between the source patch (the reference) and every grid patch of the target.
pub fn ssim_correlation_map<T: Real>(source: &CImage<T>, target: &CImage<T>, stride: usize) -> Result<CorrelationMap> {
    let (p, pw) = source.dim();
    ensure!(p == pw, Shape, "source patch must be square, got {p}x{pw}");
    let (gh, gw) = grid_dims(target.dim(), p, stride)?;
    let src = source.mapv(|v| v.norm().as_f64());
    let mag = target.mapv(|v| v.norm().as_f64());
    let mut values = Array2::zeros((gh, gw));
    for i in 0..gh {
        for j in 0..gw {
            let patch = mag.slice(s![i * stride..i * stride + p, j * stride..j * stride + p]).to_owned();
            values[[i, j]] = ssim_real(&patch, &src)?;
        }
    }
    Ok(CorrelationMap { stride, patch_size: p, values })
}

/// Median and quartiles of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        Ok(Summary {
            count: values.len(),
            median: percentile(values, 0.5)?,
            q1: percentile(values, 0.25)?,
            q3: percentile(values, 0.75)?,
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn quadratic(x: &CImage<f64>) -> Result<(f64, CImage<f64>)> {
        Ok((x.iter().map(|v| v.norm_sqr()).sum(), x.mapv(|v| v * 2.0)))
    }

    #[test]
    fn descent_converges_on_a_quadratic() {
        let target = Array2::from_elem((4, 4), Complex64::new(1.0, 0.0));
        let start = Array2::from_elem((4, 4), Complex64::new(3.0, -1.0));
        let d = descend_with(&target, start, 0.25, 20, quadratic).unwrap();
        assert_eq!(d.curve.len(), 21);
        assert!(d.curve.ufloss.windows(2).all(|w| w[1] < w[0]));
        assert!(d.image.iter().all(|v| v.norm() < 1e-5));
    }

    #[test]
    fn overshooting_steps_report_divergence() {
        let target = Array2::from_elem((4, 4), Complex64::new(1.0, 0.0));
        let start = Array2::from_elem((4, 4), Complex64::new(0.1, 0.0));
        // A step of 1.5 maps x to -2x, so the loss quadruples every step.
        let err = descend_with(&target, start.clone(), 1.5, 30, quadratic).unwrap_err();
        assert!(matches!(err, Error::Diverged(ref m) if m.contains("smaller step")), "{err}");
        assert!(descend_with(&target, start, 1.5, 9, quadratic).is_ok());
    }
}
