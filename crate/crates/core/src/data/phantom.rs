//! Synthetic multi-structure phantoms.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Slice, Split};
use crate::encode::{fft2c, ifft2c};
use crate::error::{ensure, Result};
use crate::scalar::Real;

/// Generates `count` normalised phantom slices, one subject each.
///
/// Each image superposes 3 to 8 filled ellipses (sharp edges), multiplied by
/// a low-pass filtered Gaussian texture inside the support and a smooth
/// quadratic phase.
pub fn make_phantom_dataset<T: Real>(count: usize, shape: (usize, usize), seed: u64) -> Result<Dataset<T>> {
    ensure!(count >= 1, InvalidParam, "count must be at least 1");
    ensure!(shape.0 >= 64 && shape.1 >= 64, InvalidParam, "phantom shape {shape:?} below 64x64");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slices = (0..count)
        .map(|i| {
            let img = phantom_image(shape, &mut rng);
            let img = img.mapv(|z| Complex::new(T::lit(z.re), T::lit(z.im)));
            Slice::new(img, "synthetic", format!("phantom-{seed}-{i:05}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(slices, Split::Train).normalize()
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    angle: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.cy, v - self.cx);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (p, q) = (c * du + s * dv, -s * du + c * dv);
        (p / self.ay).powi(2) + (q / self.ax).powi(2) <= 1.0
    }
}

fn phantom_image(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<Complex<f64>> {
    let (h, w) = shape;
    let n_ell = rng.random_range(3..=8);
    let mut ellipses = vec![Ellipse {
        cy: rng.random_range(-0.05..0.05),
        cx: rng.random_range(-0.05..0.05),
        ay: rng.random_range(0.6..0.85),
        ax: rng.random_range(0.6..0.85),
        angle: rng.random_range(0.0..PI),
        value: rng.random_range(0.6..1.0),
    }];
    for _ in 1..n_ell {
        ellipses.push(Ellipse {
            cy: rng.random_range(-0.5..0.5),
            cx: rng.random_range(-0.5..0.5),
            ay: rng.random_range(0.06..0.35),
            ax: rng.random_range(0.06..0.35),
            angle: rng.random_range(0.0..PI),
            value: rng.random_range(-0.4..0.6),
        });
    }

    // Band-limited texture with unit standard deviation.
    let noise = Array2::from_shape_fn(shape, |_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0));
    let cutoff = rng.random_range(0.08..0.2);
    let mut k = fft2c(&noise);
    for ((i, j), z) in k.indexed_iter_mut() {
        let fy = (i as f64 - (h / 2) as f64) / h as f64;
        let fx = (j as f64 - (w / 2) as f64) / w as f64;
        *z = z.scale((-(fy * fy + fx * fx) / (2.0 * cutoff * cutoff)).exp());
    }
    let tex = ifft2c(&k).mapv(|z| z.re);
    let std = (tex.iter().map(|t| t * t).sum::<f64>() / tex.len() as f64).sqrt().max(1e-12);
    let tex_gain = rng.random_range(0.1..0.3);

    let a: [f64; 5] = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
    Array2::from_shape_fn(shape, |(i, j)| {
        let u = 2.0 * i as f64 / h as f64 - 1.0;
        let v = 2.0 * j as f64 / w as f64 - 1.0;
        let mut m = 0.0;
        for e in &ellipses {
            if e.contains(u, v) {
                m += e.value;
            }
        }
        if m != 0.0 {
            m = m.abs() * (1.0 + tex_gain * tex[[i, j]] / std);
        }
        let phase = a[0] * u + a[1] * v + a[2] * u * u + a[3] * u * v + a[4] * v * v;
        Complex::from_polar(m, phase)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::percentile;

    #[test]
    fn deterministic_given_seed() {
        let a = make_phantom_dataset::<f64>(1, (64, 64), 7).unwrap();
        let b = make_phantom_dataset::<f64>(1, (64, 64), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_seeds_differ() {
        let a = make_phantom_dataset::<f64>(2, (64, 64), 7).unwrap();
        let b = make_phantom_dataset::<f64>(2, (64, 64), 8).unwrap();
        let (x, y) = (&a.slices[0].image, &b.slices[0].image);
        let differ = x.iter().zip(y.iter()).filter(|(p, q)| (*p - *q).norm() > 1e-9).count();
        assert!(differ as f64 >= 0.01 * x.len() as f64);
    }

    #[test]
    fn finite_and_normalized() {
        let ds = make_phantom_dataset::<f32>(3, (64, 80), 3).unwrap();
        assert_eq!(ds.len(), 3);
        for s in &ds.slices {
            assert!(s.image.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
            let mags: Vec<f64> = s.image.iter().map(|z| z.norm() as f64).collect();
            assert!((percentile(&mags, 0.95).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_small_shapes() {
        assert!(make_phantom_dataset::<f64>(1, (32, 64), 0).is_err());
        assert!(make_phantom_dataset::<f64>(0, (64, 64), 0).is_err());
    }
}
