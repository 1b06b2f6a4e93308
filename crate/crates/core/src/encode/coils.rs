//! Coil sensitivity maps.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::scalar::Real;

/// Complex sensitivity profiles `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilMaps<T: Real> {
    pub maps: Array3<Complex<T>>,
}

impl<T: Real> CoilMaps<T> {
    /// Wraps precomputed maps (e.g. loaded from disk) without renormalising.
    pub fn new(maps: Array3<Complex<T>>) -> Result<Self> {
        ensure!(maps.len() > 0, Shape, "empty coil maps");
        ensure!(
            maps.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
            NonFinite,
            "coil maps"
        );
        Ok(CoilMaps { maps })
    }

    /// Rescales so that `sum_c |S_c|^2 = 1` wherever any coil is non-zero.
    pub fn normalized(mut maps: Array3<Complex<T>>) -> Result<Self> {
        let (_, h, w) = maps.dim();
        for i in 0..h {
            for j in 0..w {
                let ss: T = maps.slice(ndarray::s![.., i, j]).iter().map(|z| z.norm_sqr()).sum();
                if ss > T::zero() {
                    let inv = T::one() / ss.sqrt();
                    maps.slice_mut(ndarray::s![.., i, j]).mapv_inplace(|z| z.scale(inv));
                }
            }
        }
        Self::new(maps)
    }

    pub fn ncoils(&self) -> usize {
        self.maps.len_of(Axis(0))
    }

    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }

    /// Pixelwise `sum_c |S_c|^2`.
    pub fn energy(&self) -> Array2<T> {
        self.maps.map(|z| z.norm_sqr()).sum_axis(Axis(0))
    }
}

/// Smooth synthetic sensitivities standing in for calibrated maps.
///
/// Coil `c` is a broad Gaussian lobe centred just outside the field of view at
/// angle `2 pi c / C` (plus a small seeded jitter), modulated by a constant
/// phase offset and a gentle linear phase ramp. The stack is normalised so the
/// coil energies sum to one at every pixel.
pub fn synth_coil_maps<T: Real>(shape: (usize, usize), ncoils: usize, seed: u64) -> Result<CoilMaps<T>> {
    let (h, w) = shape;
    ensure!(ncoils >= 1, InvalidParam, "need at least one coil");
    ensure!(h > 0 && w > 0, InvalidParam, "empty shape {shape:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ch, cw) = (h as f64 / 2.0, w as f64 / 2.0);
    let sigma = 0.5 * h.max(w) as f64;
    let mut maps = Array3::<Complex<T>>::zeros((ncoils, h, w));
    for c in 0..ncoils {
        let angle = 2.0 * PI * c as f64 / ncoils as f64 + rng.random_range(-0.2..0.2);
        let (cy, cx) = (ch + 1.1 * ch * angle.sin(), cw + 1.1 * cw * angle.cos());
        let phase0 = rng.random_range(-PI..PI);
        let ramp_dir = rng.random_range(-PI..PI);
        let ramp = 0.02 * rng.random::<f64>();
        for i in 0..h {
            for j in 0..w {
                let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                let mag = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                let phase = phase0 + ramp * (ramp_dir.cos() * (i as f64 - ch) + ramp_dir.sin() * (j as f64 - cw));
                maps[[c, i, j]] = Complex::new(T::lit(mag * phase.cos()), T::lit(mag * phase.sin()));
            }
        }
    }
    CoilMaps::normalized(maps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_coil_has_unit_magnitude() {
        let m = synth_coil_maps::<f64>((32, 40), 1, 3).unwrap();
        assert!(m.maps.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn energy_is_one_everywhere() {
        let m = synth_coil_maps::<f64>((64, 64), 4, 1).unwrap();
        assert!(m.energy().iter().all(|&e| (e - 1.0).abs() < 1e-6));
        let m32 = synth_coil_maps::<f32>((64, 64), 8, 2).unwrap();
        assert!(m32.energy().iter().all(|&e| (e - 1.0).abs() < 1e-5));
    }

    #[test]
    fn maps_are_smooth() {
        let m = synth_coil_maps::<f64>((64, 64), 4, 7).unwrap();
        let mut worst = 0.0f64;
        for c in 0..4 {
            for i in 0..63 {
                for j in 0..63 {
                    let z = m.maps[[c, i, j]];
                    let gy = (m.maps[[c, i + 1, j]] - z).norm();
                    let gx = (m.maps[[c, i, j + 1]] - z).norm();
                    worst = worst.max((gx * gx + gy * gy).sqrt());
                }
            }
        }
        assert!(worst < 0.2, "max gradient {worst}");
    }

    #[test]
    fn seeded_and_distinct() {
        let a = synth_coil_maps::<f64>((16, 16), 3, 1).unwrap();
        assert_eq!(a, synth_coil_maps::<f64>((16, 16), 3, 1).unwrap());
        assert_ne!(a, synth_coil_maps::<f64>((16, 16), 3, 2).unwrap());
        assert!(synth_coil_maps::<f64>((16, 16), 0, 1).is_err());
    }
}
