//! Multi-coil Cartesian encoding: FFT, sampling masks, coil maps, the
//! operator `E = U F S` and the CG solver for its regularised normal equations.

mod cg;
mod coils;
mod fft;
mod mask;
mod operator;

pub use cg::{cg_solve, cg_solve_traced};
pub use coils::{synth_coil_maps, CoilMaps};
pub use fft::{fft2c, ifft2c, Fft2};
pub use mask::{make_mask_1d_random, make_mask_poisson, CalibRegion, SamplingMask};
pub use operator::Encoding;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Slice};
use crate::error::Result;
use crate::scalar::Real;
use crate::CStack;

/// Mask family used for retrospective undersampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaskSpec {
    Random1d { acceleration: f64, center_fraction: f64 },
    Poisson { acceleration: f64, calib: usize },
}

impl MaskSpec {
    pub fn generate(&self, shape: (usize, usize), seed: u64) -> Result<SamplingMask> {
        match *self {
            MaskSpec::Random1d { acceleration, center_fraction } => {
                make_mask_1d_random(shape, acceleration, center_fraction, seed)
            }
            MaskSpec::Poisson { acceleration, calib } => make_mask_poisson(shape, acceleration, calib, seed),
        }
    }
}

/// One retrospectively undersampled slice.
#[derive(Clone, Debug)]
pub struct KSpaceSample<T: Real> {
    /// Measured data, zero where the mask is zero.
    pub y: CStack<T>,
    pub maps: CoilMaps<T>,
    pub mask: SamplingMask,
    pub target: Slice<T>,
}

impl<T: Real> KSpaceSample<T> {
    /// Simulates `y = E x` for the slice image.
    pub fn simulate(target: Slice<T>, maps: CoilMaps<T>, mask: SamplingMask) -> Result<Self> {
        let enc = Encoding::new(&maps, &mask)?;
        let y = enc.forward(&target.image)?;
        Ok(KSpaceSample { y, maps, mask, target })
    }

    pub fn encoding(&self) -> Result<Encoding<T>> {
        Encoding::new(&self.maps, &self.mask)
    }

    /// Zero-filled reconstruction `E^H y`.
    pub fn zero_filled(&self) -> Result<crate::CImage<T>> {
        self.encoding()?.adjoint(&self.y)
    }
}

/// Builds one sample per slice with seeded synthetic coil maps and one fixed
/// mask per slice.
pub fn simulate_dataset<T: Real>(
    dataset: &Dataset<T>,
    ncoils: usize,
    mask: &MaskSpec,
    seed: u64,
) -> Result<Vec<KSpaceSample<T>>> {
    dataset
        .slices
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let slice_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let shape = s.image.dim();
            let maps = synth_coil_maps(shape, ncoils, slice_seed)?;
            let m = mask.generate(shape, slice_seed ^ 0x5eed)?;
            KSpaceSample::simulate(s.clone(), maps, m)
        })
        .collect()
}
