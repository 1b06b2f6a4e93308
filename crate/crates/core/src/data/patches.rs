//! Patch extraction at random positions and on shifted grids.

use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Slice;
use crate::error::{ensure, Result};
use crate::scalar::Real;
use crate::CImage;

/// Square image patch with its position in the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch<T: Real> {
    pub pixels: CImage<T>,
    pub origin: (usize, usize),
    pub source: String,
}

impl<T: Real> Patch<T> {
    pub fn size(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn crop(image: &CImage<T>, origin: (usize, usize), size: usize, source: &str) -> Self {
        let (r, c) = origin;
        Patch { pixels: image.slice(s![r..r + size, c..c + size]).to_owned(), origin, source: source.to_string() }
    }
}

/// `count` patches at independent uniformly random valid origins.
pub fn extract_random_patches<T: Real>(
    slice: &Slice<T>,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<Patch<T>>> {
    let (h, w) = slice.shape();
    ensure!(size >= 1 && size <= h.min(w), InvalidParam, "patch size {size} does not fit {h}x{w}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let origin = (rng.random_range(0..=h - size), rng.random_range(0..=w - size));
            Patch::crop(&slice.image, origin, size, &slice.subject)
        })
        .collect())
}

/// Origins `(dr + i * stride, dc + j * stride)` of every in-bounds patch,
/// row-major. Patches that would cross the border are dropped.
pub fn grid_origins(
    shape: (usize, usize),
    size: usize,
    stride: usize,
    shift: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    let (h, w) = shape;
    ensure!(stride >= 1, InvalidParam, "stride must be positive");
    ensure!(shift.0 < stride && shift.1 < stride, InvalidParam, "shift {shift:?} outside [0, {stride})");
    ensure!(size >= 1 && size <= h.min(w), InvalidParam, "patch size {size} does not fit {h}x{w}");
    let rows: Vec<usize> = (shift.0..=h - size).step_by(stride).collect();
    let cols: Vec<usize> = (shift.1..=w - size).step_by(stride).collect();
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

/// Patches on the shifted grid, in [`grid_origins`] order.
pub fn extract_grid_patches<T: Real>(
    image: &CImage<T>,
    size: usize,
    stride: usize,
    shift: (usize, usize),
) -> Result<Vec<Patch<T>>> {
    Ok(grid_origins(image.dim(), size, stride, shift)?
        .into_iter()
        .map(|o| Patch::crop(image, o, size, ""))
        .collect())
}
