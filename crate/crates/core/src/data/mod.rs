//! Slices, datasets, intensity normalisation and patch extraction.

mod io;
mod patches;
mod phantom;

pub use io::{
    dataset_from_container, dataset_to_container, kspace_archive_from_container, load_dataset, load_kspace_archive,
    samples_from_container, samples_to_container, save_dataset, KSpaceArchive,
};
pub use patches::{extract_grid_patches, extract_random_patches, grid_origins, Patch};
pub use phantom::make_phantom_dataset;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scalar::Real;
use crate::CImage;

/// One fully sampled 2D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice<T: Real> {
    pub image: CImage<T>,
    /// "PD", "PDFS" or "synthetic".
    pub contrast: String,
    pub subject: String,
}

impl<T: Real> Slice<T> {
    pub fn new(image: CImage<T>, contrast: impl Into<String>, subject: impl Into<String>) -> Result<Self> {
        ensure!(
            image.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
            NonFinite,
            "slice image"
        );
        Ok(Slice { image, contrast: contrast.into(), subject: subject.into() })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Real> {
    pub slices: Vec<Slice<T>>,
    pub split: Split,
    /// Divisor applied to each subject during normalisation.
    pub scales: BTreeMap<String, T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(slices: Vec<Slice<T>>, split: Split) -> Self {
        Dataset { slices, split, scales: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.slices.iter().map(|s| s.subject.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Normalises every subject independently, recording the scale applied.
    pub fn normalize(self) -> Result<Self> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.slices.iter().enumerate() {
            groups.entry(s.subject.clone()).or_default().push(i);
        }
        let mut slices = self.slices;
        let mut scales = self.scales;
        for (subject, idx) in groups {
            let group: Vec<Slice<T>> = idx.iter().map(|&i| slices[i].clone()).collect();
            let (normed, scale) = normalize_subject(&group)?;
            for (&i, s) in idx.iter().zip(normed) {
                slices[i] = s;
            }
            let prev = scales.get(&subject).copied().unwrap_or(T::one());
            scales.insert(subject, prev * scale);
        }
        Ok(Dataset { slices, split: self.split, scales })
    }
}

/// Percentile with linear interpolation between order statistics
/// (position `q * (n - 1)` in the sorted values), `q` in `[0, 1]`.
pub fn percentile<T: Real>(values: &[T], q: f64) -> Result<T> {
    ensure!(!values.is_empty(), Degenerate, "percentile of an empty set");
    ensure!((0.0..=1.0).contains(&q), InvalidParam, "quantile {q} outside [0, 1]");
    let mut v = values.to_vec();
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = T::lit(pos - lo as f64);
    let (_, &mut a, upper) = v.select_nth_unstable_by(lo, |x, y| x.total_cmp_real(y));
    if frac == T::zero() || upper.is_empty() {
        return Ok(a);
    }
    let b = upper.iter().copied().fold(T::infinity(), T::min);
    Ok(a + (b - a) * frac)
}

trait TotalCmp {
    fn total_cmp_real(&self, other: &Self) -> std::cmp::Ordering;
}

impl<T: Real> TotalCmp for T {
    fn total_cmp_real(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).unwrap_or(std::cmp::Ordering::Equal)
    }
}

/// Divides every pixel of a subject by the 95th percentile of its magnitudes.
pub fn normalize_subject<T: Real>(slices: &[Slice<T>]) -> Result<(Vec<Slice<T>>, T)> {
    ensure!(!slices.is_empty(), Degenerate, "subject without slices");
    let mags: Vec<T> = slices.iter().flat_map(|s| s.image.iter().map(|z| z.norm())).collect();
    let p95 = percentile(&mags, 0.95)?;
    ensure!(p95 > T::zero(), Degenerate, "subject `{}` has a zero 95th percentile", slices[0].subject);
    let inv = T::one() / p95;
    let out = slices
        .iter()
        .map(|s| Slice { image: s.image.mapv(|z| z.scale(inv)), ..s.clone() })
        .collect();
    Ok((out, p95))
}
