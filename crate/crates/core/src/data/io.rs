//! Dataset and k-space archive files.
//!
//! Dataset files hold `image` (complex64 `[N, H, W]`), `contrast` and
//! `subject` (string `[N]`) plus the split name and per-subject scales.

use std::path::Path;

use ndarray::{Array3, Array4, Axis, Ix3, Ix4};
use num_complex::Complex;

use super::{Dataset, Slice, Split};
use crate::container::Container;
use crate::encode::{ifft2c, CoilMaps, KSpaceSample, SamplingMask};
use crate::error::{ensure, Error, Result};
use crate::scalar::Real;

pub fn dataset_to_container<T: Real>(ds: &Dataset<T>) -> Result<Container> {
    ensure!(!ds.is_empty(), Degenerate, "cannot store an empty dataset");
    let (h, w) = ds.slices[0].shape();
    ensure!(ds.slices.iter().all(|s| s.shape() == (h, w)), Shape, "dataset slices differ in shape");
    let mut images = Array3::zeros((ds.len(), h, w));
    for (mut dst, s) in images.outer_iter_mut().zip(&ds.slices) {
        dst.assign(&s.image);
    }
    let mut c = Container::new();
    c.put_complex("image", &images);
    c.put_strings("contrast", &ds.slices.iter().map(|s| s.contrast.clone()).collect::<Vec<_>>());
    c.put_strings("subject", &ds.slices.iter().map(|s| s.subject.clone()).collect::<Vec<_>>());
    c.put_text("split", ds.split.as_str());
    let (names, scales): (Vec<String>, Vec<T>) = ds.scales.iter().map(|(k, v)| (k.clone(), *v)).unzip();
    c.put_strings("scale_subject", &names);
    c.put_real("scale", &ndarray::Array1::from(scales));
    Ok(c)
}

pub fn dataset_from_container<T: Real>(c: &Container) -> Result<Dataset<T>> {
    let images = c.complex::<T>("image")?.into_dimensionality::<Ix3>().map_err(|e| Error::Shape(e.to_string()))?;
    let contrast = c.strings("contrast")?;
    let subject = c.strings("subject")?;
    let n = images.len_of(Axis(0));
    ensure!(contrast.len() == n && subject.len() == n, Shape, "label arrays do not match {n} images");
    let slices = images
        .outer_iter()
        .zip(contrast.into_iter().zip(subject))
        .map(|(img, (ct, sb))| Slice::new(img.to_owned(), ct, sb))
        .collect::<Result<Vec<_>>>()?;
    let split = match c.text("split").as_deref() {
        Ok("val") => Split::Val,
        Ok("test") => Split::Test,
        _ => Split::Train,
    };
    let mut ds = Dataset::new(slices, split);
    if let (Ok(names), Ok(scales)) = (c.strings("scale_subject"), c.real::<T>("scale")) {
        ds.scales = names.into_iter().zip(scales.iter().copied()).collect();
    }
    Ok(ds)
}

pub fn save_dataset<T: Real>(ds: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    dataset_to_container(ds)?.save(path)
}

pub fn load_dataset<T: Real>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    dataset_from_container(&Container::load(path)?)
}

/// Multi-coil slices read from a container with `kspace` (complex
/// `[N, C, H, W]`, or `[C, H, W]` for a single slice) and optional `maps`,
/// `mask` (uint8 `[N, H, W]`) and `image` targets.
#[derive(Clone, Debug)]
pub struct KSpaceArchive<T: Real> {
    pub kspace: Array4<Complex<T>>,
    pub maps: Option<Array4<Complex<T>>>,
    pub masks: Option<Array3<u8>>,
    pub images: Option<Array3<Complex<T>>>,
}

impl<T: Real> KSpaceArchive<T> {
    pub fn len(&self) -> usize {
        self.kspace.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reference image of slice `i`: the stored target if present, else the
    /// coil combination of the fully sampled k-space (sensitivity-weighted
    /// when maps are available, root-sum-of-squares otherwise).
    pub fn reference(&self, i: usize) -> CImageResult<T> {
        if let Some(img) = &self.images {
            return Ok(img.index_axis(Axis(0), i).to_owned());
        }
        let k = self.kspace.index_axis(Axis(0), i);
        let coil_imgs: Vec<_> = k.outer_iter().map(|kc| ifft2c(&kc.to_owned())).collect();
        let (h, w) = coil_imgs[0].dim();
        let mut out = ndarray::Array2::zeros((h, w));
        match &self.maps {
            Some(maps) => {
                for (c, img) in coil_imgs.iter().enumerate() {
                    let s = maps.slice(ndarray::s![i, c, .., ..]);
                    ndarray::Zip::from(&mut out).and(img).and(&s).for_each(|o, &x, &m| *o = *o + m.conj() * x);
                }
            }
            None => {
                for img in &coil_imgs {
                    ndarray::Zip::from(&mut out).and(img).for_each(|o: &mut Complex<T>, &x| o.re = o.re + x.norm_sqr());
                }
                out.mapv_inplace(|z| Complex::new(z.re.sqrt(), T::zero()));
            }
        }
        Ok(out)
    }

    /// Converts slice `i` into a sample, applying `mask` when the archive
    /// holds fully sampled data.
    pub fn sample(&self, i: usize, fallback_maps: Option<&CoilMaps<T>>, mask: Option<&SamplingMask>) -> Result<KSpaceSample<T>> {
        let maps = match (&self.maps, fallback_maps) {
            (Some(m), _) => CoilMaps::new(m.index_axis(Axis(0), i).to_owned())?,
            (None, Some(m)) => m.clone(),
            (None, None) => return Err(Error::MissingKey("maps".into())),
        };
        let mask = match (&self.masks, mask) {
            (_, Some(m)) => m.clone(),
            (Some(ms), None) => SamplingMask::from_array(ms.index_axis(Axis(0), i).to_owned())?,
            (None, None) => SamplingMask::full(maps.shape()),
        };
        let mut y = self.kspace.index_axis(Axis(0), i).to_owned();
        for mut yc in y.outer_iter_mut() {
            ndarray::Zip::from(&mut yc).and(&mask.mask).for_each(|v, &m| {
                if m == 0 {
                    *v = Complex::new(T::zero(), T::zero());
                }
            });
        }
        let target = Slice::new(self.reference(i)?, "unknown", format!("slice-{i}"))?;
        Ok(KSpaceSample { y, maps, mask, target })
    }
}

type CImageResult<T> = Result<crate::CImage<T>>;

pub fn load_kspace_archive<T: Real>(path: impl AsRef<Path>) -> Result<KSpaceArchive<T>> {
    kspace_archive_from_container(&Container::load(path)?)
}

pub fn kspace_archive_from_container<T: Real>(c: &Container) -> Result<KSpaceArchive<T>> {
    let to4 = |key: &str| -> Result<Array4<Complex<T>>> {
        let a = c.complex::<T>(key)?;
        let a = if a.ndim() == 3 { a.insert_axis(Axis(0)) } else { a };
        a.into_dimensionality::<Ix4>().map_err(|e| Error::Shape(format!("`{key}`: {e}")))
    };
    let kspace = to4("kspace")?;
    let maps = if c.contains("maps") { Some(to4("maps")?) } else { None };
    if let Some(m) = &maps {
        ensure!(m.dim() == kspace.dim(), Shape, "maps {:?} vs kspace {:?}", m.dim(), kspace.dim());
    }
    let masks = if c.contains("mask") {
        let m = c.u8("mask")?;
        let m = if m.ndim() == 2 { m.insert_axis(Axis(0)) } else { m };
        Some(m.into_dimensionality::<Ix3>().map_err(|e| Error::Shape(e.to_string()))?)
    } else {
        None
    };
    let images = if c.contains("image") {
        let m = c.complex::<T>("image")?;
        let m = if m.ndim() == 2 { m.insert_axis(Axis(0)) } else { m };
        Some(m.into_dimensionality::<Ix3>().map_err(|e| Error::Shape(e.to_string()))?)
    } else {
        None
    };
    Ok(KSpaceArchive { kspace, maps, masks, images })
}

/// Stores simulated samples in the archive layout read by [`load_kspace_archive`].
pub fn samples_to_container<T: Real>(samples: &[KSpaceSample<T>]) -> Result<Container> {
    ensure!(!samples.is_empty(), Degenerate, "no samples to store");
    let (c, h, w) = samples[0].y.dim();
    let n = samples.len();
    let mut k = Array4::zeros((n, c, h, w));
    let mut m = Array4::zeros((n, c, h, w));
    let mut masks = Array3::<u8>::zeros((n, h, w));
    let mut imgs = Array3::zeros((n, h, w));
    for (i, s) in samples.iter().enumerate() {
        ensure!(s.y.dim() == (c, h, w), Shape, "sample {i} has k-space {:?}", s.y.dim());
        k.index_axis_mut(Axis(0), i).assign(&s.y);
        m.index_axis_mut(Axis(0), i).assign(&s.maps.maps);
        masks.index_axis_mut(Axis(0), i).assign(&s.mask.mask);
        imgs.index_axis_mut(Axis(0), i).assign(&s.target.image);
    }
    let mut out = Container::new();
    out.put_complex("kspace", &k);
    out.put_complex("maps", &m);
    out.put_u8("mask", &masks);
    out.put_complex("image", &imgs);
    out.put_strings("subject", &samples.iter().map(|s| s.target.subject.clone()).collect::<Vec<_>>());
    Ok(out)
}

/// Inverse of [`samples_to_container`].
pub fn samples_from_container<T: Real>(c: &Container) -> Result<Vec<KSpaceSample<T>>> {
    let arch = kspace_archive_from_container::<T>(c)?;
    let subjects = c.strings("subject").ok();
    (0..arch.len())
        .map(|i| {
            let mut s = arch.sample(i, None, None)?;
            if let Some(names) = &subjects {
                s.target.subject = names[i].clone();
                s.target.contrast = "synthetic".into();
            }
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_phantom_dataset;
    use crate::encode::{simulate_dataset, MaskSpec};

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.npz");
        let ds = make_phantom_dataset::<f32>(2, (64, 64), 1).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset::<f32>(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn sample_archive_round_trip() {
        let ds = make_phantom_dataset::<f32>(2, (64, 64), 2).unwrap();
        let spec = MaskSpec::Random1d { acceleration: 4.0, center_fraction: 0.08 };
        let samples = simulate_dataset(&ds, 3, &spec, 5).unwrap();
        let c = samples_to_container(&samples).unwrap();
        let back = samples_from_container::<f32>(&c).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&samples) {
            assert_eq!(a.y, b.y);
            assert_eq!(a.mask.mask, b.mask.mask);
            assert_eq!(a.target.image, b.target.image);
            assert_eq!(a.target.subject, b.target.subject);
        }
    }

    #[test]
    fn rss_reference_without_maps() {
        let ds = make_phantom_dataset::<f64>(1, (64, 64), 3).unwrap();
        let spec = MaskSpec::Random1d { acceleration: 1.0, center_fraction: 0.08 };
        let samples = simulate_dataset(&ds, 4, &spec, 1).unwrap();
        let mut c = Container::new();
        c.put_complex("kspace", &samples[0].y);
        let arch = kspace_archive_from_container::<f64>(&c).unwrap();
        let rss = arch.reference(0).unwrap();
        // Maps are normalised, so root-sum-of-squares recovers |x| (stored as complex64).
        for (a, b) in rss.iter().zip(samples[0].target.image.iter()) {
            assert!((a.re - b.norm()).abs() < 1e-5);
        }
    }
}
