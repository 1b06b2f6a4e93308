//! The multi-coil encoding operator `E = U F S` and its adjoint.

use ndarray::{Array2, Array3, Axis, Zip};
use num_complex::Complex;

use super::coils::CoilMaps;
use super::fft::Fft2;
use super::mask::SamplingMask;
use crate::error::{ensure, Result};
use crate::scalar::Real;
use crate::{CImage, CStack};

/// Encoding operator bound to one set of coil maps and one mask.
#[derive(Clone, Debug)]
pub struct Encoding<T: Real> {
    maps: Array3<Complex<T>>,
    mask: Array2<T>,
    fft: Fft2<T>,
}

impl<T: Real> Encoding<T> {
    pub fn new(maps: &CoilMaps<T>, mask: &SamplingMask) -> Result<Self> {
        ensure!(
            maps.shape() == mask.shape(),
            Shape,
            "coil maps {:?} vs mask {:?}",
            maps.shape(),
            mask.shape()
        );
        let (h, w) = mask.shape();
        Ok(Encoding {
            maps: maps.maps.as_standard_layout().into_owned(),
            mask: mask.mask.mapv(|m| if m == 1 { T::one() } else { T::zero() }),
            fft: Fft2::new(h, w),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn ncoils(&self) -> usize {
        self.maps.len_of(Axis(0))
    }

    fn check_image(&self, x: &CImage<T>) -> Result<()> {
        ensure!(x.dim() == self.shape(), Shape, "image {:?} vs operator {:?}", x.dim(), self.shape());
        Ok(())
    }

    /// `y_c = U F (S_c x)` for every coil.
    pub fn forward(&self, x: &CImage<T>) -> Result<CStack<T>> {
        self.check_image(x)?;
        let (h, w) = self.shape();
        let mut out = Array3::zeros((self.ncoils(), h, w));
        for (c, mut yc) in out.outer_iter_mut().enumerate() {
            Zip::from(&mut yc).and(self.maps.index_axis(Axis(0), c)).and(x).for_each(|o, &s, &v| *o = s * v);
            self.fft.forward_in_place(yc.as_slice_mut().expect("contiguous"));
            Zip::from(&mut yc).and(&self.mask).for_each(|o, &m| *o = o.scale(m));
        }
        Ok(out)
    }

    /// `x = sum_c conj(S_c) F^H (U y_c)`.
    pub fn adjoint(&self, y: &CStack<T>) -> Result<CImage<T>> {
        let (h, w) = self.shape();
        ensure!(
            y.dim() == (self.ncoils(), h, w),
            Shape,
            "k-space {:?} vs operator ({}, {h}, {w})",
            y.dim(),
            self.ncoils()
        );
        let mut out = Array2::zeros((h, w));
        let mut buf = Array2::zeros((h, w));
        for (c, yc) in y.outer_iter().enumerate() {
            Zip::from(&mut buf).and(&yc).and(&self.mask).for_each(|b, &v, &m| *b = v.scale(m));
            self.fft.inverse_in_place(buf.as_slice_mut().expect("contiguous"));
            Zip::from(&mut out)
                .and(&buf)
                .and(self.maps.index_axis(Axis(0), c))
                .for_each(|o, &b, &s| *o = *o + s.conj() * b);
        }
        Ok(out)
    }

    /// Gram operator `E^H E x`. The mask is applied once since `U^2 = U`.
    pub fn normal(&self, x: &CImage<T>) -> Result<CImage<T>> {
        self.check_image(x)?;
        let x = x.as_standard_layout();
        let mut out = vec![Complex::new(T::zero(), T::zero()); x.len()];
        self.normal_slice(x.as_slice().expect("standard layout"), &mut out);
        let (h, w) = self.shape();
        Ok(Array2::from_shape_vec((h, w), out).expect("shape"))
    }

    /// Gram operator on a row-major complex buffer, accumulating nothing:
    /// `out` is overwritten.
    pub fn normal_slice(&self, x: &[Complex<T>], out: &mut [Complex<T>]) {
        let n = x.len();
        let maps = self.maps.as_slice().expect("standard layout");
        let mask = self.mask.as_slice().expect("standard layout");
        out.iter_mut().for_each(|o| *o = Complex::new(T::zero(), T::zero()));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for c in 0..self.ncoils() {
            let s = &maps[c * n..(c + 1) * n];
            for ((b, &sv), &xv) in buf.iter_mut().zip(s).zip(x) {
                *b = sv * xv;
            }
            self.fft.forward_in_place(&mut buf);
            for (b, &m) in buf.iter_mut().zip(mask) {
                *b = b.scale(m);
            }
            self.fft.inverse_in_place(&mut buf);
            for ((o, &sv), &b) in out.iter_mut().zip(s).zip(buf.iter()) {
                *o = *o + sv.conj() * b;
            }
        }
    }

    /// Gram operator on planar storage `[re plane, im plane]` of length `2HW`.
    pub fn normal_planar(&self, x: &[T], out: &mut [T]) {
        let n = x.len() / 2;
        let z: Vec<Complex<T>> = (0..n).map(|i| Complex::new(x[i], x[n + i])).collect();
        let mut r = vec![Complex::new(T::zero(), T::zero()); n];
        self.normal_slice(&z, &mut r);
        for (i, v) in r.iter().enumerate() {
            out[i] = v.re;
            out[n + i] = v.im;
        }
    }
}
