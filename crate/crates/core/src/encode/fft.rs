//! Centered, orthonormal 2D FFT.
//!
//! DC sits at index `(H/2, W/2)` and both directions carry a `1/sqrt(HW)`
//! factor, so the transform is unitary.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Real;

/// Cached plans for one `(H, W)` shape.
pub struct Fft2<T: Real> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    scale: T,
}

impl<T: Real> Clone for Fft2<T> {
    fn clone(&self) -> Self {
        Fft2 {
            h: self.h,
            w: self.w,
            row_fwd: self.row_fwd.clone(),
            row_inv: self.row_inv.clone(),
            col_fwd: self.col_fwd.clone(),
            col_inv: self.col_inv.clone(),
            scale: self.scale,
        }
    }
}

impl<T: Real> std::fmt::Debug for Fft2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.h, self.w)
    }
}

impl<T: Real> Fft2<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
            scale: T::one() / T::lit((h * w) as f64).sqrt(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// In-place centered forward transform of a row-major `H x W` buffer.
    pub fn forward_in_place(&self, buf: &mut [Complex<T>]) {
        self.transform(buf, true);
    }

    /// In-place centered inverse transform of a row-major `H x W` buffer.
    pub fn inverse_in_place(&self, buf: &mut [Complex<T>]) {
        self.transform(buf, false);
    }

    pub fn forward(&self, x: &Array2<Complex<T>>) -> Array2<Complex<T>> {
        let mut out = x.as_standard_layout().into_owned();
        self.forward_in_place(out.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn inverse(&self, x: &Array2<Complex<T>>) -> Array2<Complex<T>> {
        let mut out = x.as_standard_layout().into_owned();
        self.inverse_in_place(out.as_slice_mut().expect("standard layout"));
        out
    }

    fn transform(&self, buf: &mut [Complex<T>], forward: bool) {
        let (h, w) = (self.h, self.w);
        assert_eq!(buf.len(), h * w, "fft2: buffer does not match plan shape");
        // ifftshift moves the centre to index 0, fftshift moves it back.
        roll2(buf, h, w, h - h / 2, w - w / 2);
        let (rows, cols) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        rows.process(buf);
        let mut t = transpose(buf, h, w);
        cols.process(&mut t);
        let back = transpose(&t, w, h);
        buf.copy_from_slice(&back);
        roll2(buf, h, w, h / 2, w / 2);
        let s = self.scale;
        for z in buf.iter_mut() {
            *z = z.scale(s);
        }
    }
}

fn transpose<T: Copy + Default>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let mut dst = vec![T::default(); h * w];
    for i in 0..h {
        for j in 0..w {
            dst[j * h + i] = src[i * w + j];
        }
    }
    dst
}

/// Circular shift so that element `(i, j)` moves to `((i + dr) % h, (j + dc) % w)`.
fn roll2<T: Copy + Default>(buf: &mut [T], h: usize, w: usize, dr: usize, dc: usize) {
    if dr % h == 0 && dc % w == 0 {
        return;
    }
    let src = buf.to_vec();
    for i in 0..h {
        let ti = (i + dr) % h;
        for j in 0..w {
            buf[ti * w + (j + dc) % w] = src[i * w + j];
        }
    }
}

/// Centered orthonormal forward transform.
pub fn fft2c<T: Real>(x: &Array2<Complex<T>>) -> Array2<Complex<T>> {
    let (h, w) = x.dim();
    Fft2::new(h, w).forward(x)
}

/// Centered orthonormal inverse transform.
pub fn ifft2c<T: Real>(x: &Array2<Complex<T>>) -> Array2<Complex<T>> {
    let (h, w) = x.dim();
    Fft2::new(h, w).inverse(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Array2<Complex<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| Complex::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
    }

    fn norm(x: &Array2<Complex<f64>>) -> f64 {
        x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn constant_image_concentrates_at_center() {
        let x = Array2::from_elem((8, 8), Complex::new(1.0f64, 0.0));
        let k = fft2c(&x);
        assert!((k[[4, 4]] - Complex::new(8.0, 0.0)).norm() < 1e-12);
        let off: f64 = k.indexed_iter().filter(|(ix, _)| *ix != (4, 4)).map(|(_, z)| z.norm()).sum();
        assert!(off < 1e-12);
    }

    #[test]
    fn round_trip_and_parseval() {
        for &(h, w) in &[(32, 32), (7, 10), (9, 5)] {
            let x = random(h, w, 3);
            let k = fft2c(&x);
            let back = ifft2c(&k);
            let err = norm(&(&back - &x)) / norm(&x);
            assert!(err < 1e-6, "round trip {h}x{w}: {err}");
            assert!((norm(&k) - norm(&x)).abs() < 1e-6);
        }
    }

    #[test]
    fn odd_size_dc_location() {
        let x = Array2::from_elem((5, 7), Complex::new(1.0f64, 0.0));
        let k = fft2c(&x);
        assert!((k[[2, 3]].re - (35f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn inverse_is_adjoint_of_forward() {
        let x = random(6, 10, 1);
        let y = random(6, 10, 2);
        let fx = fft2c(&x);
        let fhy = ifft2c(&y);
        let lhs: Complex<f64> = fx.iter().zip(y.iter()).map(|(a, b)| a * b.conj()).sum();
        let rhs: Complex<f64> = x.iter().zip(fhy.iter()).map(|(a, b)| a * b.conj()).sum();
        assert!((lhs - rhs).norm() < 1e-12);
    }
}
