//! Periodic orthonormal Daubechies-4 wavelet transform in 2D.

use ndarray::Array2;
use num_complex::Complex;

use crate::error::{ensure, Result};
use crate::scalar::Real;

fn lowpass<T: Real>() -> [T; 4] {
    let s3 = 3f64.sqrt();
    let d = 4.0 * std::f64::consts::SQRT_2;
    [(1.0 + s3) / d, (3.0 + s3) / d, (3.0 - s3) / d, (1.0 - s3) / d].map(T::lit)
}

fn highpass<T: Real>() -> [T; 4] {
    let h = lowpass::<T>();
    [h[3], -h[2], h[1], -h[0]]
}

/// One analysis step on `x` (length `n`, even), writing `[approx | detail]`.
fn analyze<T: Real>(x: &[Complex<T>], out: &mut [Complex<T>]) {
    let n = x.len();
    let (h, g) = (lowpass::<T>(), highpass::<T>());
    let half = n / 2;
    for i in 0..half {
        let (mut a, mut d) = (Complex::new(T::zero(), T::zero()), Complex::new(T::zero(), T::zero()));
        for k in 0..4 {
            let v = x[(2 * i + k) % n];
            a = a + v.scale(h[k]);
            d = d + v.scale(g[k]);
        }
        out[i] = a;
        out[half + i] = d;
    }
}

/// Inverse of [`analyze`].
fn synthesize<T: Real>(c: &[Complex<T>], out: &mut [Complex<T>]) {
    let n = c.len();
    let (h, g) = (lowpass::<T>(), highpass::<T>());
    let half = n / 2;
    out.iter_mut().for_each(|v| *v = Complex::new(T::zero(), T::zero()));
    for i in 0..half {
        for k in 0..4 {
            let j = (2 * i + k) % n;
            out[j] = out[j] + c[i].scale(h[k]) + c[half + i].scale(g[k]);
        }
    }
}

fn check_levels(shape: (usize, usize), levels: usize) -> Result<()> {
    let f = 1usize << levels;
    ensure!(
        shape.0 % f == 0 && shape.1 % f == 0 && shape.0 >= 2 * f && shape.1 >= 2 * f,
        InvalidParam,
        "{levels} wavelet levels need dimensions divisible by {f} (and at least {}), got {shape:?}",
        2 * f
    );
    Ok(())
}

/// Applies a 1D step to every row and column of the top-left `rows x cols`
/// block.
fn apply_block<T: Real>(
    a: &mut Array2<Complex<T>>,
    rows: usize,
    cols: usize,
    step: fn(&[Complex<T>], &mut [Complex<T>]),
) {
    let mut buf = vec![Complex::new(T::zero(), T::zero()); rows.max(cols)];
    let mut line = buf.clone();
    for i in 0..rows {
        for j in 0..cols {
            line[j] = a[[i, j]];
        }
        step(&line[..cols], &mut buf[..cols]);
        for j in 0..cols {
            a[[i, j]] = buf[j];
        }
    }
    for j in 0..cols {
        for i in 0..rows {
            line[i] = a[[i, j]];
        }
        step(&line[..rows], &mut buf[..rows]);
        for i in 0..rows {
            a[[i, j]] = buf[i];
        }
    }
}

/// Forward transform in Mallat layout (coarsest approximation top-left).
pub fn dwt2<T: Real>(x: &Array2<Complex<T>>, levels: usize) -> Result<Array2<Complex<T>>> {
    check_levels(x.dim(), levels)?;
    let mut a = x.as_standard_layout().into_owned();
    let (mut r, mut c) = x.dim();
    for _ in 0..levels {
        apply_block(&mut a, r, c, analyze);
        r /= 2;
        c /= 2;
    }
    Ok(a)
}

/// Inverse of [`dwt2`].
pub fn idwt2<T: Real>(coeffs: &Array2<Complex<T>>, levels: usize) -> Result<Array2<Complex<T>>> {
    check_levels(coeffs.dim(), levels)?;
    let mut a = coeffs.as_standard_layout().into_owned();
    let (h, w) = coeffs.dim();
    for l in (0..levels).rev() {
        // Columns were analysed last, so undo them first.
        let (r, c) = (h >> l, w >> l);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); r.max(c)];
        let mut line = buf.clone();
        for j in 0..c {
            for i in 0..r {
                line[i] = a[[i, j]];
            }
            synthesize(&line[..r], &mut buf[..r]);
            for i in 0..r {
                a[[i, j]] = buf[i];
            }
        }
        for i in 0..r {
            for j in 0..c {
                line[j] = a[[i, j]];
            }
            synthesize(&line[..c], &mut buf[..c]);
            for j in 0..c {
                a[[i, j]] = buf[j];
            }
        }
    }
    Ok(a)
}

/// Complex soft threshold: shrinks magnitudes by `t`, keeps phase.
pub fn soft_threshold<T: Real>(z: Complex<T>, t: T) -> Complex<T> {
    let m = z.norm();
    if m <= t {
        Complex::new(T::zero(), T::zero())
    } else {
        z.scale((m - t) / m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize), seed: u64) -> Array2<Complex<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| Complex::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
    }

    #[test]
    fn orthonormal_round_trip_and_parseval() {
        for &(shape, levels) in &[((32, 32), 3), ((64, 48), 3), ((16, 8), 2)] {
            let x = random(shape, 4);
            let c = dwt2(&x, levels).unwrap();
            let back = idwt2(&c, levels).unwrap();
            let err = (&back - &x).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!(err < 1e-8, "round trip error {err}");
            let (ex, ec) = (x.iter().map(|v| v.norm_sqr()).sum::<f64>(), c.iter().map(|v| v.norm_sqr()).sum::<f64>());
            assert!((ex - ec).abs() < 1e-8 * ex);
        }
    }

    #[test]
    fn filters_have_vanishing_moments() {
        let g = highpass::<f64>();
        let m0: f64 = g.iter().sum();
        let m1: f64 = g.iter().enumerate().map(|(k, v)| k as f64 * v).sum();
        assert!(m0.abs() < 1e-12 && m1.abs() < 1e-12);
        // A linear ramp has no detail energy away from the periodic wrap.
        let x = Array2::from_shape_fn((16, 16), |(_, j)| Complex::new(j as f64, 0.0));
        let c = dwt2(&x, 1).unwrap();
        for i in 0..16 {
            for j in 8..15 {
                assert!(c[[i, j]].norm() < 1e-10);
            }
        }
    }

    #[test]
    fn soft_threshold_preserves_phase() {
        let z = Complex::from_polar(3.0f64, 0.7);
        let s = soft_threshold(z, 1.0);
        assert!((s.norm() - 2.0).abs() < 1e-12 && (s.arg() - 0.7).abs() < 1e-12);
        assert_eq!(soft_threshold(z, 5.0), Complex::new(0.0, 0.0));
    }

    #[test]
    fn incompatible_levels_rejected() {
        assert!(dwt2(&random((20, 20), 0), 3).is_err());
    }
}
