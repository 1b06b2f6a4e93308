//! Conjugate gradient on the regularised normal equations
//! `(E^H E + lam I) x = rhs`.

use num_complex::Complex;

use super::operator::Encoding;
use crate::error::{ensure, Error, Result};
use crate::scalar::Real;
use crate::CImage;

fn dot<T: Real>(a: &CImage<T>, b: &CImage<T>) -> T {
    // Real part of <a, b>; the Gram operator is Hermitian so this is all CG needs.
    a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

/// Runs exactly `niter` CG iterations from `x0`, stopping early only once the
/// residual has fallen to round-off (`||r|| <= eps ||r_0||`), where further
/// steps would divide by underflowed curvatures. With `lam = 0` and an undersampled mask the
/// operator is singular; the iterate is still returned.
pub fn cg_solve<T: Real>(
    rhs: &CImage<T>,
    enc: &Encoding<T>,
    lam: T,
    niter: usize,
    x0: &CImage<T>,
) -> Result<CImage<T>> {
    cg_solve_traced(rhs, enc, lam, niter, x0).map(|(x, _)| x)
}

/// As [`cg_solve`], also returning `||A x_k - rhs||` for `k = 0..=iterations run`.
pub fn cg_solve_traced<T: Real>(
    rhs: &CImage<T>,
    enc: &Encoding<T>,
    lam: T,
    niter: usize,
    x0: &CImage<T>,
) -> Result<(CImage<T>, Vec<T>)> {
    ensure!(lam >= T::zero(), InvalidParam, "lambda must be non-negative, got {lam}");
    ensure!(rhs.dim() == x0.dim(), Shape, "rhs {:?} vs x0 {:?}", rhs.dim(), x0.dim());
    let apply = |v: &CImage<T>| -> Result<CImage<T>> {
        let mut av = enc.normal(v)?;
        av.zip_mut_with(v, |a, &b| *a = *a + b.scale(lam));
        Ok(av)
    };
    let mut x = x0.to_owned();
    let mut r = rhs - &apply(&x)?;
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut trace = vec![rs.sqrt()];
    let floor = rs * T::epsilon() * T::epsilon();
    for k in 0..niter {
        if rs <= floor {
            break;
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        let alpha = rs / pap;
        if !alpha.is_finite() {
            return Err(Error::NonFinite(format!("CG step size at iteration {k}")));
        }
        x.zip_mut_with(&p, |xv, &pv| *xv = *xv + pv.scale(alpha));
        r.zip_mut_with(&ap, |rv, &av| *rv = *rv - av.scale(alpha));
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        p.zip_mut_with(&r, |pv, &rv| *pv = rv + pv.scale(beta));
        rs = rs_new;
        trace.push(rs.sqrt());
    }
    ensure!(x.iter().all(|z: &Complex<T>| z.re.is_finite() && z.im.is_finite()), NonFinite, "CG iterate");
    Ok((x, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::{synth_coil_maps, CoilMaps, SamplingMask};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_operator_converges_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let maps = CoilMaps::new(ndarray::Array3::from_elem((1, 8, 8), Complex::new(1.0, 0.0))).unwrap();
        let enc = Encoding::new(&maps, &SamplingMask::full((8, 8))).unwrap();
        let rhs = Array2::from_shape_fn((8, 8), |_| Complex::new(rng.random::<f64>(), rng.random::<f64>()));
        let x = cg_solve(&rhs, &enc, 0.5, 2, &Array2::zeros((8, 8))).unwrap();
        for (a, b) in x.iter().zip(rhs.iter()) {
            assert!((a - b / 1.5).norm() < 1e-6);
        }
    }

    #[test]
    fn zero_iterations_return_start() {
        let maps = synth_coil_maps::<f64>((8, 8), 2, 1).unwrap();
        let enc = Encoding::new(&maps, &SamplingMask::full((8, 8))).unwrap();
        let x0 = Array2::from_elem((8, 8), Complex::new(0.3, -0.1));
        let x = cg_solve(&Array2::zeros((8, 8)), &enc, 0.1, 0, &x0).unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn negative_lambda_rejected() {
        let maps = synth_coil_maps::<f64>((8, 8), 1, 1).unwrap();
        let enc = Encoding::new(&maps, &SamplingMask::full((8, 8))).unwrap();
        let z = Array2::zeros((8, 8));
        assert!(cg_solve(&z, &enc, -1.0, 3, &z).is_err());
    }
}
