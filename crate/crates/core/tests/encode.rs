mod common;

use common::{cdot, cnorm, dense_solve, random_image, random_stack, rng};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;
use ufloss::encode::{
    cg_solve, cg_solve_traced, make_mask_1d_random, make_mask_poisson, synth_coil_maps, CoilMaps, Encoding,
    SamplingMask,
};

fn random_operator(seed: u64, shape: (usize, usize), ncoils: usize) -> Encoding<f64> {
    let mut r = rng(seed);
    let maps = synth_coil_maps::<f64>(shape, ncoils, seed).unwrap();
    let mask = if r.random_bool(0.5) {
        make_mask_1d_random(shape, r.random_range(2.0..5.0), 0.125, seed).unwrap()
    } else {
        SamplingMask::from_array(Array2::from_shape_fn(shape, |_| r.random_bool(0.4) as u8)).unwrap()
    };
    Encoding::new(&maps, &mask).unwrap()
}

#[test]
fn adjoint_dot_test() {
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let enc = random_operator(seed, (16, 24), 1 + (seed as usize % 4));
        let x = random_image(&mut r, (16, 24));
        let y = random_stack(&mut r, (enc.ncoils(), 16, 24));
        let ex = enc.forward(&x).unwrap();
        let ehy = enc.adjoint(&y).unwrap();
        let lhs = cdot(&ex, &y);
        let rhs = cdot(&x, &ehy);
        let rel = (lhs - rhs).norm() / (cnorm(&ex) * cnorm(&y));
        assert!(rel < 1e-6, "seed {seed}: {rel}");
    }
}

#[test]
fn linearity_and_mask_idempotence() {
    let mut r = rng(5);
    let enc = random_operator(3, (16, 16), 3);
    let (x1, x2) = (random_image(&mut r, (16, 16)), random_image(&mut r, (16, 16)));
    let a = Complex64::new(0.3, -1.2);
    let lhs = enc.forward(&(x1.mapv(|v| v * a) + &x2)).unwrap();
    let rhs = enc.forward(&x1).unwrap().mapv(|v| v * a) + enc.forward(&x2).unwrap();
    assert!(cnorm(&(&lhs - &rhs)) < 1e-10 * cnorm(&rhs));
    // Applying E^H E twice through the masked domain equals re-masking data once.
    let y = enc.forward(&x1).unwrap();
    let again = enc.forward(&enc.adjoint(&y).unwrap()).unwrap();
    let once = enc.forward(&enc.normal(&x1).unwrap()).unwrap();
    assert!(cnorm(&(&again - &once)) < 1e-10 * cnorm(&once).max(1.0));
}

/// Columns of the dense `E^H E + lam I` built by probing basis vectors.
fn dense_normal(enc: &Encoding<f64>, lam: f64) -> Vec<Vec<Complex64>> {
    let (h, w) = enc.shape();
    let n = h * w;
    let mut a = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for j in 0..n {
        let mut e = Array2::zeros((h, w));
        e[[j / w, j % w]] = Complex64::new(1.0, 0.0);
        let col = enc.normal(&e).unwrap();
        for (i, v) in col.iter().enumerate() {
            a[i][j] = *v;
        }
        a[j][j] += lam;
    }
    a
}

#[test]
fn cg_matches_dense_solve() {
    let lam = 0.05;
    for seed in 0..4 {
        let mut r = rng(seed);
        let maps = CoilMaps::new(Array3::from_elem((1, 16, 16), Complex64::new(1.0, 0.0))).unwrap();
        let mask =
            SamplingMask::from_array(Array2::from_shape_fn((16, 16), |_| r.random_bool(0.35) as u8)).unwrap();
        let enc = Encoding::new(&maps, &mask).unwrap();
        let rhs = random_image(&mut r, (16, 16));
        let x = cg_solve(&rhs, &enc, lam, 50, &Array2::zeros((16, 16))).unwrap();
        let exact = dense_solve(dense_normal(&enc, lam), rhs.iter().copied().collect());
        let err: f64 = x.iter().zip(&exact).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        assert!(err / cnorm(&exact) < 1e-5, "seed {seed}: {}", err / cnorm(&exact));
    }
}

#[test]
fn cg_error_in_a_norm_non_increasing() {
    let enc = random_operator(8, (24, 24), 4);
    let lam = 0.1;
    let rhs = random_image(&mut rng(2), (24, 24));
    let zero = Array2::zeros((24, 24));
    let exact = cg_solve(&rhs, &enc, lam, 200, &zero).unwrap();
    let a_norm = |x: &Array2<Complex64>| {
        let e = x - &exact;
        let ae = enc.normal(&e).unwrap() + e.mapv(|v| v * lam);
        common::cdot(&e, &ae).re.sqrt()
    };
    let errs: Vec<f64> = (0..12).map(|k| a_norm(&cg_solve(&rhs, &enc, lam, k, &zero).unwrap())).collect();
    for w in errs.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9), "A-norm errors {errs:?}");
    }
    let (_, res) = cg_solve_traced(&rhs, &enc, lam, 12, &zero).unwrap();
    assert!(res.last().unwrap() / res[0] < 1e-3);
}

#[test]
fn identity_encoding_cg() {
    let maps = CoilMaps::new(Array3::from_elem((1, 8, 8), Complex64::new(1.0, 0.0))).unwrap();
    let enc = Encoding::new(&maps, &SamplingMask::full((8, 8))).unwrap();
    let rhs = random_image(&mut rng(1), (8, 8));
    let x = cg_solve(&rhs, &enc, 0.5, 2, &Array2::zeros((8, 8))).unwrap();
    assert!(cnorm(&(&x - &rhs.mapv(|v| v / 1.5))) < 1e-6);
}

#[test]
fn poisson_calibration_is_sampled_for_several_seeds() {
    for seed in 0..3 {
        let m = make_mask_poisson((64, 64), 4.0, 12, seed).unwrap();
        assert!((0.225..=0.275).contains(&m.sampled_fraction()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn adjointness_holds_for_any_mask(bits in proptest::collection::vec(any::<bool>(), 64), seed in 0u64..1000) {
        prop_assume!(bits.iter().any(|&b| b));
        let mask = SamplingMask::from_array(Array2::from_shape_fn((8, 8), |(i, j)| bits[i * 8 + j] as u8)).unwrap();
        let maps = synth_coil_maps::<f64>((8, 8), 2, seed).unwrap();
        let enc = Encoding::new(&maps, &mask).unwrap();
        let mut r = rng(seed);
        let x = random_image(&mut r, (8, 8));
        let y = random_stack(&mut r, (2, 8, 8));
        let lhs = cdot(&enc.forward(&x).unwrap(), &y);
        let rhs = cdot(&x, &enc.adjoint(&y).unwrap());
        prop_assert!((lhs - rhs).norm() < 1e-9 * (1.0 + lhs.norm()));
    }
}
