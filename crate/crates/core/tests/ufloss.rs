mod common;

use common::{fd_gradient, random_image, rel_err, rng};
use ndarray::Array2;
use num_complex::Complex64;
use ufloss::autodiff::Tensor;
use ufloss::data::make_phantom_dataset;
use ufloss::featnet::{FeatNet, FeatNetConfig};
use ufloss::ufloss::{draw_shift, recon_loss, ufloss, ufloss_mse_form, ufloss_with_grad, LossLog, UflossConfig};

fn tiny(seed: u64) -> FeatNet<f64> {
    FeatNet::new(FeatNetConfig::tiny(16), seed).unwrap()
}

fn cfg(stride: usize) -> UflossConfig {
    UflossConfig { patch_size: 16, stride, ..UflossConfig::default() }
}

fn smooth_pair(seed: u64) -> (Array2<Complex64>, Array2<Complex64>) {
    let x = make_phantom_dataset::<f64>(1, (64, 64), seed).unwrap().slices.remove(0).image;
    let mut r = rng(seed);
    let noise = random_image(&mut r, (64, 64));
    let xhat = &x + &noise.mapv(|v| v * 0.2);
    (x, xhat)
}

#[test]
fn identical_images_have_zero_loss() {
    let net = tiny(1);
    let (x, _) = smooth_pair(3);
    assert!(ufloss(&x, &x, &net, &cfg(5), (2, 4)).unwrap().abs() < 1e-6);
    let r = recon_loss(&x, &x, Some(&net), &cfg(5), 9).unwrap();
    assert_eq!(r.total, 0.0);
}

#[test]
fn dual_forms_agree_and_are_symmetric() {
    let net = tiny(2);
    for seed in 0..10 {
        let (x, xhat) = smooth_pair(seed);
        let shift = draw_shift(&cfg(5), seed);
        let a = ufloss(&x, &xhat, &net, &cfg(5), shift).unwrap();
        let b = ufloss_mse_form(&x, &xhat, &net, &cfg(5), shift).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        assert!((0.0..=2.0).contains(&a));
        let c = ufloss(&xhat, &x, &net, &cfg(5), shift).unwrap();
        assert!((a - c).abs() < 1e-12);
    }
}

/// Sets a named parameter tensor.
fn set(net: &mut FeatNet<f64>, name: &str, f: impl Fn(&[usize]) -> f64) {
    let id = net.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let shape = net.params.get(id).shape().to_vec();
    let strides: Vec<usize> = (0..shape.len()).map(|i| shape[i + 1..].iter().product()).collect();
    *net.params.get_mut(id) = Tensor::from_fn(&shape, |flat| {
        let idx: Vec<usize> = strides.iter().zip(&shape).map(|(s, d)| flat / s % d).collect();
        f(&idx)
    });
}

#[test]
fn orthogonal_features_give_unit_loss() {
    // Channel 0 sees relu(re), channel 1 relu(-re); residual branches are
    // zeroed so the head reads the two pooled channels into e0 and e1.
    let mut net = tiny(0);
    let names: Vec<String> = net.params.names().to_vec();
    for n in &names {
        let unit = n.ends_with(".gamma");
        set(&mut net, n, |_| unit as u8 as f64);
    }
    set(&mut net, "stem.w", |i| match (i[0], i[1], i[2], i[3]) {
        (0, 0, 1, 1) => 1.0,
        (1, 0, 1, 1) => -1.0,
        _ => 0.0,
    });
    set(&mut net, "stage1.block0.shortcut.w", |i| (i[0] == i[1]) as u8 as f64);
    set(&mut net, "head.w", |i| (i[0] == i[1] && i[0] < 2) as u8 as f64);
    let x = Array2::from_shape_fn((32, 32), |(i, j)| Complex64::new(1.0 + ((i * j) % 7) as f64, 0.3));
    let xhat = x.mapv(|v| Complex64::new(-v.re, v.im));
    let l = ufloss(&x, &xhat, &net, &cfg(8), (0, 0)).unwrap();
    assert!((l - 1.0).abs() < 1e-12, "loss {l}");
}

#[test]
fn gradient_matches_finite_differences() {
    let net = tiny(6);
    let (x, xhat) = {
        let mut r = rng(5);
        let x = random_image(&mut r, (48, 48));
        let xhat = &x + &random_image(&mut r, (48, 48)).mapv(|v| v * 0.3);
        (x, xhat)
    };
    let c = cfg(8);
    let (v, g) = ufloss_with_grad(&x, &xhat, &net, &c, (3, 1)).unwrap();
    assert!((v - ufloss(&x, &xhat, &net, &c, (3, 1)).unwrap()).abs() < 1e-9);
    let planar = Tensor::from_complex(&xhat);
    let analytic = Tensor::from_complex(&g).into_data();
    let numeric = fd_gradient(planar.data(), 1e-5, |p| {
        let img = Tensor::new(vec![2, 48, 48], p.to_vec()).unwrap().to_complex().unwrap();
        ufloss(&x, &img, &net, &c, (3, 1)).unwrap()
    });
    let e = rel_err(&analytic, &numeric);
    assert!(e < 1e-3, "relative error {e}");
}

#[test]
fn recon_loss_components() {
    let net = tiny(7);
    let (x, xhat) = smooth_pair(8);
    let sq: f64 = x.iter().zip(&xhat).map(|(a, b)| (a - b).norm_sqr()).sum();
    let c0 = UflossConfig { mu: 0.0, ..cfg(5) };
    let r0 = recon_loss(&x, &xhat, Some(&net), &c0, 1).unwrap();
    assert_eq!(r0.total, sq);
    assert_eq!(recon_loss(&x, &xhat, None, &cfg(5), 1).unwrap().total, sq);
    let a = recon_loss(&x, &xhat, Some(&net), &cfg(5), 42).unwrap();
    let b = recon_loss(&x, &xhat, Some(&net), &cfg(5), 42).unwrap();
    assert_eq!(a.total.to_bits(), b.total.to_bits());
    assert!((a.total - (a.mse_part + 1.5 * a.ufloss_part)).abs() < 1e-12);
    let shift = draw_shift(&cfg(5), 42);
    assert!((a.ufloss_part - 2.0 * ufloss(&x, &xhat, &net, &cfg(5), shift).unwrap()).abs() < 1e-9);
}

#[test]
fn shifts_cover_the_stride_uniformly() {
    let c = cfg(5);
    let mut counts = [[0usize; 5]; 5];
    for s in 0..5000 {
        let (a, b) = draw_shift(&c, s);
        counts[a][b] += 1;
    }
    assert!(counts.iter().flatten().all(|&n| (120..=280).contains(&n)), "{counts:?}");
}

#[test]
fn all_shift_mean_is_translation_covariant() {
    // Content sits well inside a zero canvas so translating by one stride
    // only swaps all-zero patches at the border.
    let net = tiny(9);
    let c = cfg(5);
    let mut r = rng(3);
    let mut x = Array2::<Complex64>::zeros((80, 80));
    let mut xhat = Array2::<Complex64>::zeros((80, 80));
    let (a, b) = (random_image(&mut r, (32, 32)), random_image(&mut r, (32, 32)));
    x.slice_mut(ndarray::s![24..56, 24..56]).assign(&a);
    xhat.slice_mut(ndarray::s![24..56, 24..56]).assign(&(&a + &b.mapv(|v| v * 0.5)));
    let roll = |m: &Array2<Complex64>| Array2::from_shape_fn((80, 80), |(i, j)| if i >= 5 && j >= 5 { m[[i - 5, j - 5]] } else { Complex64::new(0.0, 0.0) });
    let mean = |x: &Array2<Complex64>, y: &Array2<Complex64>| {
        let mut s = 0.0;
        for dr in 0..5 {
            for dc in 0..5 {
                s += ufloss(x, y, &net, &c, (dr, dc)).unwrap();
            }
        }
        s / 25.0
    };
    let (m0, m1) = (mean(&x, &xhat), mean(&roll(&x), &roll(&xhat)));
    assert!(m0 > 1e-4 && (m0 - m1).abs() < 1e-9, "{m0} vs {m1}");
}

#[test]
fn errors_and_log() {
    let net = tiny(1);
    let small = Array2::<Complex64>::zeros((12, 12));
    assert!(ufloss(&small, &small, &net, &cfg(5), (0, 0)).is_err());
    let (x, _) = smooth_pair(1);
    assert!(ufloss(&x, &x, &net, &cfg(5), (5, 0)).is_err());
    assert!(ufloss(&x, &x, &net, &UflossConfig { stride: 0, ..cfg(5) }, (0, 0)).is_err());
    let mut log = LossLog::new(Vec::new(), "seed=1").unwrap();
    log.record(3, &recon_loss(&x, &x, Some(&net), &cfg(5), 0).unwrap()).unwrap();
    let text = String::from_utf8(log.into_inner()).unwrap();
    assert_eq!(text.lines().collect::<Vec<_>>(), ["# seed=1", "step,mse_part,ufloss_part", "3,0.000000000e0,0.000000000e0"]);
}
