mod common;

use std::sync::Arc;

use common::{fd_gradient, random_tensor, rel_err, rng};
use proptest::prelude::*;
use ufloss::autodiff::{Tape, Tensor, Var};
use ufloss::encode::{make_mask_1d_random, synth_coil_maps, Encoding};

/// Checks d(sum(out * probe))/d(inputs) against central differences.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var, tol: f64) {
    let mut r = rng(99);
    let out_shape = {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs);
        t.shape(o).to_vec()
    };
    let probe = random_tensor(&mut r, &out_shape);
    let eval = |xs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs);
        t.value(o).dot(&probe)
    };
    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let o = build(&mut t, &vs);
    let grads = t.backward(vec![(o, probe.clone())]);
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vs[k]).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; x.len()]);
        let numeric = fd_gradient(x.data(), 1e-6, |p| {
            let mut xs = inputs.clone();
            xs[k] = Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap();
            eval(&xs)
        });
        let e = rel_err(&analytic, &numeric);
        assert!(e < tol, "input {k}: relative error {e}");
    }
}

fn rt(seed: u64, shape: &[usize]) -> Tensor<f64> {
    random_tensor(&mut rng(seed), shape)
}

#[test]
fn elementwise_ops() {
    check(vec![rt(1, &[3, 4]), rt(2, &[3, 4])], |t, v| t.add(v[0], v[1]), 1e-7);
    check(vec![rt(1, &[3, 4]), rt(2, &[3, 4])], |t, v| t.sub(v[0], v[1]), 1e-7);
    check(vec![rt(1, &[3, 4]), rt(2, &[3, 4])], |t, v| t.mul(v[0], v[1]), 1e-7);
    check(vec![rt(1, &[5])], |t, v| t.scale(v[0], -2.5), 1e-7);
    check(vec![rt(1, &[5]), rt(3, &[1])], |t, v| t.scale_by(v[0], v[1]), 1e-7);
    check(vec![rt(4, &[6])], |t, v| t.relu(v[0]), 1e-6);
    check(vec![rt(4, &[6])], |t, v| t.softplus(v[0]), 1e-7);
    check(vec![rt(4, &[2, 3])], |t, v| t.reshape(v[0], &[3, 2]), 1e-7);
}

#[test]
fn reductions() {
    check(vec![rt(1, &[7]), rt(2, &[7])], |t, v| t.dot(v[0], v[1]), 1e-7);
    check(vec![rt(1, &[7])], |t, v| t.sum_squares(v[0]), 1e-7);
    check(vec![rt(1, &[7])], |t, v| t.sum(v[0]), 1e-7);
    check(
        vec![rt(1, &[3]), rt(2, &[3])],
        |t, v| {
            let a = t.sum_squares(v[0]);
            let b = t.sum_squares(v[1]);
            t.div(a, b)
        },
        1e-6,
    );
}

#[test]
fn convolution_variants() {
    for &(k, stride, bias) in &[(3, 1, true), (3, 2, false), (1, 1, true), (7, 2, true)] {
        let x = rt(5, &[2, 3, 9, 8]);
        let w = rt(6, &[4, 3, k, k]);
        let b = rt(7, &[4]);
        let ins = if bias { vec![x, w, b] } else { vec![x, w] };
        check(ins, move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, k / 2), 1e-6);
    }
}

#[test]
fn spatial_and_channel_ops() {
    check(vec![rt(1, &[2, 2, 4, 6])], |t, v| t.avg_pool2(v[0]), 1e-7);
    check(vec![rt(1, &[1, 2, 3, 3])], |t, v| t.upsample2(v[0]), 1e-7);
    check(vec![rt(1, &[2, 2, 3, 3]), rt(2, &[2, 1, 3, 3])], |t, v| t.concat(v[0], v[1]), 1e-7);
    check(vec![rt(1, &[2, 3, 4, 4])], |t, v| t.global_avg_pool(v[0]), 1e-7);
    check(vec![rt(1, &[3, 5]), rt(2, &[4, 5]), rt(3, &[4])], |t, v| t.linear(v[0], v[1], Some(v[2])), 1e-7);
    check(vec![rt(1, &[3, 5])], |t, v| t.l2_normalize(v[0]), 1e-6);
    let origins = vec![(0, 0), (2, 1), (1, 3), (2, 1)];
    check(vec![rt(1, &[2, 6, 7])], move |t, v| t.extract_patches(v[0], &origins, 4), 1e-7);
}

#[test]
fn batch_norm_both_modes() {
    let x = rt(20, &[3, 2, 4, 5]);
    let (gamma, beta) = (rt(21, &[2]), rt(22, &[2]));
    check(vec![x.clone(), gamma.clone(), beta.clone()], |t, v| t.batch_norm(v[0], v[1], v[2], None).0, 1e-6);
    let (mean, var) = ([0.3, -0.2], [0.5, 2.0]);
    check(vec![x.clone(), gamma, beta], |t, v| t.batch_norm(v[0], v[1], v[2], Some((&mean, &var))).0, 1e-7);

    // Batch statistics against a direct per-channel computation.
    let mut t = Tape::new();
    let (xv, g, b) = (t.constant(x.clone()), t.constant(Tensor::full(&[2], 1.0)), t.constant(Tensor::zeros(&[2])));
    let (y, stats) = t.batch_norm(xv, g, b, None);
    let stats = stats.unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|n| x.data()[(n * 2 + c) * 20..(n * 2 + c + 1) * 20].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / 60.0;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 59.0;
        assert!((stats.mean[c] - m).abs() < 1e-12 && (stats.var[c] - v).abs() < 1e-12);
        let out: Vec<f64> = (0..3).flat_map(|n| t.value(y).data()[(n * 2 + c) * 20..(n * 2 + c + 1) * 20].to_vec()).collect();
        let om = out.iter().sum::<f64>() / 60.0;
        let ov = out.iter().map(|a| (a - om).powi(2)).sum::<f64>() / 60.0;
        assert!(om.abs() < 1e-12 && (ov - 1.0).abs() < 1e-3);
    }
}

#[test]
fn gram_operator() {
    let maps = synth_coil_maps::<f64>((16, 16), 3, 4).unwrap();
    let mask = make_mask_1d_random((16, 16), 3.0, 0.125, 2).unwrap();
    let enc = Arc::new(Encoding::new(&maps, &mask).unwrap());
    check(vec![rt(1, &[2, 16, 16])], move |t, v| t.gram(v[0], &enc), 1e-6);
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(Tensor::scalar(2.0), true);
    let c = t.constant(Tensor::scalar(3.0));
    let p = t.mul(a, c);
    let loss = t.sum_squares(p);
    assert!(!t.needs_grad(c));
    let g = t.backward_scalar(loss);
    assert!(g.get(c).is_none());
    // d/da (3a)^2 = 18a
    assert!((g.get(a).unwrap().item() - 36.0).abs() < 1e-12);
}

#[test]
fn shared_input_accumulates() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true);
    let s = t.add(a, a);
    let loss = t.dot(s, a);
    let g = t.backward_scalar(loss);
    assert_eq!(g.get(a).unwrap().data(), &[4.0, -8.0]);
}

proptest! {
    #[test]
    fn l2_normalize_rows_are_unit(data in proptest::collection::vec(-10.0f64..10.0, 12)) {
        prop_assume!(data.chunks(4).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 4], data).unwrap());
        let y = t.l2_normalize(x);
        for row in t.value(y).data().chunks(4) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_rows_normalize_to_a_unit_vector() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new(vec![2, 4], vec![0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0, 0.0]).unwrap(), true);
    let y = t.l2_normalize(x);
    assert_eq!(t.value(y).data(), &[0.5, 0.5, 0.5, 0.5, 0.6, 0.0, 0.8, 0.0]);
    let g = t.backward(vec![(y, Tensor::full(&[2, 4], 1.0))]);
    assert!(g.get(x).unwrap().data()[..4].iter().all(|&v| v == 0.0));
}
