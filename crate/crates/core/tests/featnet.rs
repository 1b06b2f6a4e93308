mod common;

use common::{fd_gradient, random_image, random_tensor, rel_err, rng};
use ndarray::Array2;
use num_complex::Complex64;
use ufloss::autodiff::{Tape, Tensor};
use ufloss::data::make_phantom_dataset;
use ufloss::featnet::{
    contrastive_loss, contrastive_step, featnet_from_container, featnet_to_container, instance_probability,
    pretrain_ufnet, pretrain_with, train_features, FeatNet, FeatNetConfig, FeatTrainConfig, MemoryBank,
};

fn tiny(p: usize, seed: u64) -> FeatNet<f64> {
    FeatNet::new(FeatNetConfig::tiny(p), seed).unwrap()
}

#[test]
fn features_are_unit_and_deterministic() {
    for cfg in [FeatNetConfig::desk(), FeatNetConfig::tiny(12)] {
        let net = FeatNet::<f32>::new(cfg.clone(), 3).unwrap();
        let mut r = rng(1);
        let patches: Vec<_> = (0..70).map(|_| random_image(&mut r, (cfg.patch_size, cfg.patch_size)).mapv(|z| {
            num_complex::Complex32::new(z.re as f32, z.im as f32)
        })).collect();
        let f = net.features(&patches).unwrap();
        assert_eq!(f.dim(), (70, cfg.dim));
        for row in f.rows() {
            let n: f32 = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() < 1e-6, "norm {n}");
        }
        assert_eq!(f, net.features(&patches).unwrap());
        assert_eq!(f.row(69).to_vec(), net.feature_map(&patches[69]).unwrap());
    }
}

#[test]
fn paper_profile_builds_and_maps_patches() {
    let net = FeatNet::<f32>::new(FeatNetConfig::paper(), 0).unwrap();
    let p = Array2::from_elem((60, 60), num_complex::Complex32::new(0.3, -0.1));
    let v = net.feature_map(&p).unwrap();
    assert_eq!(v.len(), 128);
    assert!(net.feature_map(&Array2::zeros((40, 40))).is_err());
}

#[test]
fn jacobian_wrt_patch_matches_finite_differences() {
    let net = tiny(12, 5);
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[1, 2, 12, 12]);
    let probe = random_tensor(&mut r, &[1, 8]);
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), true);
    let f = net.forward(&mut tape, &bound, xv);
    let g = tape.backward(vec![(f, probe.clone())]);
    let analytic = g.get(xv).unwrap().data().to_vec();
    let numeric = fd_gradient(x.data(), 1e-3, |p| {
        let mut t = Tape::new();
        let b = net.params.bind(&mut t, false);
        let xv = t.constant(Tensor::new(vec![1, 2, 12, 12], p.to_vec()).unwrap());
        let f = net.forward(&mut t, &b, xv);
        t.value(f).dot(&probe)
    });
    let e = rel_err(&analytic, &numeric);
    assert!(e < 1e-3, "relative error {e}");
}

fn batch(seed: u64, n: usize, p: usize) -> Vec<Array2<Complex64>> {
    let mut r = rng(seed);
    (0..n).map(|_| random_image(&mut r, (p, p))).collect()
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let net = tiny(12, 8);
    let bank = MemoryBank::<f64>::random(30, 8, 1).unwrap();
    let patches = batch(4, 3, 12);
    let refs: Vec<_> = patches.iter().collect();
    let idx = [4, 17, 29];
    let step = contrastive_step(&net, &bank, &idx, &refs, 1.0).unwrap();
    assert!((step.loss - contrastive_loss(&net, &bank, &idx, &refs, 1.0).unwrap()).abs() < 1e-12);
    let analytic: Vec<f64> = step.grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let flat: Vec<f64> = net.params.values().iter().flat_map(|v| v.data().to_vec()).collect();
    let numeric = fd_gradient(&flat, 1e-5, |p| {
        let mut n2 = net.clone();
        let mut off = 0;
        for v in n2.params.values_mut() {
            let len = v.len();
            v.data_mut().copy_from_slice(&p[off..off + len]);
            off += len;
        }
        contrastive_loss(&n2, &bank, &idx, &refs, 1.0).unwrap()
    });
    let e = rel_err(&analytic, &numeric);
    assert!(e < 1e-3, "relative error {e}");
}

#[test]
fn single_instance_and_orthogonal_bank_losses() {
    let net = tiny(12, 2);
    let patches = batch(9, 1, 12);
    // Batch-of-one features, as seen by the loss.
    let v = train_features(&net, &[&patches[0]]).unwrap().into_data();
    let one = MemoryBank::from_rows(Array2::from_shape_vec((1, 8), v.clone()).unwrap()).unwrap();
    assert!(contrastive_loss(&net, &one, &[0], &[&patches[0]], 1.0).unwrap().abs() < 1e-12);

    // Row 0 is the patch's own feature, the rest span its orthogonal complement.
    let n = 8;
    let mut rows = Array2::<f64>::zeros((n, 8));
    let mut basis: Vec<Vec<f64>> = vec![v.clone()];
    for k in 0..8 {
        let mut e = vec![0.0; 8];
        e[k] = 1.0;
        for b in &basis {
            let d: f64 = e.iter().zip(b).map(|(x, y)| x * y).sum();
            e.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let nrm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 1e-6 && basis.len() < n {
            basis.push(e.iter().map(|x| x / nrm).collect());
        }
    }
    for (i, b) in basis.iter().enumerate() {
        rows.row_mut(i).iter_mut().zip(b).for_each(|(o, &x)| *o = x);
    }
    let bank = MemoryBank::from_rows(rows).unwrap();
    let loss = contrastive_loss(&net, &bank, &[0], &[&patches[0]], 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((loss + (e / (e + (n - 1) as f64)).ln()).abs() < 1e-9, "loss {loss}");
    let p = instance_probability(&v, &bank, 1.0).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.iter().all(|&x| x > 0.0));
}

#[test]
fn loss_is_invariant_to_batch_order() {
    let net = tiny(12, 3);
    let bank = MemoryBank::<f64>::random(10, 8, 2).unwrap();
    let patches = batch(1, 3, 12);
    let a = contrastive_loss(&net, &bank, &[1, 2, 3], &[&patches[0], &patches[1], &patches[2]], 1.0).unwrap();
    let b = contrastive_loss(&net, &bank, &[3, 1, 2], &[&patches[2], &patches[0], &patches[1]], 1.0).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn pretraining_keeps_bank_invariants_and_learns() {
    let ds = make_phantom_dataset::<f32>(6, (64, 64), 11).unwrap();
    let cfg = FeatTrainConfig {
        tau: 0.1,
        batch: 8,
        epochs: 12,
        lr: 3e-3,
        patches_per_slice: 8,
        patch_size: 16,
        ..FeatTrainConfig::default()
    };
    let mut seen = 0;
    let out = pretrain_with(&ds, FeatNet::new(FeatNetConfig::tiny(16), 4).unwrap(), &cfg, 4, |s| {
        assert!(s.bank_norm_error < 1e-6, "epoch {}: bank norm error {}", s.epoch, s.bank_norm_error);
        assert!(s.prob_sum_error < 1e-9);
        seen += 1;
    })
    .unwrap();
    assert_eq!(seen, 12);
    assert_eq!(out.bank.len(), 48);
    let (first, last) = (out.history[0].mean_loss, out.history.last().unwrap().mean_loss);
    assert!(last < 0.8 * first, "loss {first} -> {last}");
    let again = pretrain_ufnet(&ds, &FeatNetConfig::tiny(16), &cfg, 4).unwrap();
    assert_eq!(again.bank, out.bank);
}

#[test]
fn checkpoint_round_trip() {
    let ds = make_phantom_dataset::<f32>(1, (64, 64), 1).unwrap();
    let cfg = FeatTrainConfig { epochs: 1, patches_per_slice: 4, patch_size: 16, ..FeatTrainConfig::default() };
    let out = pretrain_ufnet(&ds, &FeatNetConfig::tiny(16), &cfg, 0).unwrap();
    let c = featnet_to_container(&out.net, Some(&out.bank), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feat.npz");
    c.save(&path).unwrap();
    let back = featnet_from_container::<f32>(&ufloss::container::Container::load(&path).unwrap()).unwrap();
    assert_eq!(back.net.params, out.net.params);
    assert_eq!(back.bank.unwrap(), out.bank);
    assert_eq!(back.training, cfg);
}

#[test]
fn mismatched_patch_size_is_rejected() {
    let ds = make_phantom_dataset::<f32>(1, (64, 64), 1).unwrap();
    let cfg = FeatTrainConfig { epochs: 1, patch_size: 20, ..FeatTrainConfig::default() };
    assert!(pretrain_ufnet(&ds, &FeatNetConfig::tiny(16), &cfg, 0).is_err());
}

// At tau = 1 the mean instance loss cannot fall below ln(e + (N-1) e^(-1/(N-1))) - 1,
// about ln N - 1, since the mean pairwise cosine of N unit vectors is at least -1/(N-1).
#[test]
fn unit_temperature_loss_is_bounded_below() {
    let mut r = rng(5);
    for (n, dim, spread) in [(50, 8, 1.0), (200, 4, 1.0), (64, 64, 0.05)] {
        let mut rows = random_tensor(&mut r, &[n, dim]).into_data();
        // Small spread packs the rows around one direction.
        for (i, x) in rows.iter_mut().enumerate() {
            *x = if i % dim == 0 { 1.0 } else { 0.0 } + spread * *x;
        }
        let mut rows = Array2::from_shape_vec((n, dim), rows).unwrap();
        for mut row in rows.rows_mut() {
            let nrm = row.dot(&row).sqrt();
            row /= nrm;
        }
        let bank = MemoryBank::from_rows(rows.clone()).unwrap();
        let mean: f64 = (0..n)
            .map(|i| -instance_probability(&rows.row(i).to_vec(), &bank, 1.0).unwrap()[i].ln())
            .sum::<f64>()
            / n as f64;
        let m = (n - 1) as f64;
        let bound = (std::f64::consts::E + m * (-1.0 / m).exp()).ln() - 1.0;
        assert!(mean >= bound - 1e-12, "n {n}: mean loss {mean} below {bound}");
    }
}

// Slow, and it cannot pass at tau = 1: with 40,000 instances the loss starts
// near ln N = 10.6 and is bounded below by about 9.6 (see above).
#[test]
#[ignore]
fn desk_pretraining_loss_drops_a_fifth() {
    let ds = make_phantom_dataset::<f32>(500, (64, 64), 1).unwrap();
    let out = pretrain_ufnet(&ds, &FeatNetConfig::desk(), &FeatTrainConfig::default(), 5).unwrap();
    let (first, last) = (out.history[0].mean_loss, out.history.last().unwrap().mean_loss);
    assert!(last <= 0.8 * first, "loss {first} -> {last}");
}
