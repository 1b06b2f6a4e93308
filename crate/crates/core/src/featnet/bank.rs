//! Memory bank of per-instance features and the instance-discrimination
//! objective.

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::network::FeatNet;
use crate::autodiff::{BatchStats, Tape, Tensor};
use crate::error::{ensure, Error, Result};
use crate::scalar::{gemm, Real};
use crate::CImage;

/// One stored unit feature per training instance, row `i` for instance `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T: Real> {
    rows: Array2<T>,
}

impl<T: Real> MemoryBank<T> {
    /// Rows drawn from an isotropic Gaussian and normalised.
    pub fn random(n: usize, dim: usize, seed: u64) -> Result<Self> {
        ensure!(n >= 1 && dim >= 1, InvalidParam, "memory bank needs at least one {dim}-dim row");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Array2::from_shape_simple_fn((n, dim), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::lit(v)
        });
        for mut r in rows.rows_mut() {
            let nrm = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / nrm);
        }
        Ok(MemoryBank { rows })
    }

    /// Wraps existing rows; each must be unit-norm within `1e-4`.
    pub fn from_rows(rows: Array2<T>) -> Result<Self> {
        ensure!(rows.nrows() >= 1, InvalidParam, "memory bank is empty");
        let bank = MemoryBank { rows };
        ensure!(bank.max_norm_error() < 1e-4, InvalidParam, "memory bank rows are not unit-norm");
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<T> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.rows.row(i)
    }

    /// Largest `| ||v_i|| - 1 |` over rows.
    pub fn max_norm_error(&self) -> f64 {
        self.rows
            .rows()
            .into_iter()
            .map(|r| (r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Writes fresh features into the given rows. With `momentum = 0` rows are
    /// replaced; otherwise `m v_old + (1 - m) v_new` is renormalised.
    pub fn update(&mut self, indices: &[usize], features: &Array2<T>, momentum: f64) -> Result<()> {
        ensure!(features.nrows() == indices.len(), Shape, "{} features for {} indices", features.nrows(), indices.len());
        ensure!(features.ncols() == self.dim(), Shape, "feature dim {} vs bank {}", features.ncols(), self.dim());
        ensure!((0.0..1.0).contains(&momentum), InvalidParam, "bank momentum {momentum} outside [0, 1)");
        let m = T::lit(momentum);
        for (&i, f) in indices.iter().zip(features.rows()) {
            ensure!(i < self.len(), InvalidParam, "bank index {i} out of range {}", self.len());
            let mut row = self.rows.row_mut(i);
            if momentum == 0.0 {
                row.assign(&f);
            } else {
                row.zip_mut_with(&f, |o, &n| *o = m * *o + (T::one() - m) * n);
                let nrm = row.dot(&row).sqrt();
                row.mapv_inplace(|v| v / nrm);
            }
        }
        Ok(())
    }
}

/// `P(i | v) = exp(v_i . v / tau) / sum_j exp(v_j . v / tau)`.
pub fn instance_probability<T: Real>(v: &[T], bank: &MemoryBank<T>, tau: f64) -> Result<Vec<f64>> {
    ensure!(tau > 0.0, InvalidParam, "temperature must be positive, got {tau}");
    ensure!(v.len() == bank.dim(), Shape, "feature dim {} vs bank {}", v.len(), bank.dim());
    let logits: Vec<f64> = bank
        .rows
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(v).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / tau)
        .collect();
    Ok(softmax(&logits))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Result of one forward/backward pass of the contrastive objective.
#[derive(Clone, Debug)]
pub struct ContrastiveStep<T: Real> {
    /// Mean negative log-likelihood over the batch.
    pub loss: f64,
    /// Gradient for every network parameter.
    pub grads: Vec<Tensor<T>>,
    /// Fresh features of the batch, `[B, d]`.
    pub features: Array2<T>,
    /// Largest `|sum_j P(j | v) - 1|` seen in the batch.
    pub max_prob_sum_error: f64,
    /// Batch-norm statistics of the batch, for [`FeatNet::update_running`].
    pub bn_stats: Vec<BatchStats<T>>,
}

/// Mean NLL of the batch, the feature gradient `dL/dv_b`, and the
/// probability-sum check, all from the full-bank softmax.
fn bank_objective<T: Real>(
    feats: &[T],
    indices: &[usize],
    bank: &MemoryBank<T>,
    tau: f64,
) -> Result<(f64, Vec<T>, f64)> {
    ensure!(tau > 0.0, InvalidParam, "temperature must be positive, got {tau}");
    let (b, d, n) = (indices.len(), bank.dim(), bank.len());
    ensure!(feats.len() == b * d, Shape, "feature batch size mismatch");
    for &i in indices {
        ensure!(i < n, InvalidParam, "instance index {i} outside bank of {n}");
    }
    let v = bank.rows.as_slice().expect("standard layout");
    let mut logits = vec![T::zero(); b * n];
    gemm(false, true, b, n, d, T::lit(1.0 / tau), feats, v, T::zero(), &mut logits);
    let mut probs = vec![T::zero(); b * n];
    let mut loss = 0.0;
    let mut max_err = 0.0f64;
    for (r, &idx) in indices.iter().enumerate() {
        let row: Vec<f64> = logits[r * n..(r + 1) * n].iter().map(|l| l.as_f64()).collect();
        let p = softmax(&row);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        loss += lse - row[idx];
        max_err = max_err.max((p.iter().sum::<f64>() - 1.0).abs());
        probs[r * n..(r + 1) * n].iter_mut().zip(&p).for_each(|(o, &x)| *o = T::lit(x));
    }
    // dL/dv_b = (sum_j P_j v_j - v_idx) / (tau B)
    let mut grad = vec![T::zero(); b * d];
    gemm(false, false, b, d, n, T::one(), &probs, v, T::zero(), &mut grad);
    let scale = T::lit(1.0 / (tau * b as f64));
    for (r, &idx) in indices.iter().enumerate() {
        for k in 0..d {
            grad[r * d + k] = (grad[r * d + k] - v[idx * d + k]) * scale;
        }
    }
    Ok((loss / b as f64, grad, max_err))
}

/// Forward and backward pass of the instance-discrimination loss for a
/// batch of patches with their instance indices.
pub fn contrastive_step<T: Real>(
    net: &FeatNet<T>,
    bank: &MemoryBank<T>,
    indices: &[usize],
    patches: &[&CImage<T>],
    tau: f64,
) -> Result<ContrastiveStep<T>> {
    ensure!(indices.len() == patches.len() && !indices.is_empty(), InvalidParam, "batch indices/patches mismatch");
    ensure!(bank.dim() == net.dim(), Shape, "bank dim {} vs network dim {}", bank.dim(), net.dim());
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape, true);
    let x = tape.constant(Tensor::from_complex_batch(patches.iter().copied())?);
    let (f, bn_stats) = net.forward_train(&mut tape, &bound, x);
    let feats = tape.value(f).data().to_vec();
    let (loss, gfeat, max_prob_sum_error) = bank_objective(&feats, indices, bank, tau)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("contrastive loss is {loss}")));
    }
    let mut grads = tape.backward(vec![(f, Tensor::new(vec![indices.len(), net.dim()], gfeat)?)]);
    let grads = net.params.collect_grads(&mut grads, &bound);
    let features = Array2::from_shape_vec((indices.len(), net.dim()), feats).expect("shape");
    Ok(ContrastiveStep { loss, grads, features, max_prob_sum_error, bn_stats })
}

/// Mean of `-log P(i_b | f(p_b))` over the batch, with batch norm in
/// training mode as in [`contrastive_step`].
pub fn contrastive_loss<T: Real>(
    net: &FeatNet<T>,
    bank: &MemoryBank<T>,
    indices: &[usize],
    patches: &[&CImage<T>],
    tau: f64,
) -> Result<f64> {
    ensure!(indices.len() == patches.len() && !indices.is_empty(), InvalidParam, "batch indices/patches mismatch");
    let f = train_features(net, patches)?;
    Ok(bank_objective(f.data(), indices, bank, tau)?.0)
}

/// `[N, d]` features of a batch with batch norm using the batch's own statistics.
pub fn train_features<T: Real>(net: &FeatNet<T>, patches: &[&CImage<T>]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape, false);
    let x = tape.constant(Tensor::from_complex_batch(patches.iter().copied())?);
    let (f, _) = net.forward_train(&mut tape, &bound, x);
    Ok(tape.value(f).clone())
}
