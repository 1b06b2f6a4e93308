//! Residual convolutional feature network with a unit-norm head.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Bound, Conv, Dense, Init, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::scalar::Real;
use crate::CImage;

/// Backbone layout. Stage `s` has `blocks[s]` residual blocks of width
/// `widths[s]`; every stage after the first halves the resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatNetConfig {
    pub patch_size: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// 2x2 average pooling after the stem.
    pub stem_pool: bool,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    /// Feature dimension `d`.
    pub dim: usize,
    /// Initial scale of the last normalisation in each residual branch.
    pub residual_gain: f64,
}

impl FeatNetConfig {
    /// Two-stage network for quick experiments on 40x40 patches.
    pub fn desk() -> Self {
        FeatNetConfig {
            patch_size: 40,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: false,
            widths: vec![8, 16],
            blocks: vec![1, 1],
            dim: 64,
            residual_gain: 0.5,
        }
    }

    /// ResNet-18 layout on 60x60 patches with 128-dimensional features.
    pub fn paper() -> Self {
        FeatNetConfig {
            patch_size: 60,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            widths: vec![64, 128, 256, 512],
            blocks: vec![2, 2, 2, 2],
            dim: 128,
            residual_gain: 0.5,
        }
    }

    /// Two residual blocks and 8 features, for gradient checks.
    pub fn tiny(patch_size: usize) -> Self {
        FeatNetConfig {
            patch_size,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: false,
            widths: vec![4, 4],
            blocks: vec![1, 1],
            dim: 8,
            residual_gain: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.patch_size >= 4, InvalidParam, "patch size {} too small", self.patch_size);
        ensure!(self.dim >= 1, InvalidParam, "feature dimension must be positive");
        ensure!(
            !self.widths.is_empty() && self.widths.len() == self.blocks.len(),
            InvalidParam,
            "need one block count per stage width"
        );
        ensure!(
            self.widths.iter().chain(&self.blocks).all(|&v| v >= 1),
            InvalidParam,
            "stage widths and block counts must be positive"
        );
        ensure!(self.stem_kernel % 2 == 1 && self.stem_stride >= 1, InvalidParam, "stem kernel must be odd");
        let stem = (self.patch_size - 1) / self.stem_stride + 1;
        ensure!(
            !self.stem_pool || stem % 2 == 0,
            InvalidParam,
            "stem output {stem} cannot be pooled by 2 for patch size {}",
            self.patch_size
        );
        Ok(())
    }
}

/// Batch normalisation: affine parameters in the trainable set, running
/// statistics in the buffer set.
#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl Norm {
    fn new<T: Real>(params: &mut ParamSet<T>, buffers: &mut ParamSet<T>, name: &str, c: usize, gain: f64) -> Self {
        Norm {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[c], T::lit(gain))),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            mean: buffers.add(format!("{name}.mean"), Tensor::zeros(&[c])),
            var: buffers.add(format!("{name}.var"), Tensor::full(&[c], T::one())),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    bn1: Norm,
    conv2: Conv,
    bn2: Norm,
    shortcut: Option<(Conv, Norm)>,
}

/// Feature network `f(p)`: `[B, 2, P, P] -> [B, d]` unit rows.
#[derive(Clone, Debug)]
pub struct FeatNet<T: Real> {
    pub config: FeatNetConfig,
    pub params: ParamSet<T>,
    /// Running batch-norm statistics used at inference.
    pub buffers: ParamSet<T>,
    stem: Conv,
    stem_bn: Norm,
    blocks: Vec<Block>,
    head: Dense,
}

/// Number of patches pushed through the network at once during inference.
const INFER_BATCH: usize = 64;

/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Real> FeatNet<T> {
    pub fn new(config: FeatNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let mut init = Init::new(seed);
        let stem = Conv::new(&mut params, &mut init, "stem", (2, config.widths[0], config.stem_kernel), config.stem_stride);
        let stem_bn = Norm::new(&mut params, &mut buffers, "stem.bn", config.widths[0], 1.0);
        let mut blocks = Vec::new();
        let mut cin = config.widths[0];
        for (s, (&width, &count)) in config.widths.iter().zip(&config.blocks).enumerate() {
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("stage{s}.block{b}");
                let conv1 = Conv::new(&mut params, &mut init, &format!("{name}.conv1"), (cin, width, 3), stride);
                let bn1 = Norm::new(&mut params, &mut buffers, &format!("{name}.bn1"), width, 1.0);
                let conv2 = Conv::new(&mut params, &mut init, &format!("{name}.conv2"), (width, width, 3), 1);
                let bn2 = Norm::new(&mut params, &mut buffers, &format!("{name}.bn2"), width, config.residual_gain);
                let shortcut = (stride != 1 || cin != width).then(|| {
                    let conv = Conv::new(&mut params, &mut init, &format!("{name}.shortcut"), (cin, width, 1), stride);
                    (conv, Norm::new(&mut params, &mut buffers, &format!("{name}.shortcut.bn"), width, 1.0))
                });
                blocks.push(Block { conv1, bn1, conv2, bn2, shortcut });
                cin = width;
            }
        }
        let head = Dense::new(&mut params, &mut init, "head", cin, config.dim);
        Ok(FeatNet { config, params, buffers, stem, stem_bn, blocks, head })
    }

    /// Same architecture with converted parameters.
    pub fn cast<U: Real>(&self) -> FeatNet<U> {
        FeatNet {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            stem: self.stem,
            stem_bn: self.stem_bn,
            blocks: self.blocks.clone(),
            head: self.head,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    /// Records the inference pass of `x: [B, 2, P, P]` on the tape, with
    /// batch norm using the running statistics.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        self.run(tape, p, x, None)
    }

    /// Training pass: batch norm uses the batch statistics, which are
    /// returned in the order [`FeatNet::update_running`] expects.
    pub fn forward_train(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> (Var, Vec<BatchStats<T>>) {
        let mut stats = Vec::new();
        let f = self.run(tape, p, x, Some(&mut stats));
        (f, stats)
    }

    fn norms(&self) -> Vec<Norm> {
        let mut out = vec![self.stem_bn];
        for b in &self.blocks {
            out.extend([b.bn1, b.bn2]);
            out.extend(b.shortcut.map(|(_, n)| n));
        }
        out
    }

    /// Blends batch statistics from [`FeatNet::forward_train`] into the
    /// running statistics.
    pub fn update_running(&mut self, stats: &[BatchStats<T>], momentum: f64) -> Result<()> {
        let norms = self.norms();
        ensure!(stats.len() == norms.len(), Shape, "{} batch statistics for {} norm layers", stats.len(), norms.len());
        let (keep, new) = (T::lit(1.0 - momentum), T::lit(momentum));
        for (n, st) in norms.iter().zip(stats) {
            for (id, fresh) in [(n.mean, &st.mean), (n.var, &st.var)] {
                let buf = self.buffers.get_mut(id).data_mut();
                ensure!(buf.len() == fresh.len(), Shape, "batch statistics have the wrong channel count");
                buf.iter_mut().zip(fresh).for_each(|(r, &f)| *r = keep * *r + new * f);
            }
        }
        Ok(())
    }

    fn norm(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        n: Norm,
        x: Var,
        stats: &mut Option<&mut Vec<BatchStats<T>>>,
    ) -> Var {
        let (gamma, beta) = (p.var(n.gamma), p.var(n.beta));
        match stats {
            Some(out) => {
                let (y, st) = tape.batch_norm(x, gamma, beta, None);
                out.push(st.expect("batch mode returns statistics"));
                y
            }
            None => {
                let running = (self.buffers.get(n.mean).data(), self.buffers.get(n.var).data());
                tape.batch_norm(x, gamma, beta, Some(running)).0
            }
        }
    }

    fn run(&self, tape: &mut Tape<T>, p: &Bound, x: Var, mut stats: Option<&mut Vec<BatchStats<T>>>) -> Var {
        let h = self.stem.apply(tape, p, x);
        let h = self.norm(tape, p, self.stem_bn, h, &mut stats);
        let mut h = tape.relu(h);
        if self.config.stem_pool {
            h = tape.avg_pool2(h);
        }
        for blk in &self.blocks {
            let a = blk.conv1.apply(tape, p, h);
            let a = self.norm(tape, p, blk.bn1, a, &mut stats);
            let a = tape.relu(a);
            let a = blk.conv2.apply(tape, p, a);
            let a = self.norm(tape, p, blk.bn2, a, &mut stats);
            let skip = match blk.shortcut {
                Some((sc, bn)) => {
                    let s = sc.apply(tape, p, h);
                    self.norm(tape, p, bn, s, &mut stats)
                }
                None => h,
            };
            let sum = tape.add(a, skip);
            h = tape.relu(sum);
        }
        let pooled = tape.global_avg_pool(h);
        let e = self.head.apply(tape, p, pooled);
        tape.l2_normalize(e)
    }

    fn check_patch(&self, dims: (usize, usize)) -> Result<()> {
        let p = self.patch_size();
        ensure!(dims == (p, p), Shape, "feature network expects {p}x{p} patches, got {dims:?}");
        Ok(())
    }

    /// Features of many patches, `[N, d]`, computed in batches.
    pub fn features<'a>(&self, patches: impl IntoIterator<Item = &'a CImage<T>>) -> Result<Array2<T>> {
        let patches: Vec<&CImage<T>> = patches.into_iter().collect();
        let d = self.dim();
        let mut out = Array2::zeros((patches.len(), d));
        for (c, chunk) in patches.chunks(INFER_BATCH).enumerate() {
            for p in chunk {
                self.check_patch(p.dim())?;
            }
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let x = tape.constant(Tensor::from_complex_batch(chunk.iter().copied())?);
            let f = self.forward(&mut tape, &bound, x);
            let v = tape.value(f);
            if !v.is_finite() {
                return Err(Error::NonFinite("feature network produced non-finite activations".into()));
            }
            for (r, row) in v.data().chunks(d).enumerate() {
                out.row_mut(c * INFER_BATCH + r).iter_mut().zip(row).for_each(|(o, &x)| *o = x);
            }
        }
        Ok(out)
    }

    /// Feature vector of one patch.
    pub fn feature_map(&self, patch: &CImage<T>) -> Result<Vec<T>> {
        Ok(self.features([patch])?.row(0).to_vec())
    }
}
