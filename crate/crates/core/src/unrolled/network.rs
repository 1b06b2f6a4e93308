//! U-Net denoiser, trainable regularisation weight and the unrolled
//! alternation between denoising and CG data consistency.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_inverse, Bound, Conv, Init, ParamId, ParamSet, Tape, Tensor, Var};
use crate::encode::Encoding;
use crate::error::{ensure, Error, Result};
use crate::scalar::Real;
use crate::{CImage, CStack};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of resolutions (1 means no downsampling).
    pub levels: usize,
    /// Channels at full resolution; doubled at every coarser level.
    pub base: usize,
}

impl UNetConfig {
    pub fn desk() -> Self {
        UNetConfig { levels: 2, base: 16 }
    }

    pub fn paper() -> Self {
        UNetConfig { levels: 4, base: 64 }
    }

    pub fn tiny() -> Self {
        UNetConfig { levels: 2, base: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnrollConfig {
    pub unrolls: usize,
    pub cg_steps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Initial value of the regularisation weight.
    pub lam_init: f64,
    /// Where to write the last good weights if training hits a non-finite loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_checkpoint: Option<PathBuf>,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        UnrollConfig { unrolls: 5, cg_steps: 6, epochs: 50, lr: 1e-4, batch: 4, lam_init: 0.05, abort_checkpoint: None }
    }
}

impl UnrollConfig {
    /// Ten epochs at a larger step size: the 64x64 desk set is too small for
    /// the default step to converge in that budget.
    pub fn desk() -> Self {
        UnrollConfig { epochs: 10, lr: 1e-3, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.cg_steps >= 1 && self.epochs >= 1 && self.batch >= 1,
            InvalidParam,
            "cg_steps, epochs and batch must be at least 1"
        );
        ensure!(self.lr > 0.0, InvalidParam, "learning rate must be positive");
        ensure!(self.lam_init > 0.0, InvalidParam, "initial lambda must be positive");
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: Conv,
    b: Conv,
}

impl DoubleConv {
    fn new<T: Real>(ps: &mut ParamSet<T>, init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        DoubleConv {
            a: Conv::new(ps, init, &format!("{name}.a"), (cin, cout, 3), 1),
            b: Conv::new(ps, init, &format!("{name}.b"), (cout, cout, 3), 1),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let h = self.a.apply(tape, p, x);
        let h = tape.relu(h);
        let h = self.b.apply(tape, p, h);
        tape.relu(h)
    }
}

/// Denoiser `D(x) = x + U(x)` plus the weight `lambda = softplus(rho)`.
#[derive(Clone, Debug)]
pub struct ReconNet<T: Real> {
    pub unet: UNetConfig,
    pub params: ParamSet<T>,
    down: Vec<DoubleConv>,
    up: Vec<DoubleConv>,
    head: Conv,
    rho: ParamId,
}

impl<T: Real> ReconNet<T> {
    /// The output convolution starts at zero, so the initial denoiser is the
    /// identity.
    pub fn new(unet: UNetConfig, lam_init: f64, seed: u64) -> Result<Self> {
        ensure!(unet.levels >= 1 && unet.base >= 1, InvalidParam, "U-Net needs at least one level and channel");
        ensure!(lam_init > 0.0, InvalidParam, "initial lambda must be positive");
        let mut ps = ParamSet::new();
        let mut init = Init::new(seed);
        let width = |l: usize| unet.base << l;
        let mut down = Vec::new();
        for l in 0..unet.levels {
            let cin = if l == 0 { 2 } else { width(l - 1) };
            down.push(DoubleConv::new(&mut ps, &mut init, &format!("down{l}"), cin, width(l)));
        }
        let mut up = Vec::new();
        for l in (0..unet.levels - 1).rev() {
            up.push(DoubleConv::new(&mut ps, &mut init, &format!("up{l}"), width(l) + width(l + 1), width(l)));
        }
        let head = Conv::with_gain(&mut ps, &mut init, "head", (unet.base, 2, 1), 1, 0.0);
        let rho = ps.add("rho", Tensor::new(vec![1], vec![T::lit(softplus_inverse(lam_init))])?);
        Ok(ReconNet { unet, params: ps, down, up, head, rho })
    }

    pub fn cast<U: Real>(&self) -> ReconNet<U> {
        ReconNet {
            unet: self.unet.clone(),
            params: self.params.cast(),
            down: self.down.clone(),
            up: self.up.clone(),
            head: self.head,
            rho: self.rho,
        }
    }

    /// Current `lambda`.
    pub fn lam(&self) -> f64 {
        crate::autodiff::tape::softplus(self.params.get(self.rho).item()).as_f64()
    }

    pub fn rho_id(&self) -> ParamId {
        self.rho
    }

    /// Image side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.unet.levels - 1)
    }

    /// `D(x)` for `x: [1, 2, H, W]`.
    pub fn denoise_on_tape(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let mut skips = Vec::new();
        let mut h = x;
        for (l, block) in self.down.iter().enumerate() {
            if l > 0 {
                h = tape.avg_pool2(h);
            }
            h = block.apply(tape, p, h);
            skips.push(h);
        }
        skips.pop();
        for block in &self.up {
            let u = tape.upsample2(h);
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = tape.concat(skip, u);
            h = block.apply(tape, p, cat);
        }
        let r = self.head.apply(tape, p, h);
        tape.add(x, r)
    }

    pub fn lam_on_tape(&self, tape: &mut Tape<T>, p: &Bound) -> Var {
        tape.softplus(p.var(self.rho))
    }

    pub(crate) fn check_shape(&self, (h, w): (usize, usize)) -> Result<()> {
        let m = self.size_multiple();
        ensure!(h % m == 0 && w % m == 0, Shape, "image {h}x{w} must be divisible by {m} for this U-Net");
        Ok(())
    }

    /// Applies the denoiser to a complex image.
    pub fn denoise(&self, x: &CImage<T>) -> Result<CImage<T>> {
        self.check_shape(x.dim())?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let (h, w) = x.dim();
        let xv = tape.constant(Tensor::from_complex(x).reshaped(&[1, 2, h, w]));
        let z = self.denoise_on_tape(&mut tape, &p, xv);
        let out = tape.value(z);
        ensure!(out.is_finite(), NonFinite, "denoiser produced non-finite output");
        out.to_complex()
    }
}

/// CG on `(E^H E + lam I) x = rhs` recorded on the tape, starting at `x0`,
/// with the same round-off stop as [`cg_solve`](crate::encode::cg_solve).
pub fn cg_on_tape<T: Real>(
    tape: &mut Tape<T>,
    enc: &Arc<Encoding<T>>,
    rhs: Var,
    lam: Var,
    x0: Var,
    steps: usize,
) -> Var {
    let apply = |tape: &mut Tape<T>, v: Var| {
        let g = tape.gram(v, enc);
        let l = tape.scale_by(v, lam);
        tape.add(g, l)
    };
    let ax = apply(tape, x0);
    let mut r = tape.sub(rhs, ax);
    let mut p = r;
    let mut x = x0;
    let mut rs = tape.dot(r, r);
    let floor = tape.value(rs).item() * T::epsilon() * T::epsilon();
    for _ in 0..steps {
        if tape.value(rs).item() <= floor {
            break;
        }
        let ap = apply(tape, p);
        let pap = tape.dot(p, ap);
        let alpha = tape.div(rs, pap);
        let step = tape.scale_by(p, alpha);
        x = tape.add(x, step);
        let dr = tape.scale_by(ap, alpha);
        r = tape.sub(r, dr);
        let rs_new = tape.dot(r, r);
        let beta = tape.div(rs_new, rs);
        let bp = tape.scale_by(p, beta);
        p = tape.add(r, bp);
        rs = rs_new;
    }
    x
}

/// The unrolled reconstruction recorded on the tape; returns `[1, 2, H, W]`.
pub fn modl_on_tape<T: Real>(
    tape: &mut Tape<T>,
    net: &ReconNet<T>,
    p: &Bound,
    enc: &Arc<Encoding<T>>,
    aty: &CImage<T>,
    unrolls: usize,
    cg_steps: usize,
) -> Var {
    let (h, w) = aty.dim();
    let x0 = tape.constant(Tensor::from_complex(aty).reshaped(&[1, 2, h, w]));
    let lam = net.lam_on_tape(tape, p);
    let mut x = x0;
    for _ in 0..unrolls {
        let z = net.denoise_on_tape(tape, p, x);
        let lz = tape.scale_by(z, lam);
        let rhs = tape.add(x0, lz);
        x = cg_on_tape(tape, enc, rhs, lam, x, cg_steps);
    }
    x
}

/// Reconstruction `G(y, E)`: zero-filled start, then `unrolls` rounds of
/// `z = D(x)`, `x = (E^H E + lam I)^-1 (E^H y + lam z)`.
pub fn modl_forward<T: Real>(
    y: &CStack<T>,
    enc: &Arc<Encoding<T>>,
    net: &ReconNet<T>,
    unrolls: usize,
    cg_steps: usize,
) -> Result<CImage<T>> {
    let aty = enc.adjoint(y)?;
    net.check_shape(aty.dim())?;
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape, false);
    let x = modl_on_tape(&mut tape, net, &p, enc, &aty, unrolls, cg_steps);
    let out = tape.value(x);
    if !out.is_finite() {
        return Err(Error::NonFinite("unrolled reconstruction produced non-finite values".into()));
    }
    out.to_complex()
}

/// Data-consistency residual `||(E^H E + lam I) x - (E^H y + lam z)||` before
/// and after the CG solve of every unroll.
pub fn modl_residuals<T: Real>(
    y: &CStack<T>,
    enc: &Arc<Encoding<T>>,
    net: &ReconNet<T>,
    unrolls: usize,
    cg_steps: usize,
) -> Result<Vec<(f64, f64)>> {
    let aty = enc.adjoint(y)?;
    let lam = T::lit(net.lam());
    let resid = |x: &CImage<T>, rhs: &CImage<T>| -> Result<f64> {
        let ax = enc.normal(x)? + x.mapv(|v| v.scale(lam));
        Ok((ax - rhs).iter().map(|v| v.norm_sqr().as_f64()).sum::<f64>().sqrt())
    };
    let mut x = aty.clone();
    let mut out = Vec::with_capacity(unrolls);
    for _ in 0..unrolls {
        let z = net.denoise(&x)?;
        let rhs = &aty + &z.mapv(|v| v.scale(lam));
        let next = crate::encode::cg_solve(&rhs, enc, lam, cg_steps, &x)?;
        out.push((resid(&x, &rhs)?, resid(&next, &rhs)?));
        x = next;
    }
    Ok(out)
}
