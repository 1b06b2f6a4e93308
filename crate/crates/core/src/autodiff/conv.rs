//! im2col lowering for convolutions expressed as matrix products.

use crate::scalar::Real;

pub(crate) fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(n + 2 * pad >= k, "kernel {k} larger than padded input {n}+2*{pad}");
    (n + 2 * pad - k) / stride + 1
}

/// Output columns `oj` whose input column `oj * stride + kj - pad` lies in
/// `[0, w)`.
fn valid_cols(w: usize, wo: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride).min(wo);
    let hi = if w + pad > kj { ((w + pad - kj - 1) / stride + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds one `[C, H, W]` image into a `[C k k, Ho Wo]` column matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[ch * h * w + ii as usize * w..ch * h * w + (ii as usize + 1) * w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let j0 = lo * stride + kj - pad;
                    if stride == 1 {
                        line[lo..hi].copy_from_slice(&src[j0..j0 + hi - lo]);
                    } else {
                        for (n, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[j0 + n * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto `[C, H, W]`, adding.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_cols(w, wo, kj, stride, pad);
                if lo == hi {
                    continue;
                }
                let j0 = lo * stride + kj - pad;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ch * h * w + ii as usize * w..ch * h * w + (ii as usize + 1) * w];
                    let line = &src[oi * wo + lo..oi * wo + hi];
                    for (n, &v) in line.iter().enumerate() {
                        dst[j0 + n * stride] += v;
                    }
                }
            }
        }
    }
}
