//! Pixel buffers for PNG output.

use ndarray::Array2;
use ufloss::CImage;

/// Grayscale magnitude scaled so that `white` maps to 255.
pub fn magnitude_gray(img: &CImage<f32>, white: f32) -> Vec<u8> {
    let s = if white > 0.0 { 255.0 / white } else { 0.0 };
    img.iter().map(|z| (z.norm() * s).round().clamp(0.0, 255.0) as u8).collect()
}

pub fn max_magnitude(img: &CImage<f32>) -> f32 {
    img.iter().map(|z| z.norm()).fold(0.0, f32::max)
}

/// Anchors of a dark-blue to yellow ramp.
const RAMP: [[f64; 3]; 5] =
    [[13.0, 8.0, 135.0], [126.0, 3.0, 168.0], [204.0, 71.0, 120.0], [248.0, 149.0, 64.0], [240.0, 249.0, 33.0]];

fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (RAMP[i][c] * (1.0 - f) + RAMP[i + 1][c] * f).round() as u8;
    }
    out
}

/// RGB heatmap of values in `[0, 1]`, each cell drawn as a `scale x scale` block.
pub fn heatmap(values: &Array2<f64>, scale: usize) -> ((usize, usize), Vec<u8>) {
    let (h, w) = values.dim();
    let (ph, pw) = (h * scale, w * scale);
    let mut px = Vec::with_capacity(ph * pw * 3);
    for r in 0..ph {
        for c in 0..pw {
            px.extend(ramp(values[[r / scale, c / scale]]));
        }
    }
    ((pw, ph), px)
}

/// Tiles equally sized grayscale patches into rows separated by `gap` black pixels.
pub fn montage(rows: &[Vec<Vec<u8>>], patch: usize, gap: usize) -> ((usize, usize), Vec<u8>) {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (w, h) = (cols * (patch + gap) + gap, rows.len() * (patch + gap) + gap);
    let mut px = vec![0u8; w * h];
    for (i, row) in rows.iter().enumerate() {
        for (j, tile) in row.iter().enumerate() {
            let (r0, c0) = (gap + i * (patch + gap), gap + j * (patch + gap));
            for r in 0..patch {
                px[(r0 + r) * w + c0..(r0 + r) * w + c0 + patch].copy_from_slice(&tile[r * patch..(r + 1) * patch]);
            }
        }
    }
    ((w, h), px)
}
