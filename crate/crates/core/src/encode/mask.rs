//! k-space sampling masks.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Fully sampled calibration area of a mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CalibRegion {
    /// Contiguous block of central phase-encode columns, as a fraction of W.
    CenterFraction(f64),
    /// Central `rows x cols` block.
    Block(usize, usize),
}

/// Binary Cartesian sampling pattern (the diagonal of `U`).
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    pub mask: Array2<u8>,
    pub acceleration: f64,
    pub calib: CalibRegion,
    /// Smallest allowed distance between non-calibration samples, when the
    /// generator enforces one.
    pub min_distance: Option<f64>,
}

impl SamplingMask {
    pub fn full(shape: (usize, usize)) -> Self {
        SamplingMask {
            mask: Array2::ones(shape),
            acceleration: 1.0,
            calib: CalibRegion::Block(shape.0, shape.1),
            min_distance: None,
        }
    }

    pub fn from_array(mask: Array2<u8>) -> Result<Self> {
        ensure!(mask.iter().all(|&m| m <= 1), InvalidParam, "mask entries must be 0 or 1");
        let ones = mask.iter().filter(|&&m| m == 1).count();
        ensure!(ones > 0, Degenerate, "mask samples nothing");
        let acceleration = mask.len() as f64 / ones as f64;
        Ok(SamplingMask { mask, acceleration, calib: CalibRegion::Block(0, 0), min_distance: None })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m == 1).count() as f64 / self.mask.len() as f64
    }

    /// Column indices of a centred block of `n` entries out of `w`.
    pub(crate) fn center_range(w: usize, n: usize) -> std::ops::Range<usize> {
        let start = w / 2 - n / 2;
        start..start + n
    }
}

/// 1D variable-density Cartesian mask: whole phase-encode columns are either
/// sampled or skipped. The centre block is counted inside the column budget.
pub fn make_mask_1d_random(
    shape: (usize, usize),
    acceleration: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    let (h, w) = shape;
    ensure!(h > 0 && w > 0, InvalidParam, "empty mask shape {shape:?}");
    ensure!(acceleration >= 1.0, InvalidParam, "acceleration {acceleration} < 1");
    ensure!(
        center_fraction * w as f64 >= 1.0,
        InvalidParam,
        "center fraction {center_fraction} selects no column of {w}"
    );
    if acceleration == 1.0 {
        let mut m = SamplingMask::full(shape);
        m.calib = CalibRegion::CenterFraction(center_fraction);
        return Ok(m);
    }
    let n_center = (center_fraction * w as f64).floor() as usize;
    let budget = (w as f64 / acceleration).round() as usize;
    ensure!(
        n_center <= budget,
        InvalidParam,
        "center block of {n_center} columns exceeds the budget of {budget} at R={acceleration}"
    );
    let center = SamplingMask::center_range(w, n_center);
    let mut outer: Vec<usize> = (0..w).filter(|c| !center.contains(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    outer.shuffle(&mut rng);
    let mut cols = vec![false; w];
    center.clone().for_each(|c| cols[c] = true);
    outer.iter().take(budget - n_center).for_each(|&c| cols[c] = true);
    let mask = Array2::from_shape_fn(shape, |(_, j)| cols[j] as u8);
    Ok(SamplingMask {
        mask,
        acceleration,
        calib: CalibRegion::CenterFraction(center_fraction),
        min_distance: None,
    })
}

/// Slope of the Poisson-disk radius with normalised distance from the centre.
const POISSON_DENSITY_SLOPE: f64 = 2.0;

/// Variable-density Poisson-disk mask with a fully sampled central
/// `calib x calib` block.
///
/// Dart throwing over a seeded permutation of the grid: a candidate at
/// normalised radius `rho` is accepted when no earlier sample lies within
/// `r0 * (1 + 2 rho)`. The inner radius `r0` is bisected until the total
/// sampling fraction lands within 10% of `1 / acceleration`.
pub fn make_mask_poisson(
    shape: (usize, usize),
    acceleration: f64,
    calib: usize,
    seed: u64,
) -> Result<SamplingMask> {
    let (h, w) = shape;
    ensure!(h > 0 && w > 0, InvalidParam, "empty mask shape {shape:?}");
    ensure!(acceleration >= 1.0, InvalidParam, "acceleration {acceleration} < 1");
    ensure!(calib <= h.min(w), InvalidParam, "calibration {calib} larger than {shape:?}");
    if acceleration == 1.0 {
        let mut m = SamplingMask::full(shape);
        m.calib = CalibRegion::Block(calib, calib);
        return Ok(m);
    }
    let rows = SamplingMask::center_range(h, calib);
    let cols = SamplingMask::center_range(w, calib);
    let in_calib = |i: usize, j: usize| rows.contains(&i) && cols.contains(&j);
    let target = (h * w) as f64 / acceleration;
    let n_calib = (calib * calib) as f64;
    ensure!(
        n_calib <= target * 1.1,
        InvalidParam,
        "calibration block alone exceeds the sampling budget at R={acceleration}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<(usize, usize)> =
        (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).filter(|&(i, j)| !in_calib(i, j)).collect();
    order.shuffle(&mut rng);

    let (ch, cw) = (h as f64 / 2.0, w as f64 / 2.0);
    let rho_of = |i: usize, j: usize| {
        let (u, v) = ((i as f64 - ch) / ch, (j as f64 - cw) / cw);
        (u * u + v * v).sqrt() / std::f64::consts::SQRT_2
    };
    let throw = |r0: f64| -> Array2<u8> {
        let mut m = Array2::<u8>::zeros(shape);
        for &(i, j) in &order {
            let r = r0 * (1.0 + POISSON_DENSITY_SLOPE * rho_of(i, j));
            let reach = r.ceil() as isize;
            let mut free = true;
            'scan: for di in -reach..=reach {
                let ii = i as isize + di;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in -reach..=reach {
                    let jj = j as isize + dj;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    if m[[ii as usize, jj as usize]] == 1
                        && !in_calib(ii as usize, jj as usize)
                        && ((di * di + dj * dj) as f64) < r * r
                    {
                        free = false;
                        break 'scan;
                    }
                }
            }
            if free {
                m[[i, j]] = 1;
            }
        }
        for i in rows.clone() {
            for j in cols.clone() {
                m[[i, j]] = 1;
            }
        }
        m
    };
    let count = |m: &Array2<u8>| m.iter().filter(|&&v| v == 1).count() as f64;

    let (mut lo, mut hi) = (0.5f64, h.max(w) as f64);
    let mut best: Option<(f64, f64, Array2<u8>)> = None;
    for _ in 0..40 {
        let r0 = 0.5 * (lo + hi);
        let m = throw(r0);
        let n = count(&m);
        let rel = (n - target).abs() / target;
        if best.as_ref().is_none_or(|(e, _, _)| rel < *e) {
            best = Some((rel, r0, m));
        }
        if rel < 0.01 {
            break;
        }
        if n > target {
            lo = r0;
        } else {
            hi = r0;
        }
    }
    match best {
        Some((rel, r0, mask)) if rel <= 0.1 => Ok(SamplingMask {
            mask,
            acceleration,
            calib: CalibRegion::Block(calib, calib),
            min_distance: Some(r0),
        }),
        Some((rel, _, _)) => Err(Error::Degenerate(format!(
            "poisson-disk sampling missed the target rate 1/{acceleration} by {:.1}%",
            100.0 * rel
        ))),
        None => unreachable!("bisection runs at least once"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sampled_columns(m: &SamplingMask) -> Vec<usize> {
        (0..m.shape().1).filter(|&j| m.mask[[0, j]] == 1).collect()
    }

    #[test]
    fn one_d_mask_budget_and_center() {
        let m = make_mask_1d_random((320, 320), 5.0, 0.08, 11).unwrap();
        let cols = sampled_columns(&m);
        assert_eq!(cols.len(), 64);
        let center = SamplingMask::center_range(320, 25);
        assert!(center.contains(&160));
        assert!(center.clone().all(|c| cols.contains(&c)));
        // Columns are constant along rows.
        for j in 0..320 {
            assert!(m.mask.column(j).iter().all(|&v| v == m.mask[[0, j]]));
        }
    }

    #[test]
    fn one_d_mask_identity_and_seeds() {
        let full = make_mask_1d_random((16, 32), 1.0, 0.08, 0).unwrap();
        assert!(full.mask.iter().all(|&v| v == 1));

        let a = make_mask_1d_random((64, 64), 4.0, 0.08, 1).unwrap();
        let b = make_mask_1d_random((64, 64), 4.0, 0.08, 2).unwrap();
        let center = SamplingMask::center_range(64, 5);
        for c in center {
            assert_eq!(a.mask[[0, c]], 1);
            assert_eq!(b.mask[[0, c]], 1);
        }
        assert_ne!(sampled_columns(&a), sampled_columns(&b));
        assert_eq!(a, make_mask_1d_random((64, 64), 4.0, 0.08, 1).unwrap());
    }

    #[test]
    fn one_d_mask_errors() {
        assert!(make_mask_1d_random((64, 64), 4.0, 0.001, 0).is_err());
        // 50% centre cannot fit into a 1/8 budget.
        assert!(matches!(
            make_mask_1d_random((64, 64), 8.0, 0.5, 0),
            Err(Error::InvalidParam(_))
        ));
    }

    #[test]
    fn poisson_rate_and_calibration() {
        let m = make_mask_poisson((256, 256), 8.0, 24, 5).unwrap();
        let frac = m.sampled_fraction();
        assert!((0.1125..=0.1375).contains(&frac), "fraction {frac}");
        let rows = SamplingMask::center_range(256, 24);
        for i in rows.clone() {
            for j in rows.clone() {
                assert_eq!(m.mask[[i, j]], 1);
            }
        }
    }

    #[test]
    fn poisson_min_distance_brute_force() {
        let shape = (64, 64);
        let m = make_mask_poisson(shape, 6.0, 8, 9).unwrap();
        let r0 = m.min_distance.unwrap();
        let c = SamplingMask::center_range(64, 8);
        let pts: Vec<(f64, f64)> = m
            .mask
            .indexed_iter()
            .filter(|&((i, j), &v)| v == 1 && !(c.contains(&i) && c.contains(&j)))
            .map(|((i, j), _)| (i as f64, j as f64))
            .collect();
        let mut dmin = f64::INFINITY;
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                let d = ((pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2)).sqrt();
                dmin = dmin.min(d);
            }
        }
        assert!(dmin >= r0, "min distance {dmin} < inner radius {r0}");
    }

    #[test]
    fn poisson_identity_and_determinism() {
        assert!(make_mask_poisson((32, 32), 1.0, 8, 0).unwrap().mask.iter().all(|&v| v == 1));
        assert_eq!(make_mask_poisson((48, 48), 4.0, 8, 3).unwrap(), make_mask_poisson((48, 48), 4.0, 8, 3).unwrap());
        assert!(make_mask_poisson((32, 32), 4.0, 40, 0).is_err());
    }
}
