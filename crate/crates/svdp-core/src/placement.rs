//! Domain prompt placement: top-k pixel selection by uncertainty.
//!
//! Selection uses a k-th order statistic partition instead of a full sort;
//! with the row-major tie rule the selected set is identical to sorting.

use crate::error::{Error, Result};
use crate::num::Real;
use crate::uncertainty::UncertaintyReport;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementMask {
    mask: Vec<bool>,
    h: usize,
    w: usize,
    k: usize,
    /// Uncertainty of the k-th selected pixel (0 for synthetic masks).
    threshold: f64,
}

impl PlacementMask {
    /// Builds a mask directly; panics if `k` disagrees with the mask.
    pub fn from_parts(mask: Vec<bool>, h: usize, w: usize, k: usize, threshold: f64) -> Self {
        assert_eq!(mask.len(), h * w, "mask length");
        assert_eq!(mask.iter().filter(|&&b| b).count(), k, "mask cardinality");
        PlacementMask { mask, h, w, k, threshold }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn selected(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Prompt pixel budget for a density: round(rho * H * W).
pub fn budget(h: usize, w: usize, rho: f64) -> Result<usize> {
    if !(0.0 < rho && rho <= 1.0) {
        return Err(Error::InvalidInput(format!("density {rho} outside (0, 1]")));
    }
    let k = ((h * w) as f64 * rho).round() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "density {rho} selects zero pixels at {h}x{w}"
        )));
    }
    Ok(k)
}

/// Selects the top-k most uncertain pixels; ties break toward the smaller
/// row-major index.
pub fn place<T: Real>(report: &UncertaintyReport<T>, rho: f64) -> Result<PlacementMask> {
    let (h, w) = report.dims();
    let k = budget(h, w, rho)?;
    let map = report.pixel_map.data();
    let mut order: Vec<u32> = (0..map.len() as u32).collect();
    let key = |i: u32| map[i as usize].as_f64();
    let cmp = |a: &u32, b: &u32| key(*b).total_cmp(&key(*a)).then(a.cmp(b));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    // k-th largest uncertainty = smallest value among the selected pixels.
    let threshold = order[..k].iter().map(|&i| key(i)).fold(f64::INFINITY, f64::min);
    let mut mask = vec![false; map.len()];
    for &i in &order[..k] {
        mask[i as usize] = true;
    }
    Ok(PlacementMask { mask, h, w, k, threshold })
}

/// Uniform random placement with the same budget (used when DPP is ablated).
pub fn random_mask(h: usize, w: usize, rho: f64, rng: &mut impl Rng) -> Result<PlacementMask> {
    let k = budget(h, w, rho)?;
    let picks = rand::seq::index::sample(rng, h * w, k);
    let mut mask = vec![false; h * w];
    for i in picks {
        mask[i] = true;
    }
    Ok(PlacementMask { mask, h, w, k, threshold: 0.0 })
}

/// Contiguous centered patch with exactly the same parameter budget (the
/// dense-prompt baseline).
pub fn patch_mask(h: usize, w: usize, rho: f64) -> Result<PlacementMask> {
    let k = budget(h, w, rho)?;
    let side = (k as f64).sqrt().ceil() as usize;
    let cols = side.min(w);
    let rows = k.div_ceil(cols);
    if rows > h {
        return Err(Error::Config(format!("patch of {k} pixels does not fit {h}x{w}")));
    }
    let y0 = (h - rows) / 2;
    let x0 = (w - cols) / 2;
    let mut mask = vec![false; h * w];
    let mut left = k;
    'outer: for ry in 0..rows {
        for rx in 0..cols {
            if left == 0 {
                break 'outer;
            }
            mask[(y0 + ry) * w + (x0 + rx)] = true;
            left -= 1;
        }
    }
    Ok(PlacementMask { mask, h, w, k, threshold: 0.0 })
}
