//! Pixel- and image-level predictive uncertainty.
//!
//! For each pixel the score is sqrt of the mean squared L2 deviation of the
//! per-pass prediction vectors from their mean:
//!
//! ```text
//! U(j) = sqrt( 1/m * sum_i || p_i(j) - mu(j) ||^2 )
//! ```
//!
//! Passes come either from MC dropout in the prediction head (trunk computed
//! once, head resampled) or from forwarding the image at several resolutions.
//! For depth the per-pass map is normalized by its spatial mean first so the
//! score stays scale-free.
//!
//! Reductions use sorted f64 summation, so reports are bit-identical under
//! any permutation of the passes.

use crate::error::{Error, Result};
use crate::model::{Architecture, Dropout, ParamSet, Prediction};
use crate::num::{mix_seed, Real};
use crate::tensor::{resize_bilinear, scaled_dim, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMethod {
    McDropout,
    ResolutionAug,
}

#[derive(Debug, Clone)]
pub struct UncertaintyReport<T> {
    /// Per-pixel uncertainty, `[H, W]`, nonnegative.
    pub pixel_map: Tensor<T>,
    /// Mean of `pixel_map`.
    pub image_value: T,
    /// Number of forward passes that produced the report.
    pub samples: usize,
    pub method: UncertaintyMethod,
}

impl<T: Real> UncertaintyReport<T> {
    pub fn dims(&self) -> (usize, usize) {
        let s = self.pixel_map.shape();
        (s[0], s[1])
    }
}

/// Permutation-invariant sum: sorts by total order before accumulating.
fn stable_sum(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    vals.iter().sum()
}

/// Mean of a pixel map, computed independently of any cached value.
pub fn image_level<T: Real>(report: &UncertaintyReport<T>) -> f64 {
    let map = report.pixel_map.data();
    map.iter().map(|v| v.as_f64()).sum::<f64>() / map.len() as f64
}

/// Applies the uncertainty formula to `m` prediction maps of shape `[H,W,D]`.
pub fn from_samples<T: Real>(
    samples: &[Tensor<T>],
    method: UncertaintyMethod,
) -> Result<UncertaintyReport<T>> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "uncertainty needs at least 2 passes, got {}",
            samples.len()
        )));
    }
    let (h, w, d) = samples[0].dims3()?;
    for s in samples {
        if s.shape() != samples[0].shape() {
            return Err(Error::shape("uncertainty samples", format!("{:?}", samples[0].shape()), format!("{:?}", s.shape())));
        }
        if !s.all_finite() {
            return Err(Error::NonFinite("prediction sample".into()));
        }
    }
    let m = samples.len();
    let mut map = Tensor::zeros(&[h, w]);
    let out = map.data_mut();
    let mut chan = vec![0.0f64; m];
    let mut sq = vec![0.0f64; m];
    let mut mu = vec![0.0f64; d];
    for px in 0..h * w {
        for (ch, mu_ch) in mu.iter_mut().enumerate() {
            let mut all_equal = true;
            for (i, s) in samples.iter().enumerate() {
                chan[i] = s.data()[px * d + ch].as_f64();
                all_equal &= chan[i] == chan[0];
            }
            // Identical passes must yield exactly zero variance.
            *mu_ch = if all_equal { chan[0] } else { stable_sum(&mut chan) / m as f64 };
        }
        for (i, s) in samples.iter().enumerate() {
            let mut acc = 0.0f64;
            for (ch, mu_ch) in mu.iter().enumerate() {
                let diff = s.data()[px * d + ch].as_f64() - mu_ch;
                acc += diff * diff;
            }
            sq[i] = acc;
        }
        out[px] = T::from_f64((stable_sum(&mut sq) / m as f64).sqrt());
    }
    let image_value = T::from_f64(map.data().iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64);
    Ok(UncertaintyReport {
        pixel_map: map,
        image_value,
        samples: m,
        method,
    })
}

fn prediction_sample<T: Real>(pred: &Prediction<T>) -> Result<Tensor<T>> {
    match pred {
        Prediction::Seg { .. } => pred.probabilities(),
        Prediction::Depth { depth } => {
            let (h, w) = depth.dims2()?;
            let mean = depth.data().iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64;
            let inv = T::from_f64(1.0 / mean);
            Tensor::from_vec(&[h, w, 1], depth.data().iter().map(|&v| v * inv).collect())
        }
    }
}

/// MC-dropout uncertainty: `m` stochastic head passes over a shared trunk.
pub fn mc_dropout<T: Real>(
    arch: &Architecture,
    params: &ParamSet<T>,
    image: &Tensor<T>,
    m: usize,
    seed: u64,
) -> Result<UncertaintyReport<T>> {
    if m < 2 {
        return Err(Error::InvalidInput(format!("mc_dropout needs m >= 2, got {m}")));
    }
    let trunk = arch.trunk(params, image)?;
    let mut samples = Vec::with_capacity(m);
    for i in 0..m {
        let pred = arch.head_forward(params, &trunk, Dropout::on(mix_seed(seed, i as u64)))?;
        samples.push(prediction_sample(&pred)?);
    }
    from_samples(&samples, UncertaintyMethod::McDropout)
}

/// Resolution-augmentation uncertainty: one deterministic pass per scale,
/// predictions resampled back to the input resolution.
pub fn resolution_aug<T: Real>(
    arch: &Architecture,
    params: &ParamSet<T>,
    image: &Tensor<T>,
    scales: &[f64],
) -> Result<UncertaintyReport<T>> {
    if scales.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "resolution augmentation needs >= 2 scales, got {}",
            scales.len()
        )));
    }
    let (h, w, _) = image.dims3()?;
    let mut samples = Vec::with_capacity(scales.len());
    for &s in scales {
        if s <= 0.0 {
            return Err(Error::InvalidInput(format!("scale {s} must be positive")));
        }
        let scaled = resize_bilinear(image, scaled_dim(h, s), scaled_dim(w, s))?;
        let pred = arch.forward(params, &scaled, Dropout::off())?;
        let sample = prediction_sample(&pred)?;
        samples.push(resize_bilinear(&sample, h, w)?);
    }
    from_samples(&samples, UncertaintyMethod::ResolutionAug)
}
