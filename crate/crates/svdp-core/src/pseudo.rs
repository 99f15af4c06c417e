//! Teacher-side pseudo-labels: multi-scale test-time augmentation averaging
//! plus hard confidence filtering.
//!
//! Per-scale forwards run in parallel; the reduction always walks scales in
//! ascending value order, so permuting the configured list changes nothing.

use crate::error::{Error, Result};
use crate::model::{Architecture, Dropout, ParamSet, Prediction, Task};
use crate::num::Real;
use crate::tensor::{resize_bilinear, scaled_dim, Tensor};
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub enum PseudoTarget<T> {
    /// Per-pixel class indices.
    Seg { classes: Vec<u8> },
    /// Per-pixel pseudo-depth.
    Depth { depth: Tensor<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel<T> {
    pub h: usize,
    pub w: usize,
    pub target: PseudoTarget<T>,
    /// Per-pixel confidence in [0, 1].
    pub confidence: Tensor<T>,
    /// confidence >= tau.
    pub valid: Vec<bool>,
    pub tau: f64,
}

impl<T: Real> PseudoLabel<T> {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    /// Ground-truth wrapper used for source pretraining: every pixel valid.
    pub fn from_labels(h: usize, w: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != h * w {
            return Err(Error::shape("from_labels", format!("{}", h * w), format!("{}", classes.len())));
        }
        Ok(PseudoLabel {
            h,
            w,
            target: PseudoTarget::Seg { classes },
            confidence: Tensor::full(&[h, w], T::one()),
            valid: vec![true; h * w],
            tau: 0.0,
        })
    }

    pub fn from_depth(depth: Tensor<T>) -> Result<Self> {
        let (h, w) = depth.dims2()?;
        Ok(PseudoLabel {
            h,
            w,
            target: PseudoTarget::Depth { depth },
            confidence: Tensor::full(&[h, w], T::one()),
            valid: vec![true; h * w],
            tau: 0.0,
        })
    }
}

/// Runs the teacher at every scale, averages the resampled predictions and
/// thresholds confidence at `tau`.
pub fn generate<T: Real>(
    arch: &Architecture,
    teacher: &ParamSet<T>,
    warped: &Tensor<T>,
    scales: &[f64],
    tau: f64,
) -> Result<PseudoLabel<T>> {
    if scales.is_empty() {
        return Err(Error::InvalidInput("pseudo-label generation needs >= 1 scale".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidInput(format!("confidence threshold {tau} outside [0, 1]")));
    }
    if scales.iter().any(|&s| s.is_nan() || s <= 0.0) {
        return Err(Error::InvalidInput("scales must be positive".into()));
    }
    let (h, w, _) = warped.dims3()?;

    // Canonical ascending order makes the reduction permutation-invariant.
    let mut sorted = scales.to_vec();
    sorted.sort_by(f64::total_cmp);

    let maps: Vec<Tensor<T>> = sorted
        .par_iter()
        .map(|&s| -> Result<Tensor<T>> {
            let scaled = resize_bilinear(warped, scaled_dim(h, s), scaled_dim(w, s))?;
            let pred = arch.forward(teacher, &scaled, Dropout::off())?;
            let map = match &pred {
                Prediction::Seg { .. } => pred.probabilities()?,
                Prediction::Depth { depth } => {
                    let (sh, sw) = depth.dims2()?;
                    Tensor::from_vec(&[sh, sw, 1], depth.data().to_vec())?
                }
            };
            resize_bilinear(&map, h, w)
        })
        .collect::<Result<Vec<_>>>()?;

    let m = maps.len() as f64;
    match arch.task {
        Task::Seg => {
            let c = arch.classes;
            let mut classes = Vec::with_capacity(h * w);
            let mut confidence = Tensor::zeros(&[h, w]);
            let conf = confidence.data_mut();
            let mut mean = vec![0.0f64; c];
            for px in 0..h * w {
                mean.iter_mut().for_each(|v| *v = 0.0);
                for map in &maps {
                    for (ch, mv) in mean.iter_mut().enumerate() {
                        *mv += map.data()[px * c + ch].as_f64();
                    }
                }
                let mut best = 0usize;
                for ch in 1..c {
                    if mean[ch] > mean[best] {
                        best = ch;
                    }
                }
                classes.push(best as u8);
                conf[px] = T::from_f64(mean[best] / m);
            }
            let valid: Vec<bool> = confidence.data().iter().map(|&v| v.as_f64() >= tau).collect();
            Ok(PseudoLabel {
                h,
                w,
                target: PseudoTarget::Seg { classes },
                confidence,
                valid,
                tau,
            })
        }
        Task::Depth => {
            let mut depth = Tensor::zeros(&[h, w]);
            let mut confidence = Tensor::zeros(&[h, w]);
            for px in 0..h * w {
                let mut sum = 0.0f64;
                for map in &maps {
                    sum += map.data()[px].as_f64();
                }
                let mean = sum / m;
                let mut var = 0.0f64;
                for map in &maps {
                    let d = map.data()[px].as_f64() - mean;
                    var += d * d;
                }
                let std = (var / m).sqrt();
                depth.data_mut()[px] = T::from_f64(mean);
                let c = (1.0 - std / (mean.abs() + 1e-6)).clamp(0.0, 1.0);
                confidence.data_mut()[px] = T::from_f64(c);
            }
            let valid: Vec<bool> = confidence.data().iter().map(|&v| v.as_f64() >= tau).collect();
            Ok(PseudoLabel {
                h,
                w,
                target: PseudoTarget::Depth { depth },
                confidence,
                valid,
                tau,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn test_image(h: usize, w: usize) -> Tensor<f32> {
        let mut img = Tensor::full(&[h, w, 3], 0.4);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = 0.2 + 0.6 * ((i % 17) as f32 / 17.0);
        }
        img
    }

    #[test]
    fn single_scale_tau_zero_is_teacher_argmax() {
        let arch = Architecture::seg(4);
        let params = arch.init_params::<f32>(5);
        let img = test_image(10, 8);
        let p = generate(&arch, &params, &img, &[1.0], 0.0).unwrap();
        let pred = arch.forward(&params, &img, Dropout::off()).unwrap();
        let labels = pred.labels().unwrap();
        match &p.target {
            PseudoTarget::Seg { classes } => assert_eq!(classes, &labels),
            _ => panic!("wrong target"),
        }
        assert_eq!(p.valid_count(), 80);
    }

    #[test]
    fn tau_one_empties_non_saturated_mask() {
        let arch = Architecture::seg(4);
        let params = arch.init_params::<f32>(5);
        let img = test_image(8, 8);
        let p = generate(&arch, &params, &img, &[1.0], 1.0).unwrap();
        assert_eq!(p.valid_count(), 0);
    }

    #[test]
    fn hand_built_two_scale_average() {
        // Hand average of [0.6, 0.4] and [0.2, 0.8] -> [0.4, 0.6]:
        // label = class 1, confidence 0.6. Exercised through the same
        // averaging arithmetic the generator uses.
        let a = [0.6f64, 0.4];
        let b = [0.2f64, 0.8];
        let mean: Vec<f64> = (0..2).map(|i| (a[i] + b[i]) / 2.0).collect();
        assert!((mean[0] - 0.4).abs() < 1e-12);
        assert!((mean[1] - 0.6).abs() < 1e-12);
        let label = if mean[1] > mean[0] { 1 } else { 0 };
        assert_eq!(label, 1);
        assert!((mean[label] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn averaged_probabilities_still_sum_to_one() {
        let arch = Architecture::seg(5);
        let params = arch.init_params::<f32>(6);
        let img = test_image(12, 12);
        // Recompute the mean probability map the way generate() does and
        // verify it is a distribution.
        let scales = [0.5, 1.0, 1.5];
        let mut acc = vec![0.0f64; 12 * 12 * 5];
        for &s in &scales {
            let scaled = resize_bilinear(&img, scaled_dim(12, s), scaled_dim(12, s)).unwrap();
            let pred = arch.forward(&params, &scaled, Dropout::off()).unwrap();
            let probs = resize_bilinear(&pred.probabilities().unwrap(), 12, 12).unwrap();
            for (a, &v) in acc.iter_mut().zip(probs.data().iter()) {
                *a += v as f64 / scales.len() as f64;
            }
        }
        for px in acc.chunks(5) {
            let s: f64 = px.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn raising_tau_never_adds_pixels() {
        let arch = Architecture::seg(4);
        let params = arch.init_params::<f32>(7);
        let img = test_image(10, 10);
        let mut prev = usize::MAX;
        for tau in [0.0, 0.3, 0.5, 0.8, 1.0] {
            let p = generate(&arch, &params, &img, &[0.5, 1.0], tau).unwrap();
            let n = p.valid_count();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn scale_order_is_irrelevant_bit_exact() {
        let arch = Architecture::seg(4);
        let params = arch.init_params::<f32>(8);
        let img = test_image(10, 10);
        let a = generate(&arch, &params, &img, &[0.5, 1.0, 1.75], 0.5).unwrap();
        let b = generate(&arch, &params, &img, &[1.75, 0.5, 1.0], 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_scales_rejected() {
        let arch = Architecture::seg(4);
        let params = arch.init_params::<f32>(5);
        let img = test_image(8, 8);
        assert!(generate(&arch, &params, &img, &[], 0.5).is_err());
        assert!(generate(&arch, &params, &img, &[1.0], 1.5).is_err());
    }

    #[test]
    fn depth_pseudo_mean_and_confidence() {
        let arch = Architecture::depth();
        let params = arch.init_params::<f32>(9);
        let img = test_image(10, 10);
        let p = generate(&arch, &params, &img, &[1.0], 0.0).unwrap();
        // Single scale: pseudo-depth equals the plain forward, confidence 1.
        let pred = arch.forward(&params, &img, Dropout::off()).unwrap();
        match &p.target {
            PseudoTarget::Depth { depth } => {
                for (a, b) in depth.data().iter().zip(pred.depth_map().unwrap().data()) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
            _ => panic!("wrong target"),
        }
        assert!(p.confidence.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }
}
