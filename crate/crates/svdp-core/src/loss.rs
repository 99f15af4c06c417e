//! Consistency objectives and their gradients.
//!
//! Segmentation uses pixel-wise cross-entropy against one-hot pseudo-labels;
//! depth uses masked L1 against pseudo-depth. Invalid (low-confidence)
//! pixels contribute exactly zero loss and zero gradient.

use crate::error::{Error, Result};
use crate::model::{softmax_per_pixel, Prediction};
use crate::num::Real;
use crate::pseudo::{PseudoLabel, PseudoTarget};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

const LOG_CLAMP: f64 = 1e-12;

/// Loss normalization: `Full` divides by H*W (the literal objective),
/// `Valid` divides by the confident pixel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    #[default]
    Full,
    Valid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    pub valid_pixel_count: usize,
    /// Summed contribution per class (single bucket for depth).
    pub per_class: Vec<f64>,
}

fn norm_count(norm: LossNorm, hw: usize, valid: usize) -> usize {
    match norm {
        LossNorm::Full => hw,
        LossNorm::Valid => valid,
    }
}

/// Loss value only.
pub fn consistency_loss<T: Real>(
    pred: &Prediction<T>,
    pseudo: &PseudoLabel<T>,
    norm: LossNorm,
) -> Result<LossReport> {
    consistency_loss_grad(pred, pseudo, norm).map(|(report, _)| report)
}

/// Loss value plus dLoss/dOutput (w.r.t. logits for seg, depth for depth).
pub fn consistency_loss_grad<T: Real>(
    pred: &Prediction<T>,
    pseudo: &PseudoLabel<T>,
    norm: LossNorm,
) -> Result<(LossReport, Tensor<T>)> {
    let (h, w) = pred.spatial_dims();
    if (h, w) != (pseudo.h, pseudo.w) {
        return Err(Error::shape(
            "consistency_loss",
            format!("{}x{}", pseudo.h, pseudo.w),
            format!("{h}x{w}"),
        ));
    }
    let hw = h * w;
    let valid_count = pseudo.valid_count();
    let n = norm_count(norm, hw, valid_count);

    match (pred, &pseudo.target) {
        (Prediction::Seg { logits }, PseudoTarget::Seg { classes }) => {
            let (_, _, c) = logits.dims3()?;
            let probs = softmax_per_pixel(logits);
            let mut per_class = vec![0.0f64; c];
            let mut grad = Tensor::zeros(logits.shape());
            if valid_count > 0 {
                let inv_n = 1.0 / n as f64;
                let gd = grad.data_mut();
                let pd = probs.data();
                for px in 0..hw {
                    if !pseudo.valid[px] {
                        continue;
                    }
                    let cls = classes[px] as usize;
                    if cls >= c {
                        return Err(Error::InvalidInput(format!(
                            "pseudo class {cls} out of range for {c} classes"
                        )));
                    }
                    let p = pd[px * c + cls].as_f64().max(LOG_CLAMP);
                    per_class[cls] += -p.ln() * inv_n;
                    for ch in 0..c {
                        let soft = pd[px * c + ch].as_f64();
                        let target = if ch == cls { 1.0 } else { 0.0 };
                        gd[px * c + ch] = T::from_f64((soft - target) * inv_n);
                    }
                }
            }
            let value = per_class.iter().sum();
            Ok((
                LossReport {
                    value,
                    valid_pixel_count: valid_count,
                    per_class,
                },
                grad,
            ))
        }
        (Prediction::Depth { depth }, PseudoTarget::Depth { depth: target }) => {
            let mut grad = Tensor::zeros(depth.shape());
            let mut value = 0.0f64;
            if valid_count > 0 {
                let inv_n = 1.0 / n as f64;
                let gd = grad.data_mut();
                for px in 0..hw {
                    if !pseudo.valid[px] {
                        continue;
                    }
                    let diff = depth.data()[px].as_f64() - target.data()[px].as_f64();
                    value += diff.abs() * inv_n;
                    gd[px] = T::from_f64(diff.signum() * inv_n);
                }
            }
            if !value.is_finite() {
                return Err(Error::NonFinite("consistency loss".into()));
            }
            Ok((
                LossReport {
                    value,
                    valid_pixel_count: valid_count,
                    per_class: vec![value],
                },
                grad,
            ))
        }
        _ => Err(Error::InvalidInput(
            "prediction and pseudo-label tasks disagree".into(),
        )),
    }
}

/// Relative L1 (`|pred-gt|/gt`), used when pretraining the depth model.
pub fn relative_l1_grad<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "relative_l1",
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let gd = grad.data_mut();
    let mut value = 0.0f64;
    for px in 0..pred.len() {
        let t = target.data()[px].as_f64();
        if t <= 0.0 {
            return Err(Error::InvalidInput("relative_l1 target must be positive".into()));
        }
        let diff = pred.data()[px].as_f64() - t;
        value += diff.abs() / t / n;
        gd[px] = T::from_f64(diff.signum() / t / n);
    }
    Ok((value, grad))
}

/// Mean per-pixel prediction entropy and its logit gradient (TENT-style
/// baseline objective, segmentation only).
pub fn entropy_loss_grad<T: Real>(pred: &Prediction<T>) -> Result<(f64, Tensor<T>)> {
    match pred {
        Prediction::Seg { logits } => {
            let (h, w, c) = logits.dims3()?;
            let hw = h * w;
            let probs = softmax_per_pixel(logits);
            let mut grad = Tensor::zeros(logits.shape());
            let gd = grad.data_mut();
            let inv_n = 1.0 / hw as f64;
            let mut total = 0.0f64;
            for px in 0..hw {
                let row = &probs.data()[px * c..(px + 1) * c];
                let mut h_px = 0.0f64;
                for &p in row {
                    let p = p.as_f64();
                    if p > 0.0 {
                        h_px -= p * p.ln();
                    }
                }
                total += h_px * inv_n;
                for ch in 0..c {
                    let p = row[ch].as_f64().max(LOG_CLAMP);
                    gd[px * c + ch] = T::from_f64(-p * (p.ln() + h_px) * inv_n);
                }
            }
            Ok((total, grad))
        }
        Prediction::Depth { .. } => Err(Error::Config(
            "entropy minimization is defined for segmentation only".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Dropout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg_pred(h: usize, w: usize, c: usize, logits: Vec<f64>) -> Prediction<f64> {
        Prediction::Seg {
            logits: Tensor::from_vec(&[h, w, c], logits).unwrap(),
        }
    }

    #[test]
    fn matching_one_hot_gives_near_zero() {
        // Strongly peaked logits at the pseudo class.
        let pred = seg_pred(1, 2, 2, vec![40.0, 0.0, 0.0, 40.0]);
        let pseudo = PseudoLabel::from_labels(1, 2, vec![0, 1]).unwrap();
        let r = consistency_loss(&pred, &pseudo, LossNorm::Full).unwrap();
        assert!(r.value <= 1e-9);
    }

    #[test]
    fn single_pixel_uniform_is_ln2() {
        let pred = seg_pred(1, 1, 2, vec![0.0, 0.0]);
        let pseudo = PseudoLabel::from_labels(1, 1, vec![0]).unwrap();
        let r = consistency_loss(&pred, &pseudo, LossNorm::Full).unwrap();
        assert!((r.value - (2.0f64).ln()).abs() < 1e-9);
        assert_eq!(r.valid_pixel_count, 1);
    }

    #[test]
    fn empty_valid_mask_is_zero_loss() {
        let pred = seg_pred(1, 2, 2, vec![0.3, 0.1, 0.0, 0.2]);
        let mut pseudo = PseudoLabel::from_labels(1, 2, vec![0, 1]).unwrap();
        pseudo.valid = vec![false, false];
        let (r, g) = consistency_loss_grad(&pred, &pseudo, LossNorm::Full).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.valid_pixel_count, 0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_pixels_have_exactly_zero_gradient() {
        let pred = seg_pred(2, 2, 3, (0..12).map(|i| i as f64 * 0.1).collect());
        let mut pseudo = PseudoLabel::from_labels(2, 2, vec![0, 1, 2, 0]).unwrap();
        pseudo.valid = vec![true, false, true, false];
        let (_, g) = consistency_loss_grad(&pred, &pseudo, LossNorm::Full).unwrap();
        for ch in 0..3 {
            assert_eq!(g.data()[3 + ch], 0.0);
            assert_eq!(g.data()[9 + ch], 0.0);
        }
        assert!(g.data()[..3].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let pred = seg_pred(2, 2, 2, vec![0.0; 8]);
        let pseudo = PseudoLabel::from_labels(2, 3, vec![0; 6]).unwrap();
        assert!(consistency_loss(&pred, &pseudo, LossNorm::Full).is_err());
    }

    /// Independent scalar-loop oracle on random 8x8 instances.
    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..5 {
            let (h, w, c) = (8, 8, 4);
            let logits: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let classes: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c) as u8).collect();
            let valid: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.7)).collect();
            let pred = seg_pred(h, w, c, logits.clone());
            let mut pseudo = PseudoLabel::from_labels(h, w, classes.clone()).unwrap();
            pseudo.valid = valid.clone();

            for norm in [LossNorm::Full, LossNorm::Valid] {
                let r = consistency_loss(&pred, &pseudo, norm).unwrap();
                // Oracle: direct per-pixel softmax + log loop.
                let mut oracle = 0.0f64;
                let mut nv = 0usize;
                for px in 0..h * w {
                    if !valid[px] {
                        continue;
                    }
                    nv += 1;
                    let row = &logits[px * c..(px + 1) * c];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    let p = (row[classes[px] as usize] - mx).exp() / z;
                    oracle -= p.max(1e-12).ln();
                }
                let denom = match norm {
                    LossNorm::Full => (h * w) as f64,
                    LossNorm::Valid => nv as f64,
                };
                oracle /= denom;
                assert!((r.value - oracle).abs() < 1e-6, "norm {norm:?}");
            }
        }
    }

    #[test]
    fn seg_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w, c) = (3, 3, 3);
        let logits: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let classes: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..c) as u8).collect();
        let pred = seg_pred(h, w, c, logits.clone());
        let mut pseudo = PseudoLabel::from_labels(h, w, classes).unwrap();
        pseudo.valid[4] = false;
        let (_, g) = consistency_loss_grad(&pred, &pseudo, LossNorm::Full).unwrap();
        let hstep = 1e-6;
        for idx in 0..h * w * c {
            let mut lp = logits.clone();
            lp[idx] += hstep;
            let mut lm = logits.clone();
            lm[idx] -= hstep;
            let fp = consistency_loss(&seg_pred(h, w, c, lp), &pseudo, LossNorm::Full)
                .unwrap()
                .value;
            let fm = consistency_loss(&seg_pred(h, w, c, lm), &pseudo, LossNorm::Full)
                .unwrap()
                .value;
            let fd = (fp - fm) / (2.0 * hstep);
            assert!((fd - g.data()[idx]).abs() < 1e-6, "idx {idx}: {fd} vs {}", g.data()[idx]);
        }
    }

    #[test]
    fn depth_l1_and_gradient() {
        let pred = Prediction::Depth {
            depth: Tensor::from_vec(&[1, 2], vec![2.0f64, 5.0]).unwrap(),
        };
        let pseudo = PseudoLabel::from_depth(Tensor::from_vec(&[1, 2], vec![3.0, 3.0]).unwrap()).unwrap();
        let (r, g) = consistency_loss_grad(&pred, &pseudo, LossNorm::Full).unwrap();
        assert!((r.value - (1.0 + 2.0) / 2.0).abs() < 1e-12);
        assert_eq!(g.data()[0], -0.5);
        assert_eq!(g.data()[1], 0.5);
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w, c) = (2, 3, 4);
        let logits: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, g) = entropy_loss_grad(&seg_pred(h, w, c, logits.clone())).unwrap();
        let hstep = 1e-6;
        for idx in 0..h * w * c {
            let mut lp = logits.clone();
            lp[idx] += hstep;
            let mut lm = logits.clone();
            lm[idx] -= hstep;
            let (fp, _) = entropy_loss_grad(&seg_pred(h, w, c, lp)).unwrap();
            let (fm, _) = entropy_loss_grad(&seg_pred(h, w, c, lm)).unwrap();
            let fd = (fp - fm) / (2.0 * hstep);
            assert!((fd - g.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn entropy_rejected_for_depth() {
        let arch = Architecture::depth();
        let params = arch.init_params::<f32>(1);
        let img = Tensor::<f32>::full(&[8, 8, 3], 0.5);
        let pred = arch.forward(&params, &img, Dropout::off()).unwrap();
        assert!(matches!(entropy_loss_grad(&pred), Err(Error::Config(_))));
    }
}
