//! Segmentation and depth metric suite.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegMetrics {
    pub miou: f64,
    pub macc: f64,
    /// IoU per class; `None` when the class is absent from both maps.
    pub per_class_iou: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DepthMetrics {
    pub delta1: f64,
    pub delta2: f64,
    pub absrel: f64,
    pub rmse: f64,
}

/// Confusion-matrix accumulator (gt-major layout).
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("miou", format!("{}", gt.len()), format!("{}", pred.len())));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if p as usize >= self.classes || g as usize >= self.classes {
                return Err(Error::InvalidInput(format!(
                    "label out of range: pred {p} / gt {g} with {} classes",
                    self.classes
                )));
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn metrics(&self) -> SegMetrics {
        let c = self.classes;
        let mut per_class_iou = Vec::with_capacity(c);
        let mut iou_sum = 0.0;
        let mut iou_n = 0usize;
        let mut acc_sum = 0.0;
        let mut acc_n = 0usize;
        for cls in 0..c {
            let tp = self.counts[cls * c + cls];
            let fn_: u64 = (0..c).filter(|&p| p != cls).map(|p| self.counts[cls * c + p]).sum();
            let fp: u64 = (0..c).filter(|&g| g != cls).map(|g| self.counts[g * c + cls]).sum();
            let denom = tp + fp + fn_;
            if denom == 0 {
                per_class_iou.push(None);
            } else {
                let iou = tp as f64 / denom as f64;
                per_class_iou.push(Some(iou));
                iou_sum += iou;
                iou_n += 1;
            }
            // Recall over classes that appear in the ground truth.
            if tp + fn_ > 0 {
                acc_sum += tp as f64 / (tp + fn_) as f64;
                acc_n += 1;
            }
        }
        SegMetrics {
            miou: if iou_n > 0 { iou_sum / iou_n as f64 } else { 0.0 },
            macc: if acc_n > 0 { acc_sum / acc_n as f64 } else { 0.0 },
            per_class_iou,
        }
    }
}

/// One-shot mIoU / mAcc for a single prediction.
pub fn miou(pred: &[u8], gt: &[u8], classes: usize) -> Result<SegMetrics> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.metrics())
}

/// Pixel-sum accumulator for dataset-level depth metrics.
#[derive(Debug, Clone, Default)]
pub struct DepthAccum {
    n: u64,
    d1: u64,
    d2: u64,
    absrel_sum: f64,
    sq_sum: f64,
}

impl DepthAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &[f32], gt: &[f32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("depth_metrics", format!("{}", gt.len()), format!("{}", pred.len())));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let (p, g) = (p as f64, g as f64);
            if p.is_nan() || g.is_nan() || p <= 0.0 || g <= 0.0 {
                return Err(Error::InvalidInput(format!("nonpositive depth: pred {p}, gt {g}")));
            }
            let ratio = (p / g).max(g / p);
            if ratio < 1.25 {
                self.d1 += 1;
            }
            if ratio < 1.25 * 1.25 {
                self.d2 += 1;
            }
            self.absrel_sum += (p - g).abs() / g;
            self.sq_sum += (p - g) * (p - g);
            self.n += 1;
        }
        Ok(())
    }

    pub fn metrics(&self) -> DepthMetrics {
        let n = self.n.max(1) as f64;
        DepthMetrics {
            delta1: self.d1 as f64 / n,
            delta2: self.d2 as f64 / n,
            absrel: self.absrel_sum / n,
            rmse: (self.sq_sum / n).sqrt(),
        }
    }
}

/// One-shot depth metrics for a single prediction.
pub fn depth_metrics(pred: &[f32], gt: &[f32]) -> Result<DepthMetrics> {
    let mut acc = DepthAccum::new();
    acc.add(pred, gt)?;
    Ok(acc.metrics())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = vec![0u8, 1, 2, 1];
        let m = miou(&gt, &gt, 3).unwrap();
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.macc, 1.0);
    }

    #[test]
    fn hand_confusion_example() {
        // gt=[0,0,1,1], pred=[0,1,1,1]: IoU_0 = 1/2, IoU_1 = 2/3.
        let m = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((m.per_class_iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((m.per_class_iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // mAcc: recall_0 = 1/2, recall_1 = 1.
        assert!((m.macc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn disjoint_prediction_zero_miou() {
        let m = miou(&[0, 0, 0, 0], &[1, 1, 1, 1], 2).unwrap();
        assert_eq!(m.miou, 0.0);
    }

    #[test]
    fn absent_class_excluded() {
        // Class 2 appears nowhere; the mean skips it.
        let m = miou(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(m.per_class_iou[2], None);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(miou(&[5], &[0], 3).is_err());
        assert!(miou(&[0], &[7], 3).is_err());
    }

    #[test]
    fn miou_matches_scalar_oracle_on_random_maps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = 16 * 16;
            let c = 5;
            let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
            let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c) as u8).collect();
            let m = miou(&pred, &gt, c).unwrap();
            // Scalar-loop oracle.
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for cls in 0..c as u8 {
                let tp = pred.iter().zip(&gt).filter(|&(&p, &g)| p == cls && g == cls).count();
                let fp = pred.iter().zip(&gt).filter(|&(&p, &g)| p == cls && g != cls).count();
                let fn_ = pred.iter().zip(&gt).filter(|&(&p, &g)| p != cls && g == cls).count();
                if tp + fp + fn_ > 0 {
                    sum += tp as f64 / (tp + fp + fn_) as f64;
                    cnt += 1;
                }
            }
            assert!((m.miou - sum / cnt as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn depth_perfect() {
        let gt = vec![1.0f32, 10.0, 50.0];
        let m = depth_metrics(&gt, &gt).unwrap();
        assert_eq!(m.delta1, 1.0);
        assert_eq!(m.delta2, 1.0);
        assert_eq!(m.absrel, 0.0);
        assert_eq!(m.rmse, 0.0);
    }

    #[test]
    fn depth_doubled_prediction() {
        let gt = vec![2.0f32, 4.0];
        let pred = vec![4.0f32, 8.0];
        let m = depth_metrics(&pred, &gt).unwrap();
        // ratio 2 fails both 1.25 and 1.5625 thresholds.
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 0.0);
        assert!((m.absrel - 1.0).abs() < 1e-12);
    }

    #[test]
    fn depth_single_pixel_example() {
        let m = depth_metrics(&[1.2], &[1.0]).unwrap();
        assert_eq!(m.delta1, 1.0);
        assert!((m.absrel - 0.2).abs() < 1e-6);
        assert!((m.rmse - 0.2).abs() < 1e-6);
    }

    #[test]
    fn depth_rejects_nonpositive() {
        assert!(depth_metrics(&[0.0], &[1.0]).is_err());
        assert!(depth_metrics(&[1.0], &[-2.0]).is_err());
    }

    #[test]
    fn depth_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let n = 16 * 16;
        let gt: Vec<f32> = (0..n).map(|_| rng.gen_range(1.0..80.0)).collect();
        let pred: Vec<f32> = gt.iter().map(|&g| (g * rng.gen_range(0.5..2.0f32)).max(0.1)).collect();
        let m = depth_metrics(&pred, &gt).unwrap();
        let mut d1 = 0usize;
        let mut absrel = 0.0f64;
        let mut sq = 0.0f64;
        for i in 0..n {
            let (p, g) = (pred[i] as f64, gt[i] as f64);
            if (p / g).max(g / p) < 1.25 {
                d1 += 1;
            }
            absrel += (p - g).abs() / g / n as f64;
            sq += (p - g) * (p - g) / n as f64;
        }
        assert!((m.delta1 - d1 as f64 / n as f64).abs() < 1e-9);
        assert!((m.absrel - absrel).abs() < 1e-9);
        assert!((m.rmse - sq.sqrt()).abs() < 1e-9);
    }
}
