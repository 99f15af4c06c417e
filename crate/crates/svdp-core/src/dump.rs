//! Optional PNG exports for inspection: masks, label maps, uncertainty.

use crate::error::{Error, Result};
use crate::num::Real;
use crate::tensor::Tensor;
use crate::uncertainty::UncertaintyReport;
use image::{ImageBuffer, Luma, Rgb};
use serde::Serialize;
use std::path::Path;

/// Distinct display colors for label maps (cycles past 10 classes).
const PALETTE: [[u8; 3]; 10] = [
    [40, 40, 40],
    [214, 69, 65],
    [63, 156, 53],
    [52, 98, 219],
    [222, 196, 41],
    [155, 89, 182],
    [26, 188, 156],
    [241, 148, 100],
    [127, 140, 141],
    [255, 255, 255],
];

pub fn save_bool_png(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    let data: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Image("mask buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image(e.to_string()))
}

pub fn save_label_png(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let l = labels[y as usize * w + x as usize] as usize % PALETTE.len();
        Rgb(PALETTE[l])
    });
    buf.save(path).map_err(|e| Error::Image(e.to_string()))
}

#[derive(Serialize)]
struct UncertaintySidecar {
    m: usize,
    method: String,
    image_value: f64,
    scale: f64,
}

/// 16-bit grayscale dump of a pixel map plus a JSON sidecar carrying the
/// normalization scale and summary values.
pub fn save_uncertainty_png<T: Real>(path: &Path, report: &UncertaintyReport<T>) -> Result<()> {
    let (h, w) = report.dims();
    let max = report
        .pixel_map
        .data()
        .iter()
        .map(|v| v.as_f64())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let data: Vec<u16> = report
        .pixel_map
        .data()
        .iter()
        .map(|v| ((v.as_f64() / max).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Image("uncertainty buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image(e.to_string()))?;
    let sidecar = UncertaintySidecar {
        m: report.samples,
        method: format!("{:?}", report.method),
        image_value: report.image_value.as_f64(),
        scale: max,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path.with_extension("json"), json)?;
    Ok(())
}

/// Grayscale dump of a confidence map in [0, 1].
pub fn save_confidence_png<T: Real>(path: &Path, confidence: &Tensor<T>) -> Result<()> {
    let (h, w) = confidence.dims2()?;
    let data: Vec<u8> = confidence
        .data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Image("confidence buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::{from_samples, UncertaintyMethod};

    #[test]
    fn dumps_write_files() {
        let dir = tempfile::tempdir().unwrap();
        save_bool_png(&dir.path().join("mask.png"), &[true, false, false, true], 2, 2).unwrap();
        save_label_png(&dir.path().join("labels.png"), &[0, 1, 2, 3], 2, 2).unwrap();
        let a = Tensor::<f32>::from_vec(&[2, 2, 1], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2, 2, 1], vec![0.9, 0.1, 0.6, 0.4]).unwrap();
        let report = from_samples(&[a, b], UncertaintyMethod::McDropout).unwrap();
        save_uncertainty_png(&dir.path().join("unc.png"), &report).unwrap();
        assert!(dir.path().join("unc.json").exists());
        save_confidence_png(
            &dir.path().join("conf.png"),
            &Tensor::<f32>::from_vec(&[2, 2], vec![0.0, 0.5, 0.75, 1.0]).unwrap(),
        )
        .unwrap();
    }
}
