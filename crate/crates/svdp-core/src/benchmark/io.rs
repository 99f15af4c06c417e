//! Corpus disk layout: PNG images per split plus a manifest.
//!
//! ```text
//! corpus/
//!   manifest.json
//!   source/0000_image.png  0000_labels.png  0000_depth.png ...
//!   fog/    night/  rain/  snow/   (same triple per sample)
//! ```
//!
//! Images are 8-bit RGB, labels are raw class indices in an 8-bit gray PNG,
//! depth is 16-bit gray scaled by `depth_max` from the manifest.

use super::{Corpus, CorpusParams, CorruptionKind, DomainStream, SyntheticScene, CLASS_NAMES, DEPTH_MAX};
use crate::adaptation::StreamSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub params: CorpusParams,
    pub depth_max: f64,
    pub domains: Vec<String>,
    pub classes: Vec<String>,
}

fn save_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w, _) = image.dims3()?;
    let data = image.data();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = (y as usize * w + x as usize) * 3;
        Rgb([
            (data[px].clamp(0.0, 1.0) * 255.0).round() as u8,
            (data[px + 1].clamp(0.0, 1.0) * 255.0).round() as u8,
            (data[px + 2].clamp(0.0, 1.0) * 255.0).round() as u8,
        ])
    });
    buf.save(path).map_err(|e| Error::Image(e.to_string()))
}

fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image(e.to_string()))?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in img.pixels() {
        data.push(px[0] as f32 / 255.0);
        data.push(px[1] as f32 / 255.0);
        data.push(px[2] as f32 / 255.0);
    }
    Tensor::from_vec(&[h as usize, w as usize, 3], data)
}

fn save_labels(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, labels.to_vec())
            .ok_or_else(|| Error::Image("label buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image(e.to_string()))
}

fn load_labels(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::Image(e.to_string()))?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), h as usize, w as usize))
}

fn save_depth(path: &Path, depth: &[f32], h: usize, w: usize) -> Result<()> {
    let data: Vec<u16> = depth
        .iter()
        .map(|&d| ((d as f64 / DEPTH_MAX).clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| Error::Image("depth buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image(e.to_string()))
}

fn load_depth(path: &Path, depth_max: f64) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Image(e.to_string()))?.into_luma16();
    Ok(img
        .into_raw()
        .into_iter()
        .map(|v| ((v as f64 / 65535.0 * depth_max) as f32).max(1e-3))
        .collect())
}

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CorpusManifest {
        params: corpus.params.clone(),
        depth_max: DEPTH_MAX,
        domains: corpus.targets.iter().map(|t| t.kind.name().to_string()).collect(),
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?,
    )?;

    let src_dir = dir.join("source");
    fs::create_dir_all(&src_dir)?;
    for (i, scene) in corpus.source.iter().enumerate() {
        let (h, w, _) = scene.image.dims3()?;
        save_image(&src_dir.join(format!("{i:04}_image.png")), &scene.image)?;
        save_labels(&src_dir.join(format!("{i:04}_labels.png")), &scene.labels, h, w)?;
        save_depth(&src_dir.join(format!("{i:04}_depth.png")), &scene.depth, h, w)?;
    }
    for stream in &corpus.targets {
        let d = dir.join(stream.kind.name());
        fs::create_dir_all(&d)?;
        for (i, s) in stream.samples.iter().enumerate() {
            let (h, w, _) = s.image.dims3()?;
            save_image(&d.join(format!("{i:04}_image.png")), &s.image)?;
            save_labels(&d.join(format!("{i:04}_labels.png")), &s.gt_labels, h, w)?;
            save_depth(&d.join(format!("{i:04}_depth.png")), &s.gt_depth, h, w)?;
        }
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let mut source = Vec::new();
    for i in 0..manifest.params.n_source {
        let base = dir.join("source");
        let image = load_image(&base.join(format!("{i:04}_image.png")))?;
        let (labels, _, _) = load_labels(&base.join(format!("{i:04}_labels.png")))?;
        let depth = load_depth(&base.join(format!("{i:04}_depth.png")), manifest.depth_max)?;
        source.push(SyntheticScene { image, labels, depth });
    }
    let mut targets = Vec::new();
    for name in &manifest.domains {
        let kind = CorruptionKind::from_name(name)
            .ok_or_else(|| Error::Format(format!("unknown domain '{name}'")))?;
        let base = dir.join(name);
        let mut samples = Vec::new();
        for i in 0..manifest.params.n_per_domain {
            let image = load_image(&base.join(format!("{i:04}_image.png")))?;
            let (labels, _, _) = load_labels(&base.join(format!("{i:04}_labels.png")))?;
            let depth = load_depth(&base.join(format!("{i:04}_depth.png")), manifest.depth_max)?;
            samples.push(StreamSample {
                image,
                domain: name.clone(),
                gt_labels: labels,
                gt_depth: depth,
                index: i,
            });
        }
        targets.push(DomainStream { kind, samples });
    }
    Ok(Corpus {
        params: manifest.params,
        source,
        targets,
    })
}
