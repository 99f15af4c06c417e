//! Dense row-major tensors plus the handful of image ops the pipeline needs.
//!
//! Images are `[H, W, C]` with channels contiguous per pixel; conv weights are
//! `[out_c, kh, kw, in_c]`.

use crate::error::{Error, Result};
use crate::num::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{} elements for {:?}", n, shape),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// (H, W, C) accessor; errors unless the tensor is rank 3.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::shape("dims3", "rank-3 tensor", format!("{:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// (H, W) accessor; errors unless the tensor is rank 2.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape("dims2", "rank-2 tensor", format!("{:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Bilinear resize of an `[H, W, C]` tensor (half-pixel centers, edge clamp).
pub fn resize_bilinear<T: Real>(src: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = src.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput("resize target must be nonzero".into()));
    }
    if out_h == h && out_w == w {
        return Ok(src.clone());
    }
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let src_data = src.data();
    let out_data = out.data_mut();
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let base = (oy * out_w + ox) * c;
            for ch in 0..c {
                let v00 = src_data[(y0 * w + x0) * c + ch].as_f64();
                let v01 = src_data[(y0 * w + x1) * c + ch].as_f64();
                let v10 = src_data[(y1 * w + x0) * c + ch].as_f64();
                let v11 = src_data[(y1 * w + x1) * c + ch].as_f64();
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out_data[base + ch] = T::from_f64(top + (bot - top) * wy);
            }
        }
    }
    Ok(out)
}

/// Scaled size for resolution augmentation; never collapses below 2 px.
pub fn scaled_dim(dim: usize, scale: f64) -> usize {
    ((dim as f64 * scale).round() as usize).max(2)
}
