//! Layer primitives for the compact encoder-decoder.
//!
//! All maps are row-major `[H, W, C]` with channels contiguous per pixel.
//! Conv weights are `[out_c, 3, 3, in_c]`. Forward functions return plain
//! vectors; backward functions take the saved forward context and the
//! upstream gradient.

use crate::num::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub const NORM_EPS: f64 = 1e-5;

/// Work threshold above which conv rows are computed in parallel.
const PAR_PIXELS: usize = 2048;

pub fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Numerically stable ln(1 + e^z).
pub fn softplus<T: Real>(z: T) -> T {
    let twenty = T::from_f64(20.0);
    if z > twenty {
        z
    } else if z < -twenty {
        z.exp()
    } else {
        (T::one() + z.exp()).ln()
    }
}

pub fn silu<T: Real>(a: &[T]) -> Vec<T> {
    a.iter().map(|&v| v * sigmoid(v)).collect()
}

/// dL/da given dL/dout where out = a * sigmoid(a).
pub fn silu_backward<T: Real>(dout: &[T], a: &[T]) -> Vec<T> {
    dout.iter()
        .zip(a.iter())
        .map(|(&g, &v)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// 3x3 convolution with replicate (edge-clamp) padding. Output is
/// `ceil(h/stride) x ceil(w/stride)`. Edge clamping keeps constant inputs
/// constant, which zero padding would not.
pub fn conv3x3<T: Real>(
    input: &[T],
    h: usize,
    w: usize,
    ic: usize,
    weight: &[T],
    bias: &[T],
    oc: usize,
    stride: usize,
) -> (Vec<T>, usize, usize) {
    debug_assert_eq!(input.len(), h * w * ic);
    debug_assert_eq!(weight.len(), oc * 9 * ic);
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let mut out = vec![T::zero(); oh * ow * oc];

    let row = |oy: usize, out_row: &mut [T]| {
        for ox in 0..ow {
            out_row[ox * oc..(ox + 1) * oc].copy_from_slice(bias);
        }
        for ky in 0..3 {
            let iy = ((oy * stride + ky) as isize - 1).clamp(0, h as isize - 1) as usize;
            let in_row = &input[iy * w * ic..(iy + 1) * w * ic];
            for kx in 0..3 {
                for ox in 0..ow {
                    let ix = ((ox * stride + kx) as isize - 1).clamp(0, w as isize - 1) as usize;
                    let in_px = &in_row[ix * ic..(ix + 1) * ic];
                    let out_px = &mut out_row[ox * oc..(ox + 1) * oc];
                    for (c, o) in out_px.iter_mut().enumerate() {
                        let wrow = &weight[((c * 3 + ky) * 3 + kx) * ic..][..ic];
                        let mut acc = T::zero();
                        for i in 0..ic {
                            acc += wrow[i] * in_px[i];
                        }
                        *o += acc;
                    }
                }
            }
        }
    };

    if oh * ow >= PAR_PIXELS {
        out.par_chunks_mut(ow * oc)
            .enumerate()
            .for_each(|(oy, out_row)| row(oy, out_row));
    } else {
        for (oy, out_row) in out.chunks_mut(ow * oc).enumerate() {
            row(oy, out_row);
        }
    }
    (out, oh, ow)
}

/// Gradients of [`conv3x3`]: returns (d_input, d_weight, d_bias).
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    input: &[T],
    h: usize,
    w: usize,
    ic: usize,
    weight: &[T],
    oc: usize,
    stride: usize,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    debug_assert_eq!(dout.len(), oh * ow * oc);
    let mut dinput = vec![T::zero(); h * w * ic];
    let mut dweight = vec![T::zero(); oc * 9 * ic];
    let mut dbias = vec![T::zero(); oc];

    for oy in 0..oh {
        let dout_row = &dout[oy * ow * oc..(oy + 1) * ow * oc];
        for ox in 0..ow {
            let dout_px = &dout_row[ox * oc..(ox + 1) * oc];
            for (c, &g) in dout_px.iter().enumerate() {
                dbias[c] += g;
            }
            for ky in 0..3 {
                let iy = ((oy * stride + ky) as isize - 1).clamp(0, h as isize - 1) as usize;
                for kx in 0..3 {
                    let ix = ((ox * stride + kx) as isize - 1).clamp(0, w as isize - 1) as usize;
                    let px = (iy * w + ix) * ic;
                    let in_px = &input[px..px + ic];
                    let din_px = &mut dinput[px..px + ic];
                    for (c, &g) in dout_px.iter().enumerate() {
                        let base = ((c * 3 + ky) * 3 + kx) * ic;
                        let wrow = &weight[base..base + ic];
                        let dwrow = &mut dweight[base..base + ic];
                        for i in 0..ic {
                            din_px[i] += wrow[i] * g;
                            dwrow[i] += in_px[i] * g;
                        }
                    }
                }
            }
        }
    }
    (dinput, dweight, dbias)
}

/// Saved context from instance normalization.
pub struct NormTrace<T> {
    /// Normalized activations (pre-affine).
    pub y: Vec<T>,
    /// Per-channel 1/sqrt(var + eps).
    pub inv_std: Vec<T>,
}

/// Per-channel spatial normalization followed by a learned affine.
pub fn instance_norm<T: Real>(
    x: &[T],
    hw: usize,
    c: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, NormTrace<T>) {
    debug_assert_eq!(x.len(), hw * c);
    let mut y = vec![T::zero(); hw * c];
    let mut inv_std = vec![T::zero(); c];
    let mut out = vec![T::zero(); hw * c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for px in 0..hw {
            sum += x[px * c + ch].as_f64();
        }
        let mean = sum / hw as f64;
        let mut var = 0.0f64;
        for px in 0..hw {
            let d = x[px * c + ch].as_f64() - mean;
            var += d * d;
        }
        var /= hw as f64;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[ch] = T::from_f64(istd);
        let mean_t = T::from_f64(mean);
        let istd_t = T::from_f64(istd);
        for px in 0..hw {
            let yy = (x[px * c + ch] - mean_t) * istd_t;
            y[px * c + ch] = yy;
            out[px * c + ch] = gamma[ch] * yy + beta[ch];
        }
    }
    (out, NormTrace { y, inv_std })
}

/// Gradients of [`instance_norm`]: returns (d_x, d_gamma, d_beta).
pub fn instance_norm_backward<T: Real>(
    dout: &[T],
    trace: &NormTrace<T>,
    gamma: &[T],
    hw: usize,
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); hw * c];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let n = hw as f64;
    for ch in 0..c {
        let mut dg = 0.0f64;
        let mut db = 0.0f64;
        let mut dy_mean = 0.0f64;
        let mut dyy_mean = 0.0f64;
        for px in 0..hw {
            let g = dout[px * c + ch].as_f64();
            let yy = trace.y[px * c + ch].as_f64();
            dg += g * yy;
            db += g;
            let dy = g * gamma[ch].as_f64();
            dy_mean += dy;
            dyy_mean += dy * yy;
        }
        dgamma[ch] = T::from_f64(dg);
        dbeta[ch] = T::from_f64(db);
        dy_mean /= n;
        dyy_mean /= n;
        let istd = trace.inv_std[ch].as_f64();
        for px in 0..hw {
            let g = dout[px * c + ch].as_f64();
            let yy = trace.y[px * c + ch].as_f64();
            let dy = g * gamma[ch].as_f64();
            dx[px * c + ch] = T::from_f64(istd * (dy - dy_mean - yy * dyy_mean));
        }
    }
    (dx, dgamma, dbeta)
}

/// Nearest-neighbor 2x upsample cropped to `(th, tw)`.
pub fn upsample2_crop<T: Real>(x: &[T], h: usize, w: usize, c: usize, th: usize, tw: usize) -> Vec<T> {
    debug_assert!(th <= 2 * h && tw <= 2 * w);
    let mut out = vec![T::zero(); th * tw * c];
    for y in 0..th {
        let sy = y / 2;
        for x_ in 0..tw {
            let sx = x_ / 2;
            let src = (sy * w + sx) * c;
            let dst = (y * tw + x_) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

pub fn upsample2_crop_backward<T: Real>(
    dout: &[T],
    h: usize,
    w: usize,
    c: usize,
    th: usize,
    tw: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); h * w * c];
    for y in 0..th {
        let sy = y / 2;
        for x_ in 0..tw {
            let sx = x_ / 2;
            let src = (sy * w + sx) * c;
            let dst = (y * tw + x_) * c;
            for ch in 0..c {
                dx[src + ch] += dout[dst + ch];
            }
        }
    }
    dx
}

/// Per-pixel linear projection: `[n_px, fin] -> [n_px, fout]`.
pub fn pixel_linear<T: Real>(
    x: &[T],
    n_px: usize,
    fin: usize,
    weight: &[T],
    bias: &[T],
    fout: usize,
) -> Vec<T> {
    debug_assert_eq!(x.len(), n_px * fin);
    debug_assert_eq!(weight.len(), fout * fin);
    let mut out = vec![T::zero(); n_px * fout];
    for px in 0..n_px {
        let xin = &x[px * fin..(px + 1) * fin];
        let o = &mut out[px * fout..(px + 1) * fout];
        for k in 0..fout {
            let wrow = &weight[k * fin..(k + 1) * fin];
            let mut acc = bias[k];
            for i in 0..fin {
                acc += wrow[i] * xin[i];
            }
            o[k] = acc;
        }
    }
    out
}

/// Gradients of [`pixel_linear`]: returns (d_x, d_weight, d_bias).
pub fn pixel_linear_backward<T: Real>(
    x: &[T],
    n_px: usize,
    fin: usize,
    weight: &[T],
    fout: usize,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n_px * fin];
    let mut dweight = vec![T::zero(); fout * fin];
    let mut dbias = vec![T::zero(); fout];
    for px in 0..n_px {
        let xin = &x[px * fin..(px + 1) * fin];
        let dxp = &mut dx[px * fin..(px + 1) * fin];
        let go = &dout[px * fout..(px + 1) * fout];
        for k in 0..fout {
            let g = go[k];
            dbias[k] += g;
            let wrow = &weight[k * fin..(k + 1) * fin];
            let dwrow = &mut dweight[k * fin..(k + 1) * fin];
            for i in 0..fin {
                dxp[i] += wrow[i] * g;
                dwrow[i] += xin[i] * g;
            }
        }
    }
    (dx, dweight, dbias)
}

/// Inverted-dropout factors: each entry is 0 with probability `rate`, else
/// `1/(1-rate)`. Rate 0 yields exact ones, so the flag becomes a no-op.
pub fn dropout_factors<T: Real>(n: usize, rate: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        // Kernel with a single 1 at the center copies the input channel.
        let input: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut weight = vec![0.0f64; 9];
        weight[4] = 1.0; // [oc=1][ky=1][kx=1][ic=1]
        let (out, oh, ow) = conv3x3(&input, 3, 3, 1, &weight, &[0.0], 1, 1);
        assert_eq!((oh, ow), (3, 3));
        assert_eq!(out, input);
    }

    #[test]
    fn conv_stride2_dims() {
        let input = vec![0.5f32; 5 * 7 * 2];
        let weight = vec![0.1f32; 3 * 9 * 2];
        let (out, oh, ow) = conv3x3(&input, 5, 7, 2, &weight, &[0.0; 3], 3, 2);
        assert_eq!((oh, ow), (3, 4));
        assert_eq!(out.len(), 3 * 4 * 3);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let (h, w, ic, oc, stride) = (4, 5, 2, 3, 2);
        let input: Vec<f64> = (0..h * w * ic).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weight: Vec<f64> = (0..oc * 9 * ic).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..oc).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, oh, ow) = conv3x3(&input, h, w, ic, &weight, &bias, oc, stride);
        // Loss = sum of squares of output.
        let dout: Vec<f64> = out.iter().map(|&v| 2.0 * v).collect();
        let (din, dw, db) = conv3x3_backward(&input, h, w, ic, &weight, oc, stride, &dout);
        let loss = |inp: &[f64], wt: &[f64], bs: &[f64]| -> f64 {
            let (o, _, _) = conv3x3(inp, h, w, ic, wt, bs, oc, stride);
            o.iter().map(|v| v * v).sum()
        };
        let hstep = 1e-6;
        for idx in [0usize, 7, h * w * ic - 1] {
            let mut p = input.clone();
            p[idx] += hstep;
            let mut m = input.clone();
            m[idx] -= hstep;
            let fd = (loss(&p, &weight, &bias) - loss(&m, &weight, &bias)) / (2.0 * hstep);
            assert!((fd - din[idx]).abs() < 1e-5, "din[{idx}]: fd={fd} got={}", din[idx]);
        }
        for idx in [0usize, 11, oc * 9 * ic - 1] {
            let mut p = weight.clone();
            p[idx] += hstep;
            let mut m = weight.clone();
            m[idx] -= hstep;
            let fd = (loss(&input, &p, &bias) - loss(&input, &m, &bias)) / (2.0 * hstep);
            assert!((fd - dw[idx]).abs() < 1e-5);
        }
        for idx in 0..oc {
            let mut p = bias.clone();
            p[idx] += hstep;
            let mut m = bias.clone();
            m[idx] -= hstep;
            let fd = (loss(&input, &weight, &p) - loss(&input, &weight, &m)) / (2.0 * hstep);
            assert!((fd - db[idx]).abs() < 1e-5);
        }
        let _ = (oh, ow);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let gamma = vec![1.0];
        let beta = vec![0.0];
        let (out, _) = instance_norm(&x, 12, 1, &gamma, &beta);
        let mean: f64 = out.iter().sum::<f64>() / 12.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let x: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let up = upsample2_crop(&x, 2, 3, 1, 4, 5);
        assert_eq!(up.len(), 20);
        assert_eq!(up[0], x[0]);
        assert_eq!(up[1], x[0]);
        assert_eq!(up[2], x[1]);
        let d = upsample2_crop_backward(&up, 2, 3, 1, 4, 5);
        // Each source pixel in the interior fans out to 4 outputs.
        assert_eq!(d[0], 4.0 * x[0]);
    }

    #[test]
    fn dropout_rate_zero_is_all_ones() {
        let f: Vec<f32> = dropout_factors(100, 0.0, 7);
        assert!(f.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_deterministic_per_seed() {
        let a: Vec<f32> = dropout_factors(64, 0.3, 9);
        let b: Vec<f32> = dropout_factors(64, 0.3, 9);
        let c: Vec<f32> = dropout_factors(64, 0.3, 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn softplus_positive_and_stable() {
        assert!(softplus(-50.0f64) > 0.0);
        assert!((softplus(50.0f64) - 50.0).abs() < 1e-9);
        assert!((softplus(0.0f64) - (2.0f64).ln()).abs() < 1e-12);
    }
}
