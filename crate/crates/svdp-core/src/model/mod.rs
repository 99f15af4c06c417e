//! Compact dense-prediction network with full parameter introspection.
//!
//! Four conv blocks (conv3x3 -> instance norm -> affine -> SiLU) arranged as
//! an encoder-decoder (stride-2 downsample after the first block, nearest
//! upsample before the last), then a per-pixel linear head. Dropout lives
//! only inside the prediction head, which is what makes cheap MC-dropout
//! uncertainty possible: the trunk is computed once and the head is
//! re-sampled.
//!
//! Forward and backward are hand-written; `backward` returns gradients for
//! every parameter tensor plus the network input, which is where prompt
//! gradients come from.

mod layers;
pub mod checkpoint;

pub use layers::NORM_EPS;

use crate::error::{Error, Result};
use crate::num::{mix_seed, Real};
use crate::tensor::Tensor;
use layers::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Seg,
    Depth,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Seg => write!(f, "seg"),
            Task::Depth => write!(f, "depth"),
        }
    }
}

/// Output gain of the depth head: depth = softplus(z) * DEPTH_HEAD_SCALE.
/// Softplus keeps depth positive; the gain lets the head span road-scene
/// depth ranges with moderate logits.
pub const DEPTH_HEAD_SCALE: f64 = 8.0;

/// Fixed network architecture; owns no weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Architecture {
    pub task: Task,
    /// Segmentation class count (unused by depth, which has one output).
    pub classes: usize,
    /// Widths of the four conv blocks.
    pub channels: [usize; 4],
    /// Dropout rate inside the prediction head.
    pub dropout_rate: f64,
    /// Number of dropout sites in the head: 1 = before the final projection,
    /// 2 = adds a hidden linear+SiLU head stage with dropout before each.
    pub dropout_layers: usize,
}

impl Architecture {
    pub fn seg(classes: usize) -> Self {
        Architecture {
            task: Task::Seg,
            classes,
            channels: [16, 32, 32, 16],
            dropout_rate: 0.1,
            dropout_layers: 1,
        }
    }

    pub fn depth() -> Self {
        Architecture {
            task: Task::Depth,
            classes: 1,
            channels: [16, 32, 32, 16],
            dropout_rate: 0.1,
            dropout_layers: 1,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.task {
            Task::Seg => self.classes,
            Task::Depth => 1,
        }
    }

    pub fn validate_config(&self) -> Result<()> {
        if self.task == Task::Seg && self.classes < 2 {
            return Err(Error::Config("segmentation needs >= 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0,1)", self.dropout_rate)));
        }
        if !(1..=2).contains(&self.dropout_layers) {
            return Err(Error::Config("dropout_layers must be 1 or 2".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("zero-width conv block".into()));
        }
        Ok(())
    }

    /// Canonical (name, shape) listing of every parameter tensor.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let [c0, c1, c2, c3] = self.channels;
        let k = self.out_channels();
        let mut specs = Vec::new();
        // No conv bias: instance norm directly follows every conv and would
        // cancel it.
        let blocks = [("enc1", 3, c0), ("enc2", c0, c1), ("dec1", c1, c2), ("dec2", c2, c3)];
        for (name, ic, oc) in blocks {
            specs.push((format!("{name}.weight"), vec![oc, 3, 3, ic]));
            specs.push((format!("{name}.norm.gamma"), vec![oc]));
            specs.push((format!("{name}.norm.beta"), vec![oc]));
        }
        if self.dropout_layers == 2 {
            specs.push(("head.hidden.weight".into(), vec![c3, c3]));
            specs.push(("head.hidden.bias".into(), vec![c3]));
        }
        specs.push(("head.weight".into(), vec![k, c3]));
        specs.push(("head.bias".into(), vec![k]));
        specs
    }

    /// He-uniform initialization, deterministic in `seed`.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for (name, shape) in self.param_specs() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".weight") {
                let fan_in: usize = if shape.len() == 4 { 9 * shape[3] } else { shape[1] };
                let lim = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.gen_range(-lim..lim))).collect()
            } else if name.ends_with(".norm.gamma") {
                vec![T::one(); n]
            } else if name == "head.bias" && self.task == Task::Depth {
                // Start depth predictions near mid-scene range.
                vec![T::from_f64(4.0); n]
            } else {
                vec![T::zero(); n]
            };
            set.insert(name, Tensor::from_vec(&shape, data).expect("spec shape"));
        }
        set
    }

    /// Checks that a parameter set matches this architecture exactly.
    pub fn validate_params<T: Real>(&self, params: &ParamSet<T>) -> Result<()> {
        let specs = self.param_specs();
        if specs.len() != params.tensor_count() {
            return Err(Error::Structural(format!(
                "expected {} tensors, checkpoint has {}",
                specs.len(),
                params.tensor_count()
            )));
        }
        for (name, shape) in specs {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Structural(format!(
                    "tensor {name}: expected shape {:?}, got {:?}",
                    shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Named collection of parameter tensors with deterministic ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Structural(format!("missing parameter tensor '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Structural(format!("missing parameter tensor '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Total scalar parameter count.
    pub fn total_len(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn same_structure(&self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Structural(format!(
                "tensor count {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((an, at), (bn, bt)) in self.tensors.iter().zip(other.tensors.iter()) {
            if an != bn {
                return Err(Error::Structural(format!("key mismatch: '{an}' vs '{bn}'")));
            }
            if at.shape() != bt.shape() {
                return Err(Error::Structural(format!(
                    "shape mismatch at '{an}': {:?} vs {:?}",
                    at.shape(),
                    bt.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn l2_distance(&self, other: &Self) -> f64 {
        let mut acc = 0.0f64;
        for ((_, a), (_, b)) in self.tensors.iter().zip(other.tensors.iter()) {
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                let d = x.as_f64() - y.as_f64();
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }
}

/// Dropout switch for a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub enabled: bool,
    pub seed: u64,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { enabled: false, seed: 0 }
    }

    pub fn on(seed: u64) -> Self {
        Dropout { enabled: true, seed }
    }
}

/// Network output: logits for segmentation, positive depth for depth mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction<T> {
    Seg { logits: Tensor<T> },
    Depth { depth: Tensor<T> },
}

impl<T: Real> Prediction<T> {
    pub fn spatial_dims(&self) -> (usize, usize) {
        match self {
            Prediction::Seg { logits } => {
                let s = logits.shape();
                (s[0], s[1])
            }
            Prediction::Depth { depth } => {
                let s = depth.shape();
                (s[0], s[1])
            }
        }
    }

    /// Per-pixel softmax probabilities (segmentation only).
    pub fn probabilities(&self) -> Result<Tensor<T>> {
        match self {
            Prediction::Seg { logits } => Ok(softmax_per_pixel(logits)),
            Prediction::Depth { .. } => {
                Err(Error::InvalidInput("probabilities() on a depth prediction".into()))
            }
        }
    }

    /// Argmax class per pixel; ties resolve to the smaller class index.
    pub fn labels(&self) -> Result<Vec<u8>> {
        match self {
            Prediction::Seg { logits } => {
                let (h, w, c) = logits.dims3()?;
                let d = logits.data();
                let mut out = Vec::with_capacity(h * w);
                for px in 0..h * w {
                    let row = &d[px * c..(px + 1) * c];
                    let mut best = 0usize;
                    for (i, &v) in row.iter().enumerate().skip(1) {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    out.push(best as u8);
                }
                Ok(out)
            }
            Prediction::Depth { .. } => Err(Error::InvalidInput("labels() on a depth prediction".into())),
        }
    }

    pub fn depth_map(&self) -> Result<&Tensor<T>> {
        match self {
            Prediction::Depth { depth } => Ok(depth),
            Prediction::Seg { .. } => Err(Error::InvalidInput("depth_map() on a seg prediction".into())),
        }
    }
}

/// Stable per-pixel softmax over the channel axis.
pub fn softmax_per_pixel<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = logits.dims3().expect("rank-3 logits");
    let mut out = Tensor::zeros(&[h, w, c]);
    let src = logits.data();
    let dst = out.data_mut();
    for px in 0..h * w {
        let row = &src[px * c..(px + 1) * c];
        let orow = &mut dst[px * c..(px + 1) * c];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

struct ConvBlockTrace<T> {
    input: Vec<T>,
    in_h: usize,
    in_w: usize,
    ic: usize,
    out_h: usize,
    out_w: usize,
    norm: NormTrace<T>,
    /// Affine output (pre-SiLU).
    a: Vec<T>,
}

struct HiddenTrace<T> {
    factors: Option<Vec<T>>,
    input: Vec<T>,
    z: Vec<T>,
}

/// Saved activations from one traced forward pass.
pub struct Trace<T> {
    h: usize,
    w: usize,
    blocks: Vec<ConvBlockTrace<T>>,
    up_src: (usize, usize),
    hidden: Option<HiddenTrace<T>>,
    final_factors: Option<Vec<T>>,
    final_feat: Vec<T>,
    head_z: Vec<T>,
}

impl<T: Real> Trace<T> {
    pub fn input_dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

/// Parameter and input gradients from one backward pass.
pub struct Gradients<T> {
    pub params: ParamSet<T>,
    /// dLoss/dInput over the network input image, `[H, W, 3]`.
    pub input: Tensor<T>,
}

/// Trunk activations cached for repeated head sampling.
pub struct TrunkFeatures<T> {
    pub features: Vec<T>,
    pub h: usize,
    pub w: usize,
}

impl Architecture {
    fn block_params<'a, T: Real>(
        &self,
        params: &'a ParamSet<T>,
        name: &str,
    ) -> Result<(&'a [T], &'a [T], &'a [T])> {
        Ok((
            params.get(&format!("{name}.weight"))?.data(),
            params.get(&format!("{name}.norm.gamma"))?.data(),
            params.get(&format!("{name}.norm.beta"))?.data(),
        ))
    }

    /// Conv trunk only: everything up to (not including) the head.
    pub fn trunk<T: Real>(&self, params: &ParamSet<T>, image: &Tensor<T>) -> Result<TrunkFeatures<T>> {
        let (feats, h, w, _) = self.run_trunk(params, image, false)?;
        Ok(TrunkFeatures { features: feats, h, w })
    }

    #[allow(clippy::type_complexity)]
    fn run_trunk<T: Real>(
        &self,
        params: &ParamSet<T>,
        image: &Tensor<T>,
        want_trace: bool,
    ) -> Result<(Vec<T>, usize, usize, Option<(Vec<ConvBlockTrace<T>>, (usize, usize))>)> {
        let (h, w, c) = image.dims3()?;
        if c != 3 {
            return Err(Error::shape("forward", "[H, W, 3] image", format!("{:?}", image.shape())));
        }
        if !image.all_finite() {
            return Err(Error::NonFinite("input image".into()));
        }
        let [c0, c1, c2, c3] = self.channels;
        let mut traces = Vec::new();

        let zero_bias = vec![T::zero(); self.channels.iter().copied().max().unwrap_or(1)];
        let mut run_block = |input: &[T],
                             in_h: usize,
                             in_w: usize,
                             ic: usize,
                             name: &str,
                             oc: usize,
                             stride: usize|
         -> Result<(Vec<T>, usize, usize)> {
            let (wt, gamma, beta) = self.block_params(params, name)?;
            let (conv_out, oh, ow) = conv3x3(input, in_h, in_w, ic, wt, &zero_bias[..oc], oc, stride);
            let (a, norm) = instance_norm(&conv_out, oh * ow, oc, gamma, beta);
            let out = silu(&a);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {name}")));
            }
            if want_trace {
                traces.push(ConvBlockTrace {
                    input: input.to_vec(),
                    in_h,
                    in_w,
                    ic,
                    out_h: oh,
                    out_w: ow,
                    norm,
                    a,
                });
            }
            Ok((out, oh, ow))
        };

        let (b0, h0, w0) = run_block(image.data(), h, w, 3, "enc1", c0, 1)?;
        let (b1, h1, w1) = run_block(&b0, h0, w0, c0, "enc2", c1, 2)?;
        let (b2, h2, w2) = run_block(&b1, h1, w1, c1, "dec1", c2, 1)?;
        let up = upsample2_crop(&b2, h2, w2, c2, h, w);
        let (b3, _, _) = run_block(&up, h, w, c2, "dec2", c3, 1)?;
        let extra = want_trace.then_some((traces, (h2, w2)));
        Ok((b3, h, w, extra))
    }

    #[allow(clippy::type_complexity)]
    fn run_head<T: Real>(
        &self,
        params: &ParamSet<T>,
        feats: &[T],
        h: usize,
        w: usize,
        dropout: Dropout,
        want_trace: bool,
    ) -> Result<(Prediction<T>, Option<(Option<HiddenTrace<T>>, Option<Vec<T>>, Vec<T>, Vec<T>)>)>
    {
        let c3 = self.channels[3];
        let k = self.out_channels();
        let n_px = h * w;
        let rate = self.dropout_rate;

        let mut hidden_trace = None;
        let src_final: Vec<T>;
        if self.dropout_layers == 2 {
            let factors = dropout
                .enabled
                .then(|| dropout_factors::<T>(n_px * c3, rate, mix_seed(dropout.seed, 0)));
            let hin: Vec<T> = match &factors {
                Some(f) => feats.iter().zip(f.iter()).map(|(&x, &m)| x * m).collect(),
                None => feats.to_vec(),
            };
            let hw_ = params.get("head.hidden.weight")?.data();
            let hb_ = params.get("head.hidden.bias")?.data();
            let z = pixel_linear(&hin, n_px, c3, hw_, hb_, c3);
            src_final = silu(&z);
            if src_final.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("layer head.hidden".into()));
            }
            hidden_trace = Some(HiddenTrace { factors, input: hin, z });
        } else {
            src_final = feats.to_vec();
        }

        let final_factors = dropout
            .enabled
            .then(|| dropout_factors::<T>(n_px * c3, rate, mix_seed(dropout.seed, 1)));
        let fd: Vec<T> = match &final_factors {
            Some(f) => src_final.iter().zip(f.iter()).map(|(&x, &m)| x * m).collect(),
            None => src_final,
        };
        let wt = params.get("head.weight")?.data();
        let bias = params.get("head.bias")?.data();
        let z = pixel_linear(&fd, n_px, c3, wt, bias, k);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer head".into()));
        }

        let pred = match self.task {
            Task::Seg => Prediction::Seg {
                logits: Tensor::from_vec(&[h, w, k], z.clone())?,
            },
            Task::Depth => {
                let scale = T::from_f64(DEPTH_HEAD_SCALE);
                let floor = T::from_f64(1e-6);
                let d: Vec<T> = z.iter().map(|&v| (softplus(v) * scale).max(floor)).collect();
                Prediction::Depth {
                    depth: Tensor::from_vec(&[h, w], d)?,
                }
            }
        };
        let extra = want_trace.then_some((hidden_trace, final_factors, fd, z));
        Ok((pred, extra))
    }

    /// Full forward pass. Deterministic given `(params, image, dropout)`.
    pub fn forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        image: &Tensor<T>,
        dropout: Dropout,
    ) -> Result<Prediction<T>> {
        let (feats, h, w, _) = self.run_trunk(params, image, false)?;
        let (pred, _) = self.run_head(params, &feats, h, w, dropout, false)?;
        Ok(pred)
    }

    /// Head-only forward over cached trunk features (MC-dropout fast path).
    pub fn head_forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        trunk: &TrunkFeatures<T>,
        dropout: Dropout,
    ) -> Result<Prediction<T>> {
        let (pred, _) = self.run_head(params, &trunk.features, trunk.h, trunk.w, dropout, false)?;
        Ok(pred)
    }

    /// Forward pass that records everything `backward` needs.
    pub fn forward_with_trace<T: Real>(
        &self,
        params: &ParamSet<T>,
        image: &Tensor<T>,
        dropout: Dropout,
    ) -> Result<(Prediction<T>, Trace<T>)> {
        let (feats, h, w, trunk_extra) = self.run_trunk(params, image, true)?;
        let (blocks, up_src) = trunk_extra.expect("trace requested");
        let (pred, head_extra) = self.run_head(params, &feats, h, w, dropout, true)?;
        let (hidden, final_factors, final_feat, head_z) = head_extra.expect("trace requested");
        Ok((
            pred,
            Trace {
                h,
                w,
                blocks,
                up_src,
                hidden,
                final_factors,
                final_feat,
                head_z,
            },
        ))
    }

    /// Backward pass. `d_output` is dLoss/dLogits (seg, `[H,W,C]`) or
    /// dLoss/dDepth (depth, `[H,W]`). Returns gradients for every parameter
    /// tensor and for the input image.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        trace: &Trace<T>,
        d_output: &Tensor<T>,
    ) -> Result<Gradients<T>> {
        let (h, w) = (trace.h, trace.w);
        let n_px = h * w;
        let k = self.out_channels();
        let c3 = self.channels[3];

        let expected: &[usize] = match self.task {
            Task::Seg => &[h, w, k][..],
            Task::Depth => &[h, w][..],
        };
        if d_output.shape() != expected {
            return Err(Error::shape(
                "backward",
                format!("{expected:?}"),
                format!("{:?}", d_output.shape()),
            ));
        }

        // Through the output nonlinearity.
        let dz: Vec<T> = match self.task {
            Task::Seg => d_output.data().to_vec(),
            Task::Depth => {
                let scale = T::from_f64(DEPTH_HEAD_SCALE);
                d_output
                    .data()
                    .iter()
                    .zip(trace.head_z.iter())
                    .map(|(&g, &z)| g * sigmoid(z) * scale)
                    .collect()
            }
        };

        let mut grads = ParamSet::new();

        // Final projection.
        let head_w = params.get("head.weight")?.data();
        let (dfd, dhw, dhb) = pixel_linear_backward(&trace.final_feat, n_px, c3, head_w, k, &dz);
        grads.insert("head.weight", Tensor::from_vec(&[k, c3], dhw)?);
        grads.insert("head.bias", Tensor::from_vec(&[k], dhb)?);
        let dsrc_final: Vec<T> = match &trace.final_factors {
            Some(f) => dfd.iter().zip(f.iter()).map(|(&g, &m)| g * m).collect(),
            None => dfd,
        };

        // Optional hidden head stage.
        let mut dfeats = dsrc_final;
        if let Some(hidden) = &trace.hidden {
            let dha = dfeats;
            let dhz = silu_backward(&dha, &hidden.z);
            let hidden_w = params.get("head.hidden.weight")?.data();
            let (dhin, dw_h, db_h) = pixel_linear_backward(&hidden.input, n_px, c3, hidden_w, c3, &dhz);
            grads.insert("head.hidden.weight", Tensor::from_vec(&[c3, c3], dw_h)?);
            grads.insert("head.hidden.bias", Tensor::from_vec(&[c3], db_h)?);
            dfeats = match &hidden.factors {
                Some(f) => dhin.iter().zip(f.iter()).map(|(&g, &m)| g * m).collect(),
                None => dhin,
            };
        }

        // Conv blocks, in reverse.
        let names = ["enc1", "enc2", "dec1", "dec2"];
        let strides = [1usize, 2, 1, 1];
        let occ = self.channels;
        let mut dout_block = dfeats; // gradient at dec2 output
        let mut d_input_final = None;
        for bi in (0..4).rev() {
            let tr = &trace.blocks[bi];
            let (wt, gamma, _) = self.block_params(params, names[bi])?;
            let oc = occ[bi];
            let hw_out = tr.out_h * tr.out_w;
            let da = silu_backward(&dout_block, &tr.a);
            let (dconv, dgamma, dbeta) = instance_norm_backward(&da, &tr.norm, gamma, hw_out, oc);
            let (din, dw, _db) =
                conv3x3_backward(&tr.input, tr.in_h, tr.in_w, tr.ic, wt, oc, strides[bi], &dconv);
            grads.insert(format!("{}.weight", names[bi]), Tensor::from_vec(&[oc, 3, 3, tr.ic], dw)?);
            grads.insert(format!("{}.norm.gamma", names[bi]), Tensor::from_vec(&[oc], dgamma)?);
            grads.insert(format!("{}.norm.beta", names[bi]), Tensor::from_vec(&[oc], dbeta)?);
            if bi == 3 {
                // dec2 input came through the upsample from dec1 output.
                let (h2, w2) = trace.up_src;
                dout_block = upsample2_crop_backward(&din, h2, w2, occ[2], h, w);
            } else if bi == 0 {
                d_input_final = Some(din);
            } else {
                dout_block = din;
            }
        }

        let d_input = Tensor::from_vec(&[h, w, 3], d_input_final.expect("enc1 visited"))?;
        Ok(Gradients { params: grads, input: d_input })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w * 3).map(|_| rng.gen_range(0.2..0.8)).collect();
        Tensor::from_vec(&[h, w, 3], data).unwrap()
    }

    #[test]
    fn forward_shape_contract() {
        let arch = Architecture::seg(5);
        let params = arch.init_params::<f32>(1);
        let img = tiny_image(32, 32, 2).cast::<f32>();
        let pred = arch.forward(&params, &img, Dropout::off()).unwrap();
        match pred {
            Prediction::Seg { logits } => assert_eq!(logits.shape(), &[32, 32, 5]),
            _ => panic!("wrong task"),
        }
    }

    #[test]
    fn forward_odd_resolution() {
        let arch = Architecture::seg(3);
        let params = arch.init_params::<f32>(1);
        let img = tiny_image(13, 9, 3).cast::<f32>();
        let pred = arch.forward(&params, &img, Dropout::off()).unwrap();
        assert_eq!(pred.spatial_dims(), (13, 9));
    }

    #[test]
    fn forward_deterministic_under_fixed_seed() {
        let arch = Architecture::seg(4);
        let params = arch.init_params::<f32>(5);
        let img = tiny_image(16, 16, 7).cast::<f32>();
        let a = arch.forward(&params, &img, Dropout::on(99)).unwrap();
        let b = arch.forward(&params, &img, Dropout::on(99)).unwrap();
        assert_eq!(a, b);
        let c = arch.forward(&params, &img, Dropout::on(100)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dropout_rate_zero_equals_dropout_off_bit_exact() {
        let mut arch = Architecture::seg(4);
        arch.dropout_rate = 0.0;
        let params = arch.init_params::<f32>(5);
        let img = tiny_image(12, 12, 7).cast::<f32>();
        let on = arch.forward(&params, &img, Dropout::on(42)).unwrap();
        let off = arch.forward(&params, &img, Dropout::off()).unwrap();
        assert_eq!(on, off);
    }

    #[test]
    fn head_forward_matches_full_forward() {
        let arch = Architecture::seg(5);
        let params = arch.init_params::<f32>(11);
        let img = tiny_image(16, 16, 13).cast::<f32>();
        let trunk = arch.trunk(&params, &img).unwrap();
        for seed in [1u64, 2, 3] {
            let via_head = arch.head_forward(&params, &trunk, Dropout::on(seed)).unwrap();
            let via_full = arch.forward(&params, &img, Dropout::on(seed)).unwrap();
            assert_eq!(via_head, via_full);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let arch = Architecture::seg(5);
        let params = arch.init_params::<f32>(3);
        let img = tiny_image(8, 8, 4).cast::<f32>();
        let pred = arch.forward(&params, &img, Dropout::off()).unwrap();
        let probs = pred.probabilities().unwrap();
        for px in probs.data().chunks(5) {
            let s: f32 = px.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn depth_output_positive() {
        let arch = Architecture::depth();
        let params = arch.init_params::<f32>(3);
        let img = tiny_image(8, 8, 4).cast::<f32>();
        let pred = arch.forward(&params, &img, Dropout::off()).unwrap();
        assert!(pred.depth_map().unwrap().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let arch = Architecture::seg(3);
        let params = arch.init_params::<f32>(1);
        let img = Tensor::<f32>::zeros(&[8, 8, 4]);
        assert!(arch.forward(&params, &img, Dropout::off()).is_err());
    }

    #[test]
    fn rejects_non_finite_input() {
        let arch = Architecture::seg(3);
        let params = arch.init_params::<f32>(1);
        let mut img = Tensor::<f32>::zeros(&[8, 8, 3]);
        img.data_mut()[5] = f32::NAN;
        match arch.forward(&params, &img, Dropout::off()) {
            Err(Error::NonFinite(_)) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn validate_params_catches_mismatch() {
        let arch = Architecture::seg(5);
        let mut params = arch.init_params::<f32>(1);
        arch.validate_params(&params).unwrap();
        params.insert("extra.weight", Tensor::zeros(&[1]));
        assert!(arch.validate_params(&params).is_err());
    }

    /// Central finite differences over every parameter of a tiny model,
    /// float64 — the gradient oracle for the whole backward pass.
    #[test]
    fn full_backward_matches_finite_differences() {
        for seed in [1u64, 2] {
            for task in [Task::Seg, Task::Depth] {
                let mut arch = Architecture::seg(3);
                arch.task = task;
                arch.channels = [4, 6, 6, 4];
                if task == Task::Depth {
                    arch.classes = 1;
                }
                let params = arch.init_params::<f64>(seed);
                let img = tiny_image(6, 5, seed + 10);

                // Scalar loss: weighted sum of outputs (smooth, arbitrary weights).
                let weights = |pred: &Prediction<f64>| -> Vec<f64> {
                    let n = match pred {
                        Prediction::Seg { logits } => logits.len(),
                        Prediction::Depth { depth } => depth.len(),
                    };
                    (0..n).map(|i| ((i % 7) as f64 - 3.0) * 0.37).collect()
                };
                let loss_of = |p: &ParamSet<f64>, im: &Tensor<f64>| -> f64 {
                    let pred = arch.forward(p, im, Dropout::off()).unwrap();
                    let wv = weights(&pred);
                    let data = match &pred {
                        Prediction::Seg { logits } => logits.data(),
                        Prediction::Depth { depth } => depth.data(),
                    };
                    data.iter().zip(wv.iter()).map(|(&v, &w)| v * w).sum()
                };

                let (pred, trace) = arch.forward_with_trace(&params, &img, Dropout::off()).unwrap();
                let wv = weights(&pred);
                let d_out = match &pred {
                    Prediction::Seg { logits } => Tensor::from_vec(logits.shape(), wv.clone()).unwrap(),
                    Prediction::Depth { depth } => Tensor::from_vec(depth.shape(), wv.clone()).unwrap(),
                };
                let grads = arch.backward(&params, &trace, &d_out).unwrap();

                let h = 1e-4;
                let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
                for name in &names {
                    let len = params.get(name).unwrap().len();
                    let stride = (len / 5).max(1);
                    for idx in (0..len).step_by(stride) {
                        let mut pp = params.clone();
                        pp.get_mut(name).unwrap().data_mut()[idx] += h;
                        let mut pm = params.clone();
                        pm.get_mut(name).unwrap().data_mut()[idx] -= h;
                        let fd = (loss_of(&pp, &img) - loss_of(&pm, &img)) / (2.0 * h);
                        let an = grads.params.get(name).unwrap().data()[idx];
                        let denom = fd.abs().max(an.abs()).max(1e-6);
                        assert!(
                            (fd - an).abs() / denom < 1e-4,
                            "{name}[{idx}] fd={fd} analytic={an} (task {task:?})"
                        );
                    }
                }
                // Input gradient spot check.
                for idx in [0usize, 17, 6 * 5 * 3 - 1] {
                    let mut ip = img.clone();
                    ip.data_mut()[idx] += h;
                    let mut im = img.clone();
                    im.data_mut()[idx] -= h;
                    let fd = (loss_of(&params, &ip) - loss_of(&params, &im)) / (2.0 * h);
                    let an = grads.input.data()[idx];
                    let denom = fd.abs().max(an.abs()).max(1e-6);
                    assert!((fd - an).abs() / denom < 1e-4, "input[{idx}] fd={fd} analytic={an}");
                }
            }
        }
    }
}
