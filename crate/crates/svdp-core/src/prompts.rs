//! Sparse per-pixel visual prompt store and the input warp.
//!
//! Prompt offsets live in a persistent map keyed by pixel index. Re-placing
//! the active mask keeps old values dormant instead of discarding them, so a
//! pixel that loses and later regains a prompt resumes from its learned
//! offset. Only active entries participate in the warp and receive
//! gradients.

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::num::Real;
use crate::placement::PlacementMask;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptState<T> {
    h: usize,
    w: usize,
    rho: f64,
    /// Persistent per-pixel offsets (active and dormant).
    entries: BTreeMap<usize, [T; 3]>,
    active: Vec<bool>,
    active_count: usize,
    /// Step counter, advanced by the adaptation loop.
    pub t: u64,
}

impl<T: Real> PromptState<T> {
    /// Empty state: no pixel is active yet and every entry is zero.
    pub fn new(h: usize, w: usize, rho: f64) -> Result<Self> {
        if !(0.0 < rho && rho <= 1.0) {
            return Err(Error::InvalidInput(format!("density {rho} outside (0, 1]")));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("zero-sized prompt resolution".into()));
        }
        Ok(PromptState {
            h,
            w,
            rho,
            entries: BTreeMap::new(),
            active: vec![false; h * w],
            active_count: 0,
            t: 0,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Prompt pixel budget: round(rho * H * W).
    pub fn budget(&self) -> usize {
        ((self.h * self.w) as f64 * self.rho).round() as usize
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    /// Active (pixel_index, offset) pairs in deterministic order.
    pub fn active_entries(&self) -> impl Iterator<Item = (usize, &[T; 3])> {
        self.entries.iter().filter(|(&px, _)| self.active[px]).map(|(&px, v)| (px, v))
    }

    pub fn entry(&self, px: usize) -> Option<&[T; 3]> {
        self.entries.get(&px)
    }

    pub fn entry_mut(&mut self, px: usize) -> Option<&mut [T; 3]> {
        self.entries.get_mut(&px)
    }

    /// All stored entries (active and dormant), for serialization.
    pub fn stored_entries(&self) -> impl Iterator<Item = (usize, bool, &[T; 3])> {
        self.entries.iter().map(|(&px, v)| (px, self.active[px], v))
    }

    /// L2 norm over active offsets.
    pub fn active_l2(&self) -> f64 {
        self.active_entries()
            .flat_map(|(_, v)| v.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Moves the active set to `mask`. Overlapping pixels keep their values,
    /// fresh pixels start at zero, deactivated pixels stay dormant in the
    /// store.
    pub fn reseat(&mut self, mask: &PlacementMask) -> Result<()> {
        if mask.dims() != (self.h, self.w) {
            return Err(Error::shape(
                "reseat",
                format!("{}x{}", self.h, self.w),
                format!("{}x{}", mask.dims().0, mask.dims().1),
            ));
        }
        let budget = self.budget();
        if mask.k() != budget {
            return Err(Error::InvalidInput(format!(
                "mask cardinality {} does not match budget round(rho*H*W) = {budget}",
                mask.k()
            )));
        }
        for (px, &on) in mask.mask().iter().enumerate() {
            if on {
                self.entries.entry(px).or_insert([T::zero(); 3]);
            }
        }
        self.active.copy_from_slice(mask.mask());
        self.active_count = mask.k();
        Ok(())
    }

    /// True when both states share resolution and the exact active set.
    pub fn same_support(&self, other: &Self) -> bool {
        self.h == other.h && self.w == other.w && self.active == other.active
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().flat_map(|v| v.iter()).all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> PromptState<U> {
        PromptState {
            h: self.h,
            w: self.w,
            rho: self.rho,
            entries: self
                .entries
                .iter()
                .map(|(&px, v)| (px, [U::from_f64(v[0].as_f64()), U::from_f64(v[1].as_f64()), U::from_f64(v[2].as_f64())]))
                .collect(),
            active: self.active.clone(),
            active_count: self.active_count,
            t: self.t,
        }
    }
}

/// Fraction of trainable scalars contributed by active prompts, relative to
/// the model parameter count.
pub fn trainable_fraction<T: Real, U: Real>(prompts: &PromptState<T>, model: &ParamSet<U>) -> f64 {
    (3 * prompts.active_count()) as f64 / model.total_len() as f64
}

/// Adds active prompt offsets to the image and clamps to [0, 1].
pub fn warp<T: Real>(image: &Tensor<T>, prompts: &PromptState<T>) -> Result<Tensor<T>> {
    let (h, w, c) = image.dims3()?;
    if (h, w) != prompts.resolution() || c != 3 {
        return Err(Error::shape(
            "warp",
            format!("{}x{}x3", prompts.resolution().0, prompts.resolution().1),
            format!("{h}x{w}x{c}"),
        ));
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for (px, offset) in prompts.active_entries() {
        for ch in 0..3 {
            let v = data[px * 3 + ch] + offset[ch];
            data[px * 3 + ch] = v.max(T::zero()).min(T::one());
        }
    }
    Ok(out)
}

/// Per-entry gradient pass-through mask of the warp: 1 where the clamp was
/// inactive, 0 where the output saturated at 0 or 1.
///
/// Combined with dLoss/dWarpedImage this yields the prompt gradients; it is
/// an error to ask for them with prompts that did not produce the warp.
pub fn prompt_gradients<T: Real>(
    d_warped: &Tensor<T>,
    image: &Tensor<T>,
    prompts: &PromptState<T>,
) -> Result<BTreeMap<usize, [T; 3]>> {
    let (h, w, _) = image.dims3()?;
    if (h, w) != prompts.resolution() {
        return Err(Error::DetachedPrompt(format!(
            "prompt state is {}x{} but the differentiated input is {h}x{w}",
            prompts.resolution().0,
            prompts.resolution().1
        )));
    }
    if d_warped.shape() != image.shape() {
        return Err(Error::DetachedPrompt(
            "input gradient does not match the warped image shape".into(),
        ));
    }
    let dd = d_warped.data();
    let im = image.data();
    let mut grads = BTreeMap::new();
    for (px, offset) in prompts.active_entries() {
        let mut g = [T::zero(); 3];
        for ch in 0..3 {
            // Inclusive bounds: values sitting exactly on the clamp edge
            // still pass gradient, matching the usual clamp subgradient.
            let pre_clamp = im[px * 3 + ch] + offset[ch];
            if pre_clamp >= T::zero() && pre_clamp <= T::one() {
                g[ch] = dd[px * 3 + ch];
            }
        }
        grads.insert(px, g);
    }
    Ok(grads)
}

// ---- prompt-state file format -------------------------------------------
//
// magic "SVDPPRM1", then LE: h u64, w u64, rho f64, t u64, n u64,
// records of (h u32, w u32, active u8, 3 x f32 offsets).

const PROMPT_MAGIC: &[u8; 8] = b"SVDPPRM1";

pub fn save_prompts(path: &Path, prompts: &PromptState<f32>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(PROMPT_MAGIC);
    let (h, w) = prompts.resolution();
    out.extend_from_slice(&(h as u64).to_le_bytes());
    out.extend_from_slice(&(w as u64).to_le_bytes());
    out.extend_from_slice(&prompts.rho().to_le_bytes());
    out.extend_from_slice(&prompts.t.to_le_bytes());
    let n = prompts.stored_entries().count() as u64;
    out.extend_from_slice(&n.to_le_bytes());
    for (px, active, v) in prompts.stored_entries() {
        out.extend_from_slice(&((px / w) as u32).to_le_bytes());
        out.extend_from_slice(&((px % w) as u32).to_le_bytes());
        out.push(active as u8);
        for ch in 0..3 {
            out.extend_from_slice(&v[ch].to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_prompts(path: &Path) -> Result<PromptState<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 + 8 * 4 + 8 || &bytes[..8] != PROMPT_MAGIC {
        return Err(Error::Format("bad prompt-state file".into()));
    }
    let rd64 = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let h = rd64(8) as usize;
    let w = rd64(16) as usize;
    let rho = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let t = rd64(32);
    let n = rd64(40) as usize;
    let mut state = PromptState::<f32>::new(h, w, rho)?;
    state.t = t;
    let rec = 4 + 4 + 1 + 12;
    if bytes.len() != 48 + n * rec {
        return Err(Error::Format("prompt-state file truncated".into()));
    }
    let mut count = 0usize;
    for i in 0..n {
        let o = 48 + i * rec;
        let hh = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let ww = u32::from_le_bytes(bytes[o + 4..o + 8].try_into().unwrap()) as usize;
        if hh >= h || ww >= w {
            return Err(Error::Format("prompt record out of bounds".into()));
        }
        let active = bytes[o + 8] != 0;
        let mut v = [0f32; 3];
        for ch in 0..3 {
            let p = o + 9 + 4 * ch;
            v[ch] = f32::from_le_bytes(bytes[p..p + 4].try_into().unwrap());
        }
        let px = hh * w + ww;
        state.entries.insert(px, v);
        if active {
            state.active[px] = true;
            count += 1;
        }
    }
    state.active_count = count;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::placement::PlacementMask;

    fn mask_of(h: usize, w: usize, pixels: &[usize]) -> PlacementMask {
        let mut m = vec![false; h * w];
        for &p in pixels {
            m[p] = true;
        }
        PlacementMask::from_parts(m, h, w, pixels.len(), 0.0)
    }

    fn gray(h: usize, w: usize, v: f32) -> Tensor<f32> {
        Tensor::full(&[h, w, 3], v)
    }

    #[test]
    fn zero_prompts_warp_is_identity_bit_exact() {
        let img = gray(4, 4, 0.5);
        let mut p = PromptState::<f32>::new(4, 4, 0.125).unwrap();
        p.reseat(&mask_of(4, 4, &[0, 5])).unwrap();
        let out = warp(&img, &p).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn single_pixel_offset() {
        let img = gray(4, 4, 0.5);
        let mut p = PromptState::<f32>::new(4, 4, 1.0 / 16.0).unwrap();
        let px = 4 + 1; // (1,1)
        p.reseat(&mask_of(4, 4, &[px])).unwrap();
        *p.entry_mut(px).unwrap() = [0.1, 0.1, 0.1];
        let out = warp(&img, &p).unwrap();
        for i in 0..16 {
            for ch in 0..3 {
                let expected = if i == px { 0.6 } else { 0.5 };
                assert!((out.data()[i * 3 + ch] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn warp_clamps_to_unit_range() {
        // clamp oracle: min(max(x, 0), 1)
        let img = gray(2, 2, 0.9);
        let mut p = PromptState::<f32>::new(2, 2, 0.25).unwrap();
        p.reseat(&mask_of(2, 2, &[0])).unwrap();
        *p.entry_mut(0).unwrap() = [0.4, -1.5, 0.0];
        let out = warp(&img, &p).unwrap();
        assert_eq!(out.data()[0], 1.0);
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[2] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn warp_rejects_resolution_mismatch() {
        let img = gray(4, 4, 0.5);
        let p = PromptState::<f32>::new(4, 5, 0.1).unwrap();
        assert!(warp(&img, &p).is_err());
    }

    #[test]
    fn reseat_same_mask_is_noop() {
        let mut p = PromptState::<f32>::new(4, 4, 0.125).unwrap();
        let m = mask_of(4, 4, &[3, 9]);
        p.reseat(&m).unwrap();
        *p.entry_mut(3).unwrap() = [0.2, 0.0, -0.1];
        let before = p.clone();
        p.reseat(&m).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn reseat_disjoint_zero_inits() {
        let mut p = PromptState::<f32>::new(4, 4, 0.125).unwrap();
        p.reseat(&mask_of(4, 4, &[0, 1])).unwrap();
        *p.entry_mut(0).unwrap() = [0.3; 3];
        p.reseat(&mask_of(4, 4, &[10, 11])).unwrap();
        for (_, v) in p.active_entries() {
            assert_eq!(*v, [0.0f32; 3]);
        }
    }

    #[test]
    fn dormant_values_survive_reseat_cycles() {
        // Oracle: an explicit dictionary that never forgets.
        let mut p = PromptState::<f32>::new(4, 4, 0.125).unwrap();
        p.reseat(&mask_of(4, 4, &[2, 7])).unwrap();
        *p.entry_mut(2).unwrap() = [0.25, -0.5, 0.125];
        p.reseat(&mask_of(4, 4, &[7, 12])).unwrap(); // 2 goes dormant
        p.reseat(&mask_of(4, 4, &[2, 7])).unwrap(); // 2 comes back
        assert_eq!(*p.entry(2).unwrap(), [0.25, -0.5, 0.125]);
    }

    #[test]
    fn reseat_rejects_wrong_cardinality() {
        let mut p = PromptState::<f32>::new(4, 4, 0.125).unwrap(); // budget 2
        assert!(p.reseat(&mask_of(4, 4, &[0])).is_err());
        assert!(p.reseat(&mask_of(4, 4, &[0, 1, 2])).is_err());
    }

    #[test]
    fn trainable_fraction_direct_count() {
        use crate::model::Architecture;
        let arch = Architecture::seg(5);
        let params = arch.init_params::<f32>(1);
        let total = params.total_len();
        let mut p = PromptState::<f32>::new(64, 64, 1e-3).unwrap();
        assert_eq!(p.budget(), 4);
        p.reseat(&mask_of(64, 64, &[0, 1, 2, 3])).unwrap();
        let frac = trainable_fraction(&p, &params);
        assert!((frac - 12.0 / total as f64).abs() < 1e-12);
    }

    #[test]
    fn prompt_gradient_identity_jacobian() {
        // Loss = sum of the warped pixel's channels => gradient 1 per channel.
        let img = gray(3, 3, 0.5);
        let mut p = PromptState::<f32>::new(3, 3, 1.0 / 9.0).unwrap();
        p.reseat(&mask_of(3, 3, &[4])).unwrap();
        *p.entry_mut(4).unwrap() = [0.05, 0.0, -0.05];
        let mut d = Tensor::<f32>::zeros(&[3, 3, 3]);
        for ch in 0..3 {
            d.data_mut()[4 * 3 + ch] = 1.0;
        }
        let g = prompt_gradients(&d, &img, &p).unwrap();
        assert_eq!(g[&4], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn prompt_gradient_blocked_by_clamp() {
        let img = gray(2, 2, 0.9);
        let mut p = PromptState::<f32>::new(2, 2, 0.25).unwrap();
        p.reseat(&mask_of(2, 2, &[0])).unwrap();
        *p.entry_mut(0).unwrap() = [0.5, 0.0, 0.0]; // clamps channel 0
        let d = Tensor::<f32>::full(&[2, 2, 3], 1.0);
        let g = prompt_gradients(&d, &img, &p).unwrap();
        assert_eq!(g[&0], [0.0, 1.0, 1.0]);
    }

    #[test]
    fn prompt_gradient_detached_on_mismatch() {
        let img = gray(4, 4, 0.5);
        let p = PromptState::<f32>::new(2, 2, 0.25).unwrap();
        let d = Tensor::<f32>::zeros(&[4, 4, 3]);
        match prompt_gradients(&d, &img, &p) {
            Err(Error::DetachedPrompt(_)) => {}
            other => panic!("expected DetachedPrompt, got {other:?}"),
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.bin");
        let mut p = PromptState::<f32>::new(8, 8, 2.0 / 64.0).unwrap();
        p.reseat(&mask_of(8, 8, &[5, 40])).unwrap();
        *p.entry_mut(5).unwrap() = [0.1, -0.2, 0.3];
        p.reseat(&mask_of(8, 8, &[40, 50])).unwrap(); // 5 dormant
        p.t = 9;
        save_prompts(&path, &p).unwrap();
        let q = load_prompts(&path).unwrap();
        assert_eq!(p, q);
    }
}
