//! Adam with persistent moments for both named parameter tensors and sparse
//! prompt entries.

use crate::error::Result;
use crate::model::ParamSet;
use crate::num::Real;
use crate::prompts::PromptState;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state. Moments persist across samples; prompt moments are keyed by
/// pixel, so they survive placement changes.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub hyper: AdamParams,
    t: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    pm: BTreeMap<usize, [T; 3]>,
    pv: BTreeMap<usize, [T; 3]>,
}

impl<T: Real> Adam<T> {
    pub fn new(hyper: AdamParams) -> Self {
        Adam {
            hyper,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            pm: BTreeMap::new(),
            pv: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once per optimization step
    /// before applying tensor/prompt updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.t.max(1) as i32;
        (
            1.0 - self.hyper.beta1.powi(t),
            1.0 - self.hyper.beta2.powi(t),
        )
    }

    /// One Adam update over every tensor passing `filter`.
    pub fn step_params(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &ParamSet<T>,
        filter: impl Fn(&str) -> bool,
        lr: f64,
    ) -> Result<()> {
        let (c1, c2) = self.corrections();
        let b1 = T::from_f64(self.hyper.beta1);
        let ib1 = T::from_f64(1.0 - self.hyper.beta1);
        let b2 = T::from_f64(self.hyper.beta2);
        let ib2 = T::from_f64(1.0 - self.hyper.beta2);
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.hyper.eps);
        let ic1 = T::from_f64(1.0 / c1);
        let ic2 = T::from_f64(1.0 / c2);
        for (name, tensor) in params.iter_mut() {
            if !filter(name) {
                continue;
            }
            let grad = grads.get(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.shape()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            let gd = grad.data();
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = gd[i];
                md[i] = b1 * md[i] + ib1 * g;
                vd[i] = b2 * vd[i] + ib2 * g * g;
                let mhat = md[i] * ic1;
                let vhat = vd[i] * ic2;
                *p -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// One Adam update over the active prompt entries.
    pub fn step_prompts(
        &mut self,
        prompts: &mut PromptState<T>,
        grads: &BTreeMap<usize, [T; 3]>,
        lr: f64,
    ) {
        let (c1, c2) = self.corrections();
        let b1 = T::from_f64(self.hyper.beta1);
        let ib1 = T::from_f64(1.0 - self.hyper.beta1);
        let b2 = T::from_f64(self.hyper.beta2);
        let ib2 = T::from_f64(1.0 - self.hyper.beta2);
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.hyper.eps);
        let ic1 = T::from_f64(1.0 / c1);
        let ic2 = T::from_f64(1.0 / c2);
        for (&px, g3) in grads {
            let m = self.pm.entry(px).or_insert([T::zero(); 3]);
            let v = self.pv.entry(px).or_insert([T::zero(); 3]);
            if let Some(entry) = prompts.entry_mut(px) {
                for ch in 0..3 {
                    let g = g3[ch];
                    m[ch] = b1 * m[ch] + ib1 * g;
                    v[ch] = b2 * v[ch] + ib2 * g * g;
                    let mhat = m[ch] * ic1;
                    let vhat = v[ch] * ic2;
                    entry[ch] -= lr_t * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}
