//! EMA machinery: teacher-from-student weight averaging and the
//! uncertainty-scaled prompt blend (DPU).

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::num::Real;
use crate::prompts::PromptState;

/// Student and its EMA teacher. At construction both equal the source
/// checkpoint.
#[derive(Debug, Clone)]
pub struct ModelPair<T> {
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    /// Teacher EMA rate.
    pub alpha: f64,
}

impl<T: Real> ModelPair<T> {
    pub fn from_source(source: ParamSet<T>, alpha: f64) -> Result<Self> {
        if !(0.0 < alpha && alpha <= 1.0) {
            return Err(Error::InvalidInput(format!("alpha {alpha} outside (0, 1]")));
        }
        Ok(ModelPair {
            teacher: source.clone(),
            student: source,
            alpha,
        })
    }

    /// teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
    /// Never touches the student.
    pub fn ema_teacher(&mut self) -> Result<()> {
        self.teacher.same_structure(&self.student)?;
        let a = T::from_f64(self.alpha);
        let b = T::from_f64(1.0 - self.alpha);
        for ((_, t), (_, s)) in self.teacher.iter_mut().zip(self.student.iter()) {
            for (tv, sv) in t.data_mut().iter_mut().zip(s.data().iter()) {
                *tv = a * *tv + b * *sv;
            }
        }
        Ok(())
    }

    pub fn teacher_student_l2(&self) -> f64 {
        self.teacher.l2_distance(&self.student)
    }
}

/// DPU hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct DpuConfig {
    /// Scales image uncertainty into EMA-rate units.
    pub theta: f64,
    /// Lower clamp for the blend rate.
    pub beta_floor: f64,
}

impl Default for DpuConfig {
    fn default() -> Self {
        DpuConfig { theta: 0.01, beta_floor: 0.9 }
    }
}

impl DpuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta <= 0.0 {
            return Err(Error::Config(format!("theta {} must be positive", self.theta)));
        }
        if !(0.0..1.0).contains(&self.beta_floor) {
            return Err(Error::Config(format!("beta_floor {} outside [0, 1)", self.beta_floor)));
        }
        Ok(())
    }
}

/// Per-sample prompt EMA rate: clamp(1 - U(x) * theta, beta_floor, 1).
pub fn beta_for(image_uncertainty: f64, cfg: &DpuConfig) -> Result<f64> {
    if !image_uncertainty.is_finite() || image_uncertainty < 0.0 {
        return Err(Error::InvalidInput(format!(
            "image uncertainty {image_uncertainty} must be finite and nonnegative"
        )));
    }
    Ok((1.0 - image_uncertainty * cfg.theta).clamp(cfg.beta_floor, 1.0))
}

/// Blends pre-step and post-step prompt values on the active set:
/// `beta * old + (1 - beta) * updated`. Dormant entries pass through.
pub fn dpu_update<T: Real>(
    old: &PromptState<T>,
    updated: &PromptState<T>,
    beta: f64,
) -> Result<PromptState<T>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidInput(format!("beta {beta} outside [0, 1]")));
    }
    if !old.same_support(updated) {
        return Err(Error::Structural(
            "dpu_update: prompt states differ in resolution or active mask".into(),
        ));
    }
    let b = T::from_f64(beta);
    let ib = T::from_f64(1.0 - beta);
    let mut out = updated.clone();
    for (px, old_v) in old.active_entries() {
        let v = out.entry_mut(px).expect("active entry exists");
        for ch in 0..3 {
            v[ch] = b * old_v[ch] + ib * v[ch];
        }
    }
    Ok(out)
}
