//! TTA / CTTA driver.
//!
//! Per streamed sample, in fixed order: (1) teacher uncertainty on the
//! previous prompts' warp, (2) placement + reseat, (3) warp, (4) teacher
//! pseudo-label, (5) one optimizer step on the consistency loss, (6) DPU
//! blend of the prompt parameters, (7) teacher EMA, (8) teacher prediction
//! for metrics. Ground truth is only ever read by the metric accumulators.

use crate::benchmark::metrics::{ConfusionMatrix, DepthAccum, DepthMetrics, SegMetrics};
use crate::benchmark::DomainStream;
use crate::error::{Error, Result};
use crate::loss::{consistency_loss_grad, entropy_loss_grad, LossNorm, LossReport};
use crate::model::{Architecture, Dropout, ParamSet, Prediction, Task};
use crate::num::mix_seed;
use crate::optim::{Adam, AdamParams};
use crate::placement::{self, PlacementMask};
use crate::prompts::{prompt_gradients, trainable_fraction, warp, PromptState};
use crate::pseudo::{self, PseudoLabel};
use crate::tensor::Tensor;
use crate::uncertainty::{self, UncertaintyMethod, UncertaintyReport};
use crate::updating::{beta_for, dpu_update, DpuConfig, ModelPair};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// One target-domain observation. Ground-truth fields are consumed by the
/// metric accumulators only; the adaptation path sees just the image.
#[derive(Debug, Clone)]
pub struct StreamSample {
    pub image: Tensor<f32>,
    pub domain: String,
    pub gt_labels: Vec<u8>,
    pub gt_depth: Vec<f32>,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Tta,
    Ctta,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Tta => write!(f, "tta"),
            Mode::Ctta => write!(f, "ctta"),
        }
    }
}

/// How prompt blending picks its per-sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// beta = clamp(1 - U(x) * theta, beta_floor, 1).
    Adaptive,
    /// Constant rate.
    Fixed(f64),
    /// No blending: prompts keep their post-gradient values.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    All,
    NormOnly,
    /// Norm affines plus the prediction head: enough capacity to recalibrate
    /// outputs under photometric shift, small enough to resist drift.
    NormHead,
    PromptsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementPolicy {
    /// Top-k by uncertainty (DPP).
    Uncertainty,
    /// Random pixels with the same budget (DPP ablated).
    Random,
    /// Fixed centered patch (dense-prompt baseline).
    FixedPatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// MC-dropout passes.
    pub m: usize,
    /// Prompt density.
    pub rho: f64,
    /// Teacher EMA rate.
    pub alpha: f64,
    /// Uncertainty-to-rate scale in the DPU rule.
    pub theta: f64,
    /// Lower clamp on the DPU blend rate.
    pub beta_floor: f64,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    /// Learning rate for model parameters.
    pub lr: f64,
    /// Prompt learning rate = lr * prompt_lr_scale (input-space offsets need
    /// larger steps than weights; 0 freezes prompts together with lr = 0).
    pub prompt_lr_scale: f64,
    /// Test-time augmentation scale factors.
    pub scales: Vec<f64>,
    pub mode: Mode,
    /// CTTA rounds over the domain sequence (TTA always runs one).
    pub rounds: usize,
    pub seed: u64,
    pub uncertainty_method: UncertaintyMethod,
    /// Re-place prompts every this many samples.
    pub replace_period: usize,
    pub beta_mode: BetaMode,
    pub update_scope: UpdateScope,
    pub loss_norm: LossNorm,
    /// Teacher-student consistency training on/off (off = frozen source).
    pub ts: bool,
    /// Sparse prompts on/off.
    pub svdp: bool,
    /// Uncertainty-ranked placement (off = random placement).
    pub dpp: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            m: 10,
            rho: 1e-3,
            alpha: 0.999,
            theta: 0.01,
            beta_floor: 0.9,
            tau: 0.69,
            lr: 1e-4,
            prompt_lr_scale: 300.0,
            scales: vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0],
            mode: Mode::Ctta,
            rounds: 3,
            seed: 0,
            uncertainty_method: UncertaintyMethod::McDropout,
            replace_period: 1,
            beta_mode: BetaMode::Adaptive,
            update_scope: UpdateScope::All,
            loss_norm: LossNorm::Full,
            ts: true,
            svdp: true,
            dpp: true,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config("m must be >= 2".into()));
        }
        if !(0.0 < self.rho && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho {} outside (0, 1]", self.rho)));
        }
        if !(0.0 < self.alpha && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.lr < 0.0 || self.prompt_lr_scale < 0.0 {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s: &f64| s.is_nan() || s <= 0.0) {
            return Err(Error::Config("scales must be a non-empty positive list".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.replace_period == 0 {
            return Err(Error::Config("replace_period must be >= 1".into()));
        }
        if let BetaMode::Fixed(b) = self.beta_mode {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::Config(format!("fixed beta {b} outside [0, 1]")));
            }
        }
        self.dpu_config().validate()
    }

    pub fn dpu_config(&self) -> DpuConfig {
        DpuConfig {
            theta: self.theta,
            beta_floor: self.beta_floor,
        }
    }

    /// Component grid of the ablation study (1..=6):
    /// Ex1 none, Ex2 TS, Ex3 +SVDP, Ex4 +DPP, Ex5 +DPU, Ex6 all.
    pub fn ablation_preset(&self, ex: usize) -> Result<AdaptationConfig> {
        let mut cfg = self.clone();
        let (ts, svdp, dpp, dpu) = match ex {
            1 => (false, false, false, false),
            2 => (true, false, false, false),
            3 => (true, true, false, false),
            4 => (true, true, true, false),
            5 => (true, true, false, true),
            6 => (true, true, true, true),
            _ => return Err(Error::Config(format!("ablation Ex{ex} outside 1..=6"))),
        };
        cfg.ts = ts;
        cfg.svdp = svdp;
        cfg.dpp = dpp;
        cfg.beta_mode = if dpu { BetaMode::Adaptive } else { BetaMode::Off };
        Ok(cfg)
    }

    fn placement_policy(&self) -> PlacementPolicy {
        if self.dpp {
            PlacementPolicy::Uncertainty
        } else {
            PlacementPolicy::Random
        }
    }
}

/// One JSON-lines record per adaptation step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    pub round: usize,
    pub domain: String,
    pub sample: usize,
    pub image_uncertainty: f64,
    pub beta: f64,
    pub loss: f64,
    pub valid_pixels: usize,
    pub prompt_l2: f64,
    pub teacher_student_l2: f64,
    pub active_prompts: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellMetrics {
    pub round: usize,
    pub domain: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg: Option<SegMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthMetrics>,
}

impl CellMetrics {
    /// Headline number: mIoU for segmentation, delta1 for depth.
    pub fn primary(&self) -> f64 {
        if let Some(s) = &self.seg {
            s.miou
        } else if let Some(d) = &self.depth {
            d.delta1
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub task: Task,
    pub mode: Mode,
    pub rounds: usize,
    pub domains: Vec<String>,
    pub primary_metric: String,
    /// Round-major domain cells.
    pub cells: Vec<CellMetrics>,
    pub round_means: Vec<f64>,
    pub overall_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain_vs_source: Option<f64>,
    pub steps: usize,
    pub skipped_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    pub config: AdaptationConfig,
}

impl RunResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("RunResult serializes")
    }

    pub fn cell(&self, round: usize, domain: &str) -> Option<&CellMetrics> {
        self.cells.iter().find(|c| c.round == round && c.domain == domain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Source,
    EntropyMin,
    DensePrompt,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Baseline::Source),
            "entropy_min" => Ok(Baseline::EntropyMin),
            "dense_prompt" => Ok(Baseline::DensePrompt),
            other => Err(Error::Config(format!(
                "unknown baseline '{other}' (source | entropy_min | dense_prompt)"
            ))),
        }
    }
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Source => "source",
            Baseline::EntropyMin => "entropy_min",
            Baseline::DensePrompt => "dense_prompt",
        }
    }
}

/// Sequential adaptation state machine for one stream.
pub struct Engine {
    arch: Architecture,
    pair: ModelPair<f32>,
    prompts: PromptState<f32>,
    opt: Adam<f32>,
    cfg: AdaptationConfig,
    policy: PlacementPolicy,
    patch: Option<PlacementMask>,
    placement_rng: ChaCha8Rng,
    t: u64,
}

impl Engine {
    pub fn new(
        arch: Architecture,
        source: &ParamSet<f32>,
        h: usize,
        w: usize,
        cfg: AdaptationConfig,
        policy: PlacementPolicy,
    ) -> Result<Self> {
        cfg.validate()?;
        arch.validate_config()?;
        arch.validate_params(source)
            .map_err(|e| Error::Config(format!("checkpoint does not match architecture: {e}")))?;
        if !source.all_finite() {
            return Err(Error::NonFinite("source checkpoint".into()));
        }
        let prompts = PromptState::new(h, w, cfg.rho)?;
        if cfg.svdp {
            // Fail configurations whose budget rounds to zero pixels up front.
            placement::budget(h, w, cfg.rho)?;
        }
        let patch = if policy == PlacementPolicy::FixedPatch {
            Some(placement::patch_mask(h, w, cfg.rho)?)
        } else {
            None
        };
        Ok(Engine {
            pair: ModelPair::from_source(source.clone(), cfg.alpha)?,
            prompts,
            opt: Adam::new(AdamParams::default()),
            placement_rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xD00D)),
            arch,
            cfg,
            policy,
            patch,
            t: 0,
        })
    }

    pub fn prompts(&self) -> &PromptState<f32> {
        &self.prompts
    }

    pub fn pair(&self) -> &ModelPair<f32> {
        &self.pair
    }

    /// Fraction of trainable scalars held by active prompts.
    pub fn prompt_fraction(&self) -> f64 {
        trainable_fraction(&self.prompts, &self.pair.student)
    }

    fn maybe_warp(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        if self.cfg.svdp {
            warp(image, &self.prompts)
        } else {
            Ok(image.clone())
        }
    }

    fn uncertainty(&self, image: &Tensor<f32>) -> Result<UncertaintyReport<f32>> {
        let seed = mix_seed(self.cfg.seed ^ 0xA5A5_A5A5, self.t);
        match self.cfg.uncertainty_method {
            UncertaintyMethod::McDropout => {
                uncertainty::mc_dropout(&self.arch, &self.pair.teacher, image, self.cfg.m, seed)
            }
            UncertaintyMethod::ResolutionAug => {
                uncertainty::resolution_aug(&self.arch, &self.pair.teacher, image, &self.cfg.scales)
            }
        }
    }

    /// Runs the full per-sample pipeline and returns the teacher prediction
    /// (for metrics) plus the step record.
    pub fn process_sample(&mut self, image: &Tensor<f32>) -> Result<(Prediction<f32>, StepRecord)> {
        self.t += 1;
        self.prompts.t = self.t;
        let cfg = self.cfg.clone();
        let adapting = cfg.ts;

        // (1) uncertainty on the previous prompts' warp (teacher weights).
        let report = if adapting && (cfg.svdp || matches!(cfg.beta_mode, BetaMode::Adaptive)) {
            let prev_warp = self.maybe_warp(image)?;
            Some(self.uncertainty(&prev_warp)?)
        } else {
            None
        };
        let image_u = report.as_ref().map(|r| r.image_value as f64).unwrap_or(0.0);

        // (2) placement + reseat.
        if adapting && cfg.svdp && (self.t - 1).is_multiple_of(cfg.replace_period as u64) {
            let (h, w) = self.prompts.resolution();
            let mask = match self.policy {
                PlacementPolicy::Uncertainty => {
                    placement::place(report.as_ref().expect("uncertainty computed"), cfg.rho)?
                }
                PlacementPolicy::Random => placement::random_mask(h, w, cfg.rho, &mut self.placement_rng)?,
                PlacementPolicy::FixedPatch => self.patch.clone().expect("patch prepared"),
            };
            self.prompts.reseat(&mask)?;
        }

        // (3) warp with the current prompts.
        let warped = self.maybe_warp(image)?;

        // (4)-(6) pseudo-label, optimizer step, prompt blend.
        let mut loss_report = LossReport {
            value: 0.0,
            valid_pixel_count: 0,
            per_class: Vec::new(),
        };
        let mut beta_used = 0.0;
        let mut skipped = false;
        if adapting {
            let pseudo = pseudo::generate(&self.arch, &self.pair.teacher, &warped, &cfg.scales, cfg.tau)?;
            let dpu_on = cfg.svdp && !matches!(cfg.beta_mode, BetaMode::Off);
            let old_prompts = dpu_on.then(|| self.prompts.clone());
            let stepped = self.adapt_step(image, &warped, &pseudo, &mut loss_report)?;
            skipped = !stepped;

            if dpu_on {
                let beta = match cfg.beta_mode {
                    BetaMode::Adaptive => beta_for(image_u, &cfg.dpu_config())?,
                    BetaMode::Fixed(b) => b,
                    BetaMode::Off => unreachable!(),
                };
                beta_used = beta;
                self.prompts = dpu_update(&old_prompts.expect("snapshot taken"), &self.prompts, beta)?;
            }

            // (7) teacher EMA.
            self.pair.ema_teacher()?;
        }

        // (8) teacher prediction on the final warp.
        let final_warp = self.maybe_warp(image)?;
        let pred = self.arch.forward(&self.pair.teacher, &final_warp, Dropout::off())?;

        let record = StepRecord {
            t: self.t,
            round: 0,
            domain: String::new(),
            sample: 0,
            image_uncertainty: image_u,
            beta: beta_used,
            loss: loss_report.value,
            valid_pixels: loss_report.valid_pixel_count,
            prompt_l2: self.prompts.active_l2(),
            teacher_student_l2: self.pair.teacher_student_l2(),
            active_prompts: self.prompts.active_count(),
            skipped,
        };
        Ok((pred, record))
    }

    /// One Adam step over {student params in scope} and the active prompt
    /// entries. Returns false when the step was skipped (no valid pixels or
    /// a non-finite loss).
    fn adapt_step(
        &mut self,
        image: &Tensor<f32>,
        warped: &Tensor<f32>,
        pseudo: &PseudoLabel<f32>,
        out_report: &mut LossReport,
    ) -> Result<bool> {
        let (pred, trace) = self
            .arch
            .forward_with_trace(&self.pair.student, warped, Dropout::off())?;
        let (report, d_out) = consistency_loss_grad(&pred, pseudo, self.cfg.loss_norm)?;
        let finite = report.value.is_finite();
        let degenerate = report.valid_pixel_count == 0;
        *out_report = report;
        if !finite || degenerate {
            return Ok(false);
        }
        let grads = self.arch.backward(&self.pair.student, &trace, &d_out)?;
        self.opt.begin_step();
        let scope = self.cfg.update_scope;
        let filter = move |name: &str| match scope {
            UpdateScope::All => true,
            UpdateScope::NormOnly => name.contains(".norm."),
            UpdateScope::NormHead => name.contains(".norm.") || name.starts_with("head."),
            UpdateScope::PromptsOnly => false,
        };
        self.opt
            .step_params(&mut self.pair.student, &grads.params, filter, self.cfg.lr)?;
        if self.cfg.svdp {
            let pgrads = prompt_gradients(&grads.input, image, &self.prompts)?;
            self.opt
                .step_prompts(&mut self.prompts, &pgrads, self.cfg.lr * self.cfg.prompt_lr_scale);
        }
        Ok(true)
    }
}

fn stream_dims(streams: &[DomainStream]) -> Result<(usize, usize)> {
    let first = streams
        .iter()
        .flat_map(|s| s.samples.first())
        .next()
        .ok_or_else(|| Error::Config("empty target stream".into()))?;
    let (h, w, _) = first.image.dims3()?;
    for s in streams {
        if s.samples.is_empty() {
            return Err(Error::Config(format!(
                "domain '{}' truncated: no samples",
                s.kind.name()
            )));
        }
        for sample in &s.samples {
            let (sh, sw, _) = sample.image.dims3()?;
            if (sh, sw) != (h, w) {
                return Err(Error::shape("stream", format!("{h}x{w}"), format!("{sh}x{sw}")));
            }
        }
    }
    Ok((h, w))
}

struct CellAccum {
    cm: Option<ConfusionMatrix>,
    da: Option<DepthAccum>,
}

impl CellAccum {
    fn new(task: Task, classes: usize) -> Self {
        match task {
            Task::Seg => CellAccum {
                cm: Some(ConfusionMatrix::new(classes)),
                da: None,
            },
            Task::Depth => CellAccum {
                cm: None,
                da: Some(DepthAccum::new()),
            },
        }
    }

    fn add(&mut self, pred: &Prediction<f32>, sample: &StreamSample) -> Result<()> {
        if let Some(cm) = &mut self.cm {
            cm.add(&pred.labels()?, &sample.gt_labels)?;
        }
        if let Some(da) = &mut self.da {
            da.add(pred.depth_map()?.data(), &sample.gt_depth)?;
        }
        Ok(())
    }

    fn finish(self, round: usize, domain: String) -> CellMetrics {
        CellMetrics {
            round,
            domain,
            seg: self.cm.map(|c| c.metrics()),
            depth: self.da.map(|d| d.metrics()),
        }
    }
}

fn assemble_result(
    arch: &Architecture,
    cfg: &AdaptationConfig,
    rounds: usize,
    domains: Vec<String>,
    cells: Vec<CellMetrics>,
    steps: usize,
    skipped: usize,
    baseline: Option<String>,
) -> RunResult {
    let nd = domains.len();
    let round_means: Vec<f64> = (0..rounds)
        .map(|r| cells[r * nd..(r + 1) * nd].iter().map(|c| c.primary()).sum::<f64>() / nd as f64)
        .collect();
    let overall_mean = round_means.iter().sum::<f64>() / rounds as f64;
    RunResult {
        task: arch.task,
        mode: cfg.mode,
        rounds,
        domains,
        primary_metric: match arch.task {
            Task::Seg => "miou".into(),
            Task::Depth => "delta1".into(),
        },
        cells,
        round_means,
        overall_mean,
        gain_vs_source: None,
        steps,
        skipped_steps: skipped,
        baseline,
        config: cfg.clone(),
    }
}

fn run_with_policy(
    arch: &Architecture,
    source: &ParamSet<f32>,
    streams: &[DomainStream],
    cfg: &AdaptationConfig,
    policy: PlacementPolicy,
    baseline: Option<String>,
    mut step_log: Option<&mut dyn Write>,
) -> Result<RunResult> {
    let (h, w) = stream_dims(streams)?;
    let rounds = match cfg.mode {
        Mode::Tta => 1,
        Mode::Ctta => cfg.rounds,
    };
    let domains: Vec<String> = streams.iter().map(|s| s.kind.name().to_string()).collect();
    let mut cells = Vec::new();
    let mut steps = 0usize;
    let mut skipped = 0usize;

    let emit = |record: &StepRecord, log: &mut Option<&mut dyn Write>| -> Result<()> {
        if let Some(wr) = log.as_deref_mut() {
            let line = serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(wr, "{line}")?;
        }
        Ok(())
    };

    match cfg.mode {
        Mode::Tta => {
            // Independent adaptation per domain, fresh engine each time.
            for stream in streams {
                let mut engine = Engine::new(arch.clone(), source, h, w, cfg.clone(), policy)?;
                let mut accum = CellAccum::new(arch.task, arch.classes);
                for sample in &stream.samples {
                    let (pred, mut record) = engine.process_sample(&sample.image)?;
                    record.round = 0;
                    record.domain = stream.kind.name().to_string();
                    record.sample = sample.index;
                    emit(&record, &mut step_log)?;
                    steps += 1;
                    skipped += record.skipped as usize;
                    accum.add(&pred, sample)?;
                }
                cells.push(accum.finish(0, stream.kind.name().to_string()));
            }
        }
        Mode::Ctta => {
            // One continually-updated engine across rounds x domains.
            let mut engine = Engine::new(arch.clone(), source, h, w, cfg.clone(), policy)?;
            for round in 0..rounds {
                for stream in streams {
                    let mut accum = CellAccum::new(arch.task, arch.classes);
                    for sample in &stream.samples {
                        let (pred, mut record) = engine.process_sample(&sample.image)?;
                        record.round = round;
                        record.domain = stream.kind.name().to_string();
                        record.sample = sample.index;
                        emit(&record, &mut step_log)?;
                        steps += 1;
                        skipped += record.skipped as usize;
                        accum.add(&pred, sample)?;
                    }
                    cells.push(accum.finish(round, stream.kind.name().to_string()));
                }
            }
        }
    }

    Ok(assemble_result(arch, cfg, rounds, domains, cells, steps, skipped, baseline))
}

/// Full SVDP adaptation run.
pub fn run(
    arch: &Architecture,
    source: &ParamSet<f32>,
    streams: &[DomainStream],
    cfg: &AdaptationConfig,
    step_log: Option<&mut dyn Write>,
) -> Result<RunResult> {
    run_with_policy(arch, source, streams, cfg, cfg.placement_policy(), None, step_log)
}

/// Simplified reference baselines.
pub fn run_baseline(
    arch: &Architecture,
    source: &ParamSet<f32>,
    streams: &[DomainStream],
    cfg: &AdaptationConfig,
    baseline: Baseline,
    step_log: Option<&mut dyn Write>,
) -> Result<RunResult> {
    match baseline {
        Baseline::Source => {
            let mut frozen = cfg.clone();
            frozen.ts = false;
            frozen.svdp = false;
            run_with_policy(
                arch,
                source,
                streams,
                &frozen,
                PlacementPolicy::Random,
                Some(baseline.name().into()),
                step_log,
            )
        }
        Baseline::DensePrompt => {
            let mut dense = cfg.clone();
            dense.ts = true;
            dense.svdp = true;
            dense.dpp = false;
            dense.beta_mode = BetaMode::Off;
            // The patch never moves, so re-placement is a no-op either way.
            run_with_policy(
                arch,
                source,
                streams,
                &dense,
                PlacementPolicy::FixedPatch,
                Some(baseline.name().into()),
                step_log,
            )
        }
        Baseline::EntropyMin => run_entropy_min(arch, source, streams, cfg, step_log),
    }
}

/// TENT-style baseline: per-sample entropy minimization on the norm-layer
/// affine parameters, prediction from the adapted student.
fn run_entropy_min(
    arch: &Architecture,
    source: &ParamSet<f32>,
    streams: &[DomainStream],
    cfg: &AdaptationConfig,
    mut step_log: Option<&mut dyn Write>,
) -> Result<RunResult> {
    if arch.task != Task::Seg {
        return Err(Error::Config(
            "entropy_min baseline is defined for segmentation only".into(),
        ));
    }
    cfg.validate()?;
    arch.validate_params(source)
        .map_err(|e| Error::Config(format!("checkpoint does not match architecture: {e}")))?;
    stream_dims(streams)?;
    let rounds = match cfg.mode {
        Mode::Tta => 1,
        Mode::Ctta => cfg.rounds,
    };
    let domains: Vec<String> = streams.iter().map(|s| s.kind.name().to_string()).collect();

    let mut params = source.clone();
    let mut opt = Adam::new(AdamParams::default());
    let mut cells = Vec::new();
    let mut steps = 0usize;
    let mut t = 0u64;

    let adapt_domain = |params: &mut ParamSet<f32>,
                            opt: &mut Adam<f32>,
                            stream: &DomainStream,
                            round: usize,
                            t: &mut u64,
                            step_log: &mut Option<&mut dyn Write>|
     -> Result<CellMetrics> {
        let mut accum = CellAccum::new(arch.task, arch.classes);
        for sample in &stream.samples {
            *t += 1;
            let (pred, trace) = arch.forward_with_trace(params, &sample.image, Dropout::off())?;
            let (h_val, d_out) = entropy_loss_grad(&pred)?;
            let grads = arch.backward(params, &trace, &d_out)?;
            opt.begin_step();
            opt.step_params(params, &grads.params, |n| n.contains(".norm."), cfg.lr)?;
            let adapted = arch.forward(params, &sample.image, Dropout::off())?;
            if let Some(wr) = step_log.as_deref_mut() {
                let record = StepRecord {
                    t: *t,
                    round,
                    domain: stream.kind.name().to_string(),
                    sample: sample.index,
                    image_uncertainty: 0.0,
                    beta: 0.0,
                    loss: h_val,
                    valid_pixels: sample.gt_labels.len(),
                    prompt_l2: 0.0,
                    teacher_student_l2: 0.0,
                    active_prompts: 0,
                    skipped: false,
                };
                let line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(wr, "{line}")?;
            }
            accum.add(&adapted, sample)?;
        }
        Ok(accum.finish(round, stream.kind.name().to_string()))
    };

    match cfg.mode {
        Mode::Tta => {
            for stream in streams {
                let mut fresh = source.clone();
                let mut fresh_opt = Adam::new(AdamParams::default());
                let cell = adapt_domain(&mut fresh, &mut fresh_opt, stream, 0, &mut t, &mut step_log)?;
                steps += stream.samples.len();
                cells.push(cell);
            }
        }
        Mode::Ctta => {
            for round in 0..rounds {
                for stream in streams {
                    let cell = adapt_domain(&mut params, &mut opt, stream, round, &mut t, &mut step_log)?;
                    steps += stream.samples.len();
                    cells.push(cell);
                }
            }
        }
    }

    Ok(assemble_result(
        arch,
        cfg,
        rounds,
        domains,
        cells,
        steps,
        0,
        Some(Baseline::EntropyMin.name().into()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{generate_corpus, CorpusParams, NUM_CLASSES};

    fn small_setup() -> (Architecture, ParamSet<f32>, Vec<DomainStream>) {
        let corpus = generate_corpus(&CorpusParams {
            seed: 40,
            size: 24,
            n_source: 2,
            n_per_domain: 2,
            ..Default::default()
        });
        let arch = Architecture::seg(NUM_CLASSES);
        let params = arch.init_params::<f32>(3);
        (arch, params, corpus.targets)
    }

    fn fast_cfg() -> AdaptationConfig {
        AdaptationConfig {
            m: 2,
            rho: 4.0 / (24.0 * 24.0),
            scales: vec![0.5, 1.0],
            rounds: 2,
            ..Default::default()
        }
    }

    #[test]
    fn counting_oracle_ctta_steps() {
        let (arch, params, streams) = small_setup();
        let cfg = fast_cfg();
        let mut log = Vec::new();
        let result = run(&arch, &params, &streams, &cfg, Some(&mut log)).unwrap();
        // 4 domains x 2 rounds x 2 samples.
        assert_eq!(result.steps, 16);
        assert_eq!(result.cells.len(), 8);
        let lines = String::from_utf8(log).unwrap();
        assert_eq!(lines.lines().count(), 16);
    }

    #[test]
    fn tta_mode_runs_single_round_per_domain() {
        let (arch, params, streams) = small_setup();
        let mut cfg = fast_cfg();
        cfg.mode = Mode::Tta;
        let result = run(&arch, &params, &streams, &cfg, None).unwrap();
        assert_eq!(result.rounds, 1);
        assert_eq!(result.cells.len(), 4);
        assert_eq!(result.steps, 8);
    }

    #[test]
    fn deterministic_run_results_bit_identical() {
        let (arch, params, streams) = small_setup();
        let cfg = fast_cfg();
        let a = run(&arch, &params, &streams, &cfg, None).unwrap();
        let b = run(&arch, &params, &streams, &cfg, None).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn degenerate_knobs_reproduce_source_baseline_bit_exact() {
        let (arch, params, streams) = small_setup();
        let mut cfg = fast_cfg();
        cfg.lr = 0.0;
        cfg.alpha = 1.0;
        cfg.beta_mode = BetaMode::Fixed(1.0);
        let pipeline = run(&arch, &params, &streams, &cfg, None).unwrap();
        let source = run_baseline(&arch, &params, &streams, &cfg, Baseline::Source, None).unwrap();
        for (a, b) in pipeline.cells.iter().zip(source.cells.iter()) {
            assert_eq!(a.seg, b.seg);
        }
        assert_eq!(pipeline.overall_mean, source.overall_mean);
    }

    #[test]
    fn source_baseline_is_stateless() {
        let (arch, params, streams) = small_setup();
        let cfg = fast_cfg();
        let a = run_baseline(&arch, &params, &streams, &cfg, Baseline::Source, None).unwrap();
        let b = run_baseline(&arch, &params, &streams, &cfg, Baseline::Source, None).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        // Every round sees identical metrics: nothing drifts.
        let first = &a.cells[..a.domains.len()];
        let second = &a.cells[a.domains.len()..];
        for (x, y) in first.iter().zip(second.iter()) {
            assert_eq!(x.seg, y.seg);
        }
    }

    #[test]
    fn sparsity_budget_holds_at_every_step() {
        let (arch, params, streams) = small_setup();
        let mut cfg = fast_cfg();
        cfg.rho = 6.0 / (24.0 * 24.0);
        let (h, w) = (24, 24);
        let mut engine = Engine::new(arch.clone(), &params, h, w, cfg.clone(), PlacementPolicy::Uncertainty).unwrap();
        let budget = ((h * w) as f64 * cfg.rho).round() as usize;
        for stream in &streams {
            for s in &stream.samples {
                engine.process_sample(&s.image).unwrap();
                assert_eq!(engine.prompts().active_count(), budget);
            }
        }
    }

    #[test]
    fn dense_prompt_budget_matches_svdp() {
        let (arch, params, streams) = small_setup();
        let cfg = fast_cfg();
        let mut log = Vec::new();
        let _ = run_baseline(&arch, &params, &streams, &cfg, Baseline::DensePrompt, Some(&mut log)).unwrap();
        let line = String::from_utf8(log).unwrap();
        let rec: StepRecord = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(rec.active_prompts, 4);
    }

    #[test]
    fn entropy_min_rejected_for_depth() {
        let corpus = generate_corpus(&CorpusParams {
            seed: 41,
            size: 16,
            n_source: 1,
            n_per_domain: 1,
            ..Default::default()
        });
        let arch = Architecture::depth();
        let params = arch.init_params::<f32>(3);
        let cfg = fast_cfg();
        assert!(matches!(
            run_baseline(&arch, &params, &corpus.targets, &cfg, Baseline::EntropyMin, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_architecture_mismatch_is_startup_error() {
        let (_, _, streams) = small_setup();
        let arch = Architecture::seg(NUM_CLASSES);
        let wrong = Architecture::seg(3).init_params::<f32>(1);
        let cfg = fast_cfg();
        assert!(matches!(
            run(&arch, &wrong, &streams, &cfg, None),
            Err(Error::Config(_))
        ));
    }
}
