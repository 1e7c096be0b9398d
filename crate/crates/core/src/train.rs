//! Training loop: clean photometric steps, a degraded contrastive step every
//! `S` steps, queue maintenance and evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distbin::{distribution_of, soft_bin, BinSpec};
use crate::geom::{disparity_to_depth, reconstruction_loss, CameraModel};
use crate::latencyq::{anchor_positive, LatencyQueue, QueueConfig, QueueError, UpdateReason};
use crate::metrics::MetricsRecord;
use crate::model::{DepthNet, ModelError, PARAM_COUNT};
use crate::optim::{Adam, AdamConfig};
use crate::secloss::{
    alpha1, contrastive_loss, contrastive_weight, ContrastiveVariant, LossError, ScheduleConfig, ScheduleState,
    TripletBatch,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::weather::{degrade, extra_augment, AugmentConfig, SceneSample, WeatherKind};

/// Where the negatives' input images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeImages {
    /// The anchor's own degraded image, once per slot.
    SharedAnchor,
    /// A fresh degradation of the same clean image per slot.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub schedule: ScheduleConfig,
    pub queue: QueueConfig,
    pub bins: usize,
    /// Feed degraded images on every `S`-th step.
    pub degraded_steps: bool,
    /// Add the contrastive term on degraded steps.
    pub contrastive: bool,
    pub variant: ContrastiveVariant,
    /// Also add the clean photometric loss on degraded steps.
    pub both_losses: bool,
    pub negative_images: NegativeImages,
    pub severity: (f64, f64),
    pub extra_augment: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            steps_per_epoch: 100,
            batch_size: 1,
            optimizer: AdamConfig::default(),
            schedule: ScheduleConfig::default(),
            queue: QueueConfig::default(),
            bins: 32,
            degraded_steps: true,
            contrastive: true,
            variant: ContrastiveVariant::FULL,
            both_losses: false,
            negative_images: NegativeImages::SharedAnchor,
            severity: (0.5, 1.0),
            extra_augment: false,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: &'static str,
    pub message: String,
}

impl core::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch
    }

    /// Every violated constraint, one entry per field.
    pub fn validate(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut need = |ok: bool, field: &'static str, message: String| {
            if !ok {
                out.push(ConfigIssue { field, message });
            }
        };
        need(self.epochs > 0, "epochs", "must be positive".into());
        need(self.steps_per_epoch > 0, "steps_per_epoch", "must be positive".into());
        need(self.batch_size > 0, "batch_size", "must be positive".into());
        let o = &self.optimizer;
        need(o.lr > 0.0 && o.lr.is_finite(), "optimizer.lr", format!("must be positive, got {}", o.lr));
        need((0.0..1.0).contains(&o.beta1), "optimizer.beta1", format!("must lie in [0, 1), got {}", o.beta1));
        need((0.0..1.0).contains(&o.beta2), "optimizer.beta2", format!("must lie in [0, 1), got {}", o.beta2));
        need(o.eps > 0.0, "optimizer.eps", "must be positive".into());
        let s = &self.schedule;
        for (v, name) in [(s.a, "schedule.a"), (s.c, "schedule.c"), (s.w_s, "schedule.w_s")] {
            need(v > 0.0 && v.is_finite(), name, format!("must be positive, got {v}"));
        }
        // Zero switches the term off, as in the margin and weight sweeps.
        for (v, name) in [(s.alpha2, "schedule.alpha2"), (s.delta, "schedule.delta")] {
            need(v >= 0.0 && v.is_finite(), name, format!("must be non-negative, got {v}"));
        }
        need(s.e_a > 0 && s.e_a < s.e_b, "schedule.e_a", format!("need 0 < e_a < e_b, got {} and {}", s.e_a, s.e_b));
        need(s.negative_step >= 1, "schedule.negative_step", "must be at least 1".into());
        need(
            s.negative_step <= self.steps_per_epoch,
            "schedule.negative_step",
            format!("must not exceed steps_per_epoch ({})", self.steps_per_epoch),
        );
        let q = &self.queue;
        need(q.slots >= 1, "queue.slots", "must be at least 1".into());
        need((0.0..=1.0).contains(&q.omega), "queue.omega", format!("must lie in [0, 1], got {}", q.omega));
        need(q.interval > 0, "queue.interval", "must be positive".into());
        need(self.bins >= 2, "bins", format!("need at least 2, got {}", self.bins));
        let (lo, hi) = self.severity;
        need(0.0 <= lo && lo <= hi && hi <= 1.0, "severity", format!("need 0 <= lo <= hi <= 1, got ({lo}, {hi})"));
        let a = &self.augment;
        need((0.0..=1.0).contains(&a.erase_prob), "augment.erase_prob", "must lie in [0, 1]".into());
        need((0.0..=1.0).contains(&a.blur_prob), "augment.blur_prob", "must lie in [0, 1]".into());
        need(
            0.0 < a.erase_frac.0 && a.erase_frac.0 <= a.erase_frac.1 && a.erase_frac.1 <= 1.0,
            "augment.erase_frac",
            "need 0 < lo <= hi <= 1".into(),
        );
        need(0.0 < a.blur_sigma.0 && a.blur_sigma.0 <= a.blur_sigma.1, "augment.blur_sigma", "need 0 < lo <= hi".into());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid config: {0:?}")]
    Config(Vec<ConfigIssue>),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("sample {index} has no ground truth or mismatched shapes")]
    BadSample { index: usize },
    #[error("non-finite value at step {step}: {source}")]
    NonFinite { step: u64, source: TensorError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Clean,
    Augmented,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Clean => "clean",
            Phase::Augmented => "augmented",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub phase: Phase,
    pub l_ph: f64,
    /// Contrastive loss; zero when the term is off or the step is clean.
    pub l_c: f64,
    pub w: f64,
    pub alpha1: f64,
    pub queue_updates: u64,
    pub update: Option<UpdateReason>,
    pub grad_norm: f64,
}

/// ChaCha8 position, enough to resume the stream exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub step: u64,
    pub params: Vec<f64>,
    pub optimizer: Adam,
    pub queue: LatencyQueue,
    pub rng: RngState,
}

pub struct Trainer {
    config: TrainConfig,
    cam: CameraModel,
    spec: BinSpec,
    net: DepthNet,
    optimizer: Adam,
    queue: LatencyQueue,
    rng: ChaCha8Rng,
    step: u64,
}

/// Seeds derived from the run seed for the independent initial draws.
fn derived_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ salt
}

impl Trainer {
    pub fn new(config: TrainConfig, cam: CameraModel) -> Result<Self, TrainError> {
        let issues = config.validate();
        if !issues.is_empty() {
            return Err(TrainError::Config(issues));
        }
        let net = DepthNet::init(derived_seed(config.seed, 0));
        let queue =
            LatencyQueue::random(&config.queue, (1..=config.queue.slots as u64).map(|k| derived_seed(config.seed, k)))?;
        let optimizer = Adam::new(config.optimizer, PARAM_COUNT);
        let rng = ChaCha8Rng::seed_from_u64(derived_seed(config.seed, u64::MAX));
        let spec = BinSpec::new(config.bins);
        Ok(Self { config, cam, spec, net, optimizer, queue, rng, step: 0 })
    }

    pub fn resume(config: TrainConfig, cam: CameraModel, state: TrainerState) -> Result<Self, TrainError> {
        let mut t = Self::new(config, cam)?;
        t.net = DepthNet::from_params(state.params)?;
        if state.optimizer.m.len() != PARAM_COUNT || state.optimizer.v.len() != PARAM_COUNT {
            return Err(ModelError::ParamCount { expected: PARAM_COUNT, found: state.optimizer.m.len() }.into());
        }
        let fp = crate::model::fingerprint();
        if let Some(s) = state.queue.slots().iter().find(|s| s.fingerprint != fp) {
            return Err(QueueError::FingerprintMismatch { expected: fp, found: s.fingerprint }.into());
        }
        t.optimizer = state.optimizer;
        t.queue = state.queue;
        t.rng = state.rng.restore();
        t.step = state.step;
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            params: self.net.params().to_vec(),
            optimizer: self.optimizer.clone(),
            queue: self.queue.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn camera(&self) -> &CameraModel {
        &self.cam
    }

    pub fn net(&self) -> &DepthNet {
        &self.net
    }

    pub fn queue(&self) -> &LatencyQueue {
        &self.queue
    }

    /// Completed optimizer steps.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    /// Schedule at global step `t` (1-based).
    pub fn schedule_at(&self, t: u64) -> ScheduleState {
        let epoch = (t.max(1) - 1) / self.config.steps_per_epoch;
        ScheduleState::new(self.config.schedule, self.config.total_steps()).at(t, epoch)
    }

    pub fn is_augmented_step(&self, t: u64) -> bool {
        self.config.degraded_steps && t.is_multiple_of(self.config.schedule.negative_step)
    }

    /// Runs global step `steps_done() + 1` on samples drawn from `data`.
    pub fn step(&mut self, data: &[SceneSample]) -> Result<StepReport, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let t = self.step + 1;
        let sched = self.schedule_at(t);
        let augmented = self.is_augmented_step(t);
        let picks: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.gen_range(0..data.len())).collect();
        for &i in &picks {
            check_sample(&data[i], i)?;
        }

        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, true);
        let w = if self.config.contrastive { contrastive_weight(&sched) } else { 0.0 };
        let mut l_ph_total: Option<Var> = None;
        let mut l_c_total: Option<Var> = None;
        let mut trigger: Option<(Tensor, Tensor, Vec<Tensor>)> = None;
        let nf = |source| TrainError::NonFinite { step: t, source };

        for &i in &picks {
            let sample = &data[i];
            let target = tape.constant(sample.target.clone());
            let source = tape.constant(sample.source.clone());
            let mut l_ph;
            if augmented {
                let aug = self.degrade(sample);
                let (d_a, d_p) = anchor_positive(&mut tape, &self.net, &bound, &sample.target, &aug)?;
                l_ph = reconstruction_loss(&mut tape, target, source, d_a, &self.cam).map_err(nf)?;
                if self.config.both_losses {
                    let x = tape.constant(sample.target.clone());
                    let d = DepthNet::forward(&mut tape, &bound, x)?;
                    let extra = reconstruction_loss(&mut tape, target, source, d, &self.cam).map_err(nf)?;
                    l_ph = tape.add(l_ph, extra)?;
                }
                if self.config.contrastive {
                    let negatives = if self.config.variant.uses_negatives() {
                        let images = self.negative_images(sample, &aug);
                        self.queue.generate_negatives(&images, &mut self.rng)?
                    } else {
                        Vec::new()
                    };
                    let l_c = self.contrastive(&mut tape, d_a, d_p, &negatives, &sched)?;
                    l_c_total = Some(accumulate(&mut tape, l_c_total, l_c)?);
                    if trigger.is_none() && !negatives.is_empty() {
                        trigger = Some((tape.value(d_a).clone(), tape.value(d_p).clone(), negatives));
                    }
                }
            } else {
                let x = tape.constant(sample.target.clone());
                let d = DepthNet::forward(&mut tape, &bound, x)?;
                l_ph = reconstruction_loss(&mut tape, target, source, d, &self.cam).map_err(nf)?;
            }
            l_ph_total = Some(accumulate(&mut tape, l_ph_total, l_ph)?);
        }

        let inv = 1.0 / picks.len() as f64;
        let l_ph = tape.mul_scalar(l_ph_total.expect("batch is non-empty"), inv)?;
        let mut total = l_ph;
        let mut l_c_value = 0.0;
        if let Some(lc) = l_c_total {
            let lc = tape.mul_scalar(lc, inv)?;
            l_c_value = tape.value(lc).item();
            let weighted = tape.mul_scalar(lc, w)?;
            total = tape.add(total, weighted)?;
        }
        let l_ph_value = tape.value(l_ph).item();
        tape.backward(total).map_err(nf)?;
        let grad = DepthNet::gradient(&tape, &bound);
        let grad_norm = crate::math::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
        if !grad_norm.is_finite() {
            return Err(nf(TensorError::NonFinite { index: 0, value: grad_norm }));
        }
        self.optimizer.step(self.net.params_mut(), &grad);

        let update = match &trigger {
            Some((a, p, n)) => self.queue.should_update(t, a, p, n)?,
            None => self.queue.interval_due(t).then_some(UpdateReason::Interval),
        };
        if update.is_some() {
            self.queue.ema_update(&self.net.export_snapshot())?;
        }
        self.step = t;
        Ok(StepReport {
            step: t,
            epoch: sched.epoch,
            phase: if augmented { Phase::Augmented } else { Phase::Clean },
            l_ph: l_ph_value,
            l_c: l_c_value,
            w: if augmented { w } else { 0.0 },
            alpha1: alpha1(&sched),
            queue_updates: self.queue.update_count(),
            update,
            grad_norm,
        })
    }

    fn degrade(&mut self, sample: &SceneSample) -> Tensor {
        let kind = WeatherKind::ALL[self.rng.gen_range(0..WeatherKind::ALL.len())];
        let (lo, hi) = self.config.severity;
        let severity = if hi > lo { self.rng.gen_range(lo..=hi) } else { lo };
        let seed: u64 = self.rng.gen();
        let mut s = SceneSample { augmented: None, weather: None, ..sample.clone() };
        degrade(&mut s, kind, severity, seed, &self.cam);
        let aug = s.augmented.expect("degrade sets the augmented image");
        if self.config.extra_augment {
            let seed: u64 = self.rng.gen();
            extra_augment(&aug, &self.config.augment, seed).0
        } else {
            aug
        }
    }

    fn negative_images(&mut self, sample: &SceneSample, anchor: &Tensor) -> Vec<Tensor> {
        let j = self.queue.len();
        match self.config.negative_images {
            NegativeImages::SharedAnchor => alloc::vec![anchor.clone(); j],
            NegativeImages::Independent => (0..j).map(|_| self.degrade(sample)).collect(),
        }
    }

    fn contrastive(
        &self,
        tape: &mut Tape,
        d_a: Var,
        d_p: Var,
        negatives: &[Tensor],
        sched: &ScheduleState,
    ) -> Result<Var, TrainError> {
        let v = &self.config.variant;
        let batch = if v.interval_distribution {
            let anchor = soft_bin(tape, d_a, &self.spec)?;
            let positive = tape.constant(distribution_of(tape.value(d_p), &self.spec)?.to_tensor());
            let negatives = negatives
                .iter()
                .map(|n| Ok(tape.constant(distribution_of(n, &self.spec)?.to_tensor())))
                .collect::<Result<Vec<_>, TensorError>>()?;
            TripletBatch { anchor, positive, negatives }
        } else {
            let negatives = negatives.iter().map(|n| tape.constant(n.clone())).collect();
            TripletBatch { anchor: d_a, positive: d_p, negatives }
        };
        Ok(contrastive_loss(tape, &batch, sched, v)?)
    }
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, v: Var) -> Result<Var, TensorError> {
    match acc {
        Some(a) => tape.add(a, v),
        None => Ok(v),
    }
}

fn check_sample(s: &SceneSample, index: usize) -> Result<(), TrainError> {
    let ts = s.target.shape();
    let ok = ts.len() == 3
        && s.source.shape() == ts
        && s.disparity.shape() == &ts[..2]
        && s.augmented.as_ref().is_none_or(|a| a.shape() == ts);
    if ok {
        Ok(())
    } else {
        Err(TrainError::BadSample { index })
    }
}

/// Which image of each sample the network sees during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalInput {
    Clean,
    /// The degraded image; samples without one are rejected.
    Degraded,
}

/// Per-image metrics on depth from `disparity_to_depth`.
pub fn evaluate_each(
    net: &DepthNet,
    data: &[SceneSample],
    cam: &CameraModel,
    input: EvalInput,
) -> Result<Vec<MetricsRecord>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            check_sample(s, i)?;
            let img = match input {
                EvalInput::Clean => &s.target,
                EvalInput::Degraded => s.augmented.as_ref().ok_or(TrainError::BadSample { index: i })?,
            };
            let pred = disparity_to_depth(&net.predict(img)?, cam).depth;
            let gt = disparity_to_depth(&s.disparity, cam).depth;
            Ok(MetricsRecord::of_image(&pred, &gt)?)
        })
        .collect()
}

/// Metrics averaged per image, then over images. No median scaling.
pub fn evaluate(
    net: &DepthNet,
    data: &[SceneSample],
    cam: &CameraModel,
    input: EvalInput,
) -> Result<MetricsRecord, TrainError> {
    let each = evaluate_each(net, data, cam, input)?;
    Ok(MetricsRecord::mean(&each).expect("non-empty"))
}
