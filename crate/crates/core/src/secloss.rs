//! Snapshot-contrastive loss and its schedules.
//!
//! ```text
//! L_c = d(A, P) + 1/M * sum_k [ delta * D1_k + d(A, N_k) * D2_k ]
//! Di_k = max(alpha_i - d(A, N_k), 0)
//! ```
//!
//! `d` is the Jensen-Shannon divergence between binned distributions, or a
//! mean absolute disparity difference for the pixel-alignment ablation arm.
//! Only the anchor carries gradients.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distbin::js_divergence;
use crate::math;
use crate::tensor::{Tape, TensorError, Var};

/// Decay rate of the exponential margin schedule.
pub const ALPHA1_DECAY_RATE: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("triplet has no negatives")]
    NoNegatives,
    #[error("anchor, positive and negatives must share one shape")]
    ShapeMismatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alpha1Decay {
    Exponential,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub a: f64,
    pub c: f64,
    pub alpha2: f64,
    pub delta: f64,
    pub w_s: f64,
    pub e_a: u64,
    pub e_b: u64,
    /// One augmented step every `negative_step` steps.
    pub negative_step: u64,
    pub alpha1_decay: Alpha1Decay,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            a: 0.05,
            c: 0.001,
            alpha2: 0.005,
            delta: 1e-4,
            w_s: 0.01,
            e_a: 5,
            e_b: 15,
            negative_step: 5,
            alpha1_decay: Alpha1Decay::Exponential,
        }
    }
}

/// Snapshot of the schedule counters for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub step: u64,
    pub total_steps: u64,
    pub epoch: u64,
    pub config: ScheduleConfig,
}

impl ScheduleState {
    pub fn new(config: ScheduleConfig, total_steps: u64) -> Self {
        Self { step: 0, total_steps, epoch: 0, config }
    }

    pub fn at(mut self, step: u64, epoch: u64) -> Self {
        self.step = step;
        self.epoch = epoch;
        self
    }
}

/// Margin between anchor and negatives, decaying with the global step.
pub fn alpha1(s: &ScheduleState) -> f64 {
    let frac = s.step as f64 / s.total_steps.max(1) as f64;
    let c = &s.config;
    match c.alpha1_decay {
        Alpha1Decay::Exponential => c.a * math::exp(-ALPHA1_DECAY_RATE * frac) + c.c,
        Alpha1Decay::Linear => c.a * (1.0 - frac) + c.c,
    }
}

/// Contrastive weight ramp over epochs.
///
/// Applied literally: for `e <= e_b` the ramp branch holds, so the value at
/// `e_b` (0.11 with defaults) exceeds the plateau after it (0.1).
pub fn contrastive_weight(s: &ScheduleState) -> f64 {
    let c = &s.config;
    if s.epoch <= c.e_b {
        c.w_s * (1.0 + s.epoch.saturating_sub(c.e_a) as f64)
    } else {
        c.w_s * (c.e_b as f64 - c.e_a as f64)
    }
}

pub fn margin_hinge(divergence: f64, alpha: f64) -> f64 {
    (alpha - divergence).max(0.0)
}

/// Which terms of the contrastive objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveVariant {
    /// Compare binned distributions (JS) instead of raw disparity maps (L1).
    pub interval_distribution: bool,
    pub delta1: bool,
    pub delta2: bool,
}

impl ContrastiveVariant {
    pub const FULL: Self = Self { interval_distribution: true, delta1: true, delta2: true };

    pub fn uses_negatives(&self) -> bool {
        self.delta1 || self.delta2
    }
}

impl Default for ContrastiveVariant {
    fn default() -> Self {
        Self::FULL
    }
}

/// Anchor, positive and negative representations recorded on one tape:
/// distributions when the interval constraint is on, disparity maps
/// otherwise.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub anchor: Var,
    pub positive: Var,
    pub negatives: Vec<Var>,
}

fn distance(tape: &mut Tape, a: Var, b: Var, distribution: bool) -> Result<Var, TensorError> {
    if distribution {
        js_divergence(tape, a, b)
    } else {
        let d = tape.sub(a, b)?;
        let d = tape.abs(d)?;
        tape.mean_all(d)
    }
}

/// Margin terms of the objective given already computed distances.
pub fn combine(
    tape: &mut Tape,
    anchor_positive: Var,
    anchor_negatives: &[Var],
    alpha1: f64,
    sched: &ScheduleConfig,
    variant: &ContrastiveVariant,
) -> Result<Var, LossError> {
    if !variant.uses_negatives() {
        return Ok(anchor_positive);
    }
    if anchor_negatives.is_empty() {
        return Err(LossError::NoNegatives);
    }
    let mut total: Option<Var> = None;
    for &dn in anchor_negatives {
        let mut term: Option<Var> = None;
        if variant.delta1 {
            let gap = tape.neg(dn)?;
            let gap = tape.add_scalar(gap, alpha1)?;
            let hinge = tape.max_scalar(gap, 0.0)?;
            term = Some(tape.mul_scalar(hinge, sched.delta)?);
        }
        if variant.delta2 {
            let gap = tape.neg(dn)?;
            let gap = tape.add_scalar(gap, sched.alpha2)?;
            let hinge = tape.max_scalar(gap, 0.0)?;
            let weighted = tape.mul(dn, hinge)?;
            term = Some(match term {
                Some(t) => tape.add(t, weighted)?,
                None => weighted,
            });
        }
        let term = term.expect("at least one margin term is active");
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let mean = tape.mul_scalar(total.expect("non-empty"), 1.0 / anchor_negatives.len() as f64)?;
    Ok(tape.add(anchor_positive, mean)?)
}

/// Contrastive objective for `variant`. Positive and negatives are detached
/// before use.
pub fn contrastive_loss(
    tape: &mut Tape,
    batch: &TripletBatch,
    sched: &ScheduleState,
    variant: &ContrastiveVariant,
) -> Result<Var, LossError> {
    let shape = tape.try_value(batch.anchor)?.shape().to_vec();
    let positive = tape.detach(batch.positive)?;
    if tape.value(positive).shape() != shape.as_slice() {
        return Err(LossError::ShapeMismatch);
    }
    let ap = distance(tape, batch.anchor, positive, variant.interval_distribution)?;
    if !variant.uses_negatives() {
        return Ok(ap);
    }
    if batch.negatives.is_empty() {
        return Err(LossError::NoNegatives);
    }
    let mut an = Vec::with_capacity(batch.negatives.len());
    for &n in &batch.negatives {
        let n = tape.detach(n)?;
        if tape.value(n).shape() != shape.as_slice() {
            return Err(LossError::ShapeMismatch);
        }
        an.push(distance(tape, batch.anchor, n, variant.interval_distribution)?);
    }
    combine(tape, ap, &an, alpha1(sched), &sched.config, variant)
}

/// Full objective on binned distributions.
pub fn sec_loss(tape: &mut Tape, batch: &TripletBatch, sched: &ScheduleState) -> Result<Var, LossError> {
    if batch.negatives.is_empty() {
        return Err(LossError::NoNegatives);
    }
    contrastive_loss(tape, batch, sched, &ContrastiveVariant::FULL)
}
