//! Queue of historical model snapshots used to produce negative samples.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BoundNet, DepthNet, ModelError};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueueError {
    #[error("queue needs at least one slot")]
    Empty,
    #[error("snapshot fingerprint {found:#018x} does not match {expected:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("snapshot holds {found} parameters, queue expects {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("no negatives supplied")]
    NoNegatives,
    #[error("got {found} negative images for {slots} slots")]
    NegativeCount { slots: usize, found: usize },
    #[error("difference maps disagree in shape")]
    ShapeMismatch,
    #[error("omega {0} outside [0, 1]")]
    Omega(f64),
    #[error("cursor {cursor} out of range for {slots} slots")]
    Cursor { cursor: usize, slots: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub fingerprint: u64,
    pub params: Vec<f64>,
}

/// `slot <- omega * slot + (1 - omega) * theta`, elementwise.
pub fn ema_blend(slot: &mut ModelSnapshot, theta: &ModelSnapshot, omega: f64) -> Result<(), QueueError> {
    if slot.fingerprint != theta.fingerprint {
        return Err(QueueError::FingerprintMismatch { expected: slot.fingerprint, found: theta.fingerprint });
    }
    if slot.params.len() != theta.params.len() {
        return Err(QueueError::ParamCount { expected: slot.params.len(), found: theta.params.len() });
    }
    for (s, t) in slot.params.iter_mut().zip(&theta.params) {
        *s = omega * *s + (1.0 - omega) * t;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueueConfig {
    pub slots: usize,
    pub omega: f64,
    pub interval: u64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self { slots: 3, omega: 0.01, interval: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateReason {
    Interval,
    Diversity,
}

/// Ring of `j` snapshots with a write cursor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyQueue {
    slots: Vec<ModelSnapshot>,
    cursor: usize,
    omega: f64,
    interval: u64,
    update_count: u64,
}

impl LatencyQueue {
    pub fn new(slots: Vec<ModelSnapshot>, omega: f64, interval: u64) -> Result<Self, QueueError> {
        Self::restore(slots, 0, omega, interval, 0)
    }

    /// Rebuilds a queue from persisted state.
    pub fn restore(
        slots: Vec<ModelSnapshot>,
        cursor: usize,
        omega: f64,
        interval: u64,
        update_count: u64,
    ) -> Result<Self, QueueError> {
        let first = slots.first().ok_or(QueueError::Empty)?;
        for s in &slots[1..] {
            if s.fingerprint != first.fingerprint {
                return Err(QueueError::FingerprintMismatch { expected: first.fingerprint, found: s.fingerprint });
            }
            if s.params.len() != first.params.len() {
                return Err(QueueError::ParamCount { expected: first.params.len(), found: s.params.len() });
            }
        }
        if !(0.0..=1.0).contains(&omega) {
            return Err(QueueError::Omega(omega));
        }
        if cursor >= slots.len() {
            return Err(QueueError::Cursor { cursor, slots: slots.len() });
        }
        Ok(Self { slots, cursor, omega, interval: interval.max(1), update_count })
    }

    /// Slots filled from independently seeded networks.
    pub fn random(config: &QueueConfig, seeds: impl IntoIterator<Item = u64>) -> Result<Self, QueueError> {
        let slots = seeds.into_iter().take(config.slots).map(|s| DepthNet::init(s).export_snapshot()).collect();
        Self::new(slots, config.omega, config.interval)
    }

    pub fn slots(&self) -> &[ModelSnapshot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    /// Blends `theta` into the slot under the cursor and advances it.
    pub fn ema_update(&mut self, theta: &ModelSnapshot) -> Result<(), QueueError> {
        ema_blend(&mut self.slots[self.cursor], theta, self.omega)?;
        self.cursor = (self.cursor + 1) % self.slots.len();
        self.update_count += 1;
        Ok(())
    }

    pub fn interval_due(&self, step: u64) -> bool {
        step.is_multiple_of(self.interval)
    }

    /// Update policy: every `interval` steps, otherwise whenever negatives are
    /// on average closer to the anchor than the positive is.
    pub fn should_update(
        &self,
        step: u64,
        anchor: &Tensor,
        positive: &Tensor,
        negatives: &[Tensor],
    ) -> Result<Option<UpdateReason>, QueueError> {
        if negatives.is_empty() {
            return Err(QueueError::NoNegatives);
        }
        let shape = anchor.shape();
        if positive.shape() != shape || negatives.iter().any(|n| n.shape() != shape) {
            return Err(QueueError::ShapeMismatch);
        }
        if self.interval_due(step) {
            return Ok(Some(UpdateReason::Interval));
        }
        let pos = diff_variance(anchor, positive);
        let neg = negatives.iter().map(|n| diff_variance(anchor, n)).sum::<f64>() / negatives.len() as f64;
        Ok((neg < pos).then_some(UpdateReason::Diversity))
    }

    /// Seeded assignment of negative images to slots.
    pub fn slot_permutation<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.slots.len()).collect();
        perm.shuffle(rng);
        perm
    }

    /// `D_N^k = F_{perm[k]}(images[k])`, no gradients, queue untouched.
    pub fn generate_negatives<R: Rng + ?Sized>(
        &self,
        images: &[Tensor],
        rng: &mut R,
    ) -> Result<Vec<Tensor>, QueueError> {
        if images.len() != self.slots.len() {
            return Err(QueueError::NegativeCount { slots: self.slots.len(), found: images.len() });
        }
        let perm = self.slot_permutation(rng);
        images
            .iter()
            .zip(perm)
            .map(|(img, k)| Ok(DepthNet::import_snapshot(&self.slots[k])?.predict(img)?))
            .collect()
    }
}

/// Population variance of `a - b`, shifted by the first difference so a
/// constant difference gives exactly zero.
pub fn diff_variance(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    let (ad, bd) = (a.data(), b.data());
    let k = ad[0] - bd[0];
    let mean = ad.iter().zip(bd).map(|(x, y)| (x - y) - k).sum::<f64>() / n;
    ad.iter()
        .zip(bd)
        .map(|(x, y)| {
            let d = (x - y) - k - mean;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Anchor prediction on the degraded image (gradient-carrying) and positive
/// prediction on the clean image (recorded as a constant).
pub fn anchor_positive(
    tape: &mut Tape,
    net: &DepthNet,
    bound: &BoundNet,
    clean: &Tensor,
    augmented: &Tensor,
) -> Result<(Var, Var), ModelError> {
    let x = tape.constant(augmented.clone());
    let anchor = DepthNet::forward(tape, bound, x)?;
    let positive = tape.constant(net.predict(clean)?);
    Ok((anchor, positive))
}
