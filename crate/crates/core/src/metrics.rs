//! Depth error and threshold-accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::{Tensor, TensorError};

pub const THRESHOLD: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(rename = "AbsRel")]
    pub abs_rel: f64,
    #[serde(rename = "SqRel")]
    pub sq_rel: f64,
    #[serde(rename = "RMSE")]
    pub rmse: f64,
    #[serde(rename = "RMSElog")]
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl MetricsRecord {
    pub const KEYS: [&'static str; 7] = ["AbsRel", "SqRel", "RMSE", "RMSElog", "a1", "a2", "a3"];

    pub fn values(&self) -> [f64; 7] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.a1, self.a2, self.a3]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        Self { abs_rel: v[0], sq_rel: v[1], rmse: v[2], rmse_log: v[3], a1: v[4], a2: v[5], a3: v[6] }
    }

    /// Metrics of one predicted depth map against ground truth. Both must be
    /// strictly positive and equally shaped.
    pub fn of_image(pred: &Tensor, gt: &Tensor) -> Result<Self, TensorError> {
        if pred.shape() != gt.shape() {
            return Err(TensorError::ShapeMismatch { lhs: pred.shape().to_vec(), rhs: gt.shape().to_vec() });
        }
        if pred.is_empty() {
            return Err(TensorError::EmptyReduction);
        }
        let mut acc = [0.0f64; 7];
        let (t1, t2, t3) = (THRESHOLD, THRESHOLD * THRESHOLD, THRESHOLD * THRESHOLD * THRESHOLD);
        for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
            if p <= 0.0 {
                return Err(TensorError::LogDomain { index: i, value: p });
            }
            if g <= 0.0 {
                return Err(TensorError::LogDomain { index: i, value: g });
            }
            let d = p - g;
            acc[0] += d.abs() / g;
            acc[1] += d * d / g;
            acc[2] += d * d;
            let dl = math::ln(p) - math::ln(g);
            acc[3] += dl * dl;
            let ratio = (p / g).max(g / p);
            acc[4] += f64::from(u8::from(ratio < t1));
            acc[5] += f64::from(u8::from(ratio < t2));
            acc[6] += f64::from(u8::from(ratio < t3));
        }
        let n = pred.len() as f64;
        let m = acc.map(|a| a / n);
        Ok(Self::from_values([m[0], m[1], math::sqrt(m[2]), math::sqrt(m[3]), m[4], m[5], m[6]]))
    }

    /// Weighted mean of records; `None` when the total weight is zero.
    pub fn weighted_mean<'a>(items: impl IntoIterator<Item = (&'a MetricsRecord, f64)>) -> Option<Self> {
        let mut acc = [0.0f64; 7];
        let mut total = 0.0;
        for (r, w) in items {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += w * v;
            }
            total += w;
        }
        (total > 0.0).then(|| Self::from_values(acc.map(|a| a / total)))
    }

    /// Unweighted mean over images.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a MetricsRecord>) -> Option<Self> {
        Self::weighted_mean(items.into_iter().map(|r| (r, 1.0)))
    }
}
