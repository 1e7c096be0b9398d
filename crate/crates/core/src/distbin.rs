//! Interval-based disparity distributions and the Jensen-Shannon divergence.
//!
//! `[0, 1]` is split into `N` equal bins with centers `(n + 0.5) / N`. Every
//! pixel spreads Gaussian weight (`sigma = 1 / 2N`, untruncated) over all
//! bins; the per-bin sums over the map are normalized into a probability
//! vector.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{Tape, Tensor, TensorError, Var, VectorJacobian};

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

#[derive(Debug, Clone, PartialEq)]
pub struct BinSpec {
    centers: Vec<f64>,
    sigma: f64,
}

impl BinSpec {
    /// Panics if `bins == 0`.
    pub fn new(bins: usize) -> Self {
        assert!(bins > 0, "bin count must be positive");
        let n = bins as f64;
        Self { centers: (0..bins).map(|i| (i as f64 + 0.5) / n).collect(), sigma: 1.0 / (2.0 * n) }
    }

    pub fn bins(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Gaussian kernel weight of disparity `d` for bin `n`.
    #[inline]
    pub fn weight(&self, d: f64, n: usize) -> f64 {
        let z = (d - self.centers[n]) / self.sigma;
        math::exp(-0.5 * z * z) / (self.sigma * SQRT_2PI)
    }
}

impl Default for BinSpec {
    fn default() -> Self {
        Self::new(32)
    }
}

/// Probability vector over disparity bins.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution(Vec<f64>);

impl DepthDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(p: Vec<f64>) -> Result<Self, TensorError> {
        if p.is_empty() {
            return Err(TensorError::Domain("empty distribution"));
        }
        if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(TensorError::Domain("distribution entries must be finite and non-negative"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(TensorError::Domain("distribution does not sum to one"));
        }
        Ok(Self(p))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.0.len()], self.0.clone())
    }
}

struct SoftBin {
    spec: BinSpec,
    total: f64,
}

impl VectorJacobian for SoftBin {
    fn vjp(&self, inputs: &[&Tensor], out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let Some(gd) = grads[0].as_mut() else { return };
        let p = out.data();
        // Through the normalization p = raw / total.
        let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
        let g_raw: Vec<f64> = g.iter().map(|gi| (gi - dot) / self.total).collect();
        let inv_var = 1.0 / (self.spec.sigma * self.spec.sigma);
        for (gi, &d) in gd.iter_mut().zip(inputs[0].data()) {
            let mut acc = 0.0;
            for (n, &c) in self.spec.centers.iter().enumerate() {
                acc += g_raw[n] * self.spec.weight(d, n) * (c - d) * inv_var;
            }
            *gi += acc;
        }
    }
}

fn check_unit_range(d: &Tensor) -> Result<(), TensorError> {
    match d.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(TensorError::Domain(if d.data()[index] < 0.0 {
            "disparity below 0 in soft_bin"
        } else {
            "disparity above 1 in soft_bin"
        })),
        None => Ok(()),
    }
}

fn aggregate(d: &Tensor, spec: &BinSpec) -> Vec<f64> {
    let mut raw = vec![0.0; spec.bins()];
    for &v in d.data() {
        for (n, r) in raw.iter_mut().enumerate() {
            *r += spec.weight(v, n);
        }
    }
    raw
}

/// Soft histogram of a disparity map as a length-`N` distribution on the
/// tape. Differentiable with respect to the map.
pub fn soft_bin(tape: &mut Tape, disparity: Var, spec: &BinSpec) -> Result<Var, TensorError> {
    let d = tape.try_value(disparity)?;
    check_unit_range(d)?;
    let raw = aggregate(d, spec);
    let total: f64 = raw.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(TensorError::Domain("soft_bin aggregate is zero"));
    }
    let p: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let value = Tensor::from_parts(vec![spec.bins()], p);
    tape.record(&[disparity], value, SoftBin { spec: spec.clone(), total })
}

/// Tape-free [`soft_bin`].
pub fn distribution_of(disparity: &Tensor, spec: &BinSpec) -> Result<DepthDistribution, TensorError> {
    let mut tape = Tape::new();
    let d = tape.constant(disparity.clone());
    let p = soft_bin(&mut tape, d, spec)?;
    Ok(DepthDistribution(tape.value(p).data().to_vec()))
}

struct JsDivergence;

/// `ln(x / m)` with `m = sum / 2`, written so a subnormal `x` cannot
/// underflow `m` to zero. Requires `0 < x <= sum`.
#[inline]
fn log_ratio(x: f64, sum: f64) -> f64 {
    math::ln(2.0 * (x / sum))
}

/// `x ln(x / m)` with `0 ln 0 = 0`.
#[inline]
fn xlogx_over(x: f64, sum: f64) -> f64 {
    if x > 0.0 {
        x * log_ratio(x, sum)
    } else {
        0.0
    }
}

impl VectorJacobian for JsDivergence {
    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (p, q) = (inputs[0].data(), inputs[1].data());
        let g = g[0];
        for (slot, (own, _)) in grads.iter_mut().zip([(p, q), (q, p)]) {
            let Some(gs) = slot.as_mut() else { continue };
            for i in 0..own.len() {
                // d/dx of the JS sum is ln(x / m) / 2; zero entries contribute
                // a zero subgradient.
                if own[i] > 0.0 {
                    gs[i] += g * 0.5 * log_ratio(own[i], p[i] + q[i]);
                }
            }
        }
    }
}

/// Jensen-Shannon divergence in nats: `KL(P|M)/2 + KL(Q|M)/2`, `M = (P+Q)/2`.
pub fn js_divergence(tape: &mut Tape, p: Var, q: Var) -> Result<Var, TensorError> {
    let (tp, tq) = (tape.try_value(p)?, tape.try_value(q)?);
    if tp.shape() != tq.shape() || tp.rank() != 1 {
        return Err(TensorError::ShapeMismatch { lhs: tp.shape().to_vec(), rhs: tq.shape().to_vec() });
    }
    let js = js_value(tp.data(), tq.data());
    tape.record(&[p, q], Tensor::scalar(js), JsDivergence)
}

fn js_value(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        acc += xlogx_over(a, a + b) + xlogx_over(b, a + b);
    }
    // Rounding can leave a tiny negative for P == Q.
    (0.5 * acc).max(0.0)
}

/// Tape-free [`js_divergence`].
pub fn js(p: &DepthDistribution, q: &DepthDistribution) -> Result<f64, TensorError> {
    if p.0.len() != q.0.len() {
        return Err(TensorError::ShapeMismatch { lhs: vec![p.0.len()], rhs: vec![q.0.len()] });
    }
    Ok(js_value(&p.0, &q.0))
}
