// Primitive operations recorded on the tape.

use alloc::vec;
use alloc::vec::Vec;

use super::{numel, Tape, Tensor, TensorError, Var, VectorJacobian};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Binary op over equal shapes, or with one single-element operand.
struct Binary {
    kind: BinaryKind,
    a_bcast: bool,
    b_bcast: bool,
}

impl Binary {
    #[inline]
    fn idx(bcast: bool, i: usize) -> usize {
        if bcast {
            0
        } else {
            i
        }
    }
}

impl VectorJacobian for Binary {
    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (ab, bb) = (self.a_bcast, self.b_bcast);
        let (ga, gb) = grads.split_at_mut(1);
        if let Some(ga) = ga[0].as_mut() {
            for (i, &gi) in g.iter().enumerate() {
                let bi = b[Self::idx(bb, i)];
                ga[Self::idx(ab, i)] += match self.kind {
                    BinaryKind::Add | BinaryKind::Sub => gi,
                    BinaryKind::Mul => gi * bi,
                    BinaryKind::Div => gi / bi,
                };
            }
        }
        if let Some(gb) = gb[0].as_mut() {
            for (i, &gi) in g.iter().enumerate() {
                let ai = a[Self::idx(ab, i)];
                let bi = b[Self::idx(bb, i)];
                gb[Self::idx(bb, i)] += match self.kind {
                    BinaryKind::Add => gi,
                    BinaryKind::Sub => -gi,
                    BinaryKind::Mul => gi * ai,
                    BinaryKind::Div => -gi * ai / (bi * bi),
                };
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Exp,
    Log,
    Abs,
    MaxScalar(f64),
    MinScalar(f64),
    Pow(f64),
    AddScalar(f64),
    MulScalar(f64),
    Sigmoid,
    LeakyRelu(f64),
}

struct Unary(UnaryKind);

impl VectorJacobian for Unary {
    fn vjp(&self, inputs: &[&Tensor], out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let Some(ga) = grads[0].as_mut() else { return };
        let x = inputs[0].data();
        let y = out.data();
        for i in 0..g.len() {
            ga[i] += g[i]
                * match self.0 {
                    UnaryKind::Exp => y[i],
                    UnaryKind::Log => 1.0 / x[i],
                    UnaryKind::Abs => {
                        if x[i] > 0.0 {
                            1.0
                        } else if x[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    UnaryKind::MaxScalar(c) => (x[i] > c) as u8 as f64,
                    UnaryKind::MinScalar(c) => (x[i] < c) as u8 as f64,
                    UnaryKind::Pow(p) => p * math::powf(x[i], p - 1.0),
                    UnaryKind::AddScalar(_) => 1.0,
                    UnaryKind::MulScalar(c) => c,
                    UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                    UnaryKind::LeakyRelu(s) => {
                        if x[i] > 0.0 {
                            1.0
                        } else {
                            s
                        }
                    }
                };
        }
    }
}

impl Tape {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.try_value(a)?, self.try_value(b)?);
        let (a_bcast, b_bcast, shape) = if ta.shape() == tb.shape() {
            (false, false, ta.shape().to_vec())
        } else if tb.len() == 1 {
            (false, true, ta.shape().to_vec())
        } else if ta.len() == 1 {
            (true, false, tb.shape().to_vec())
        } else {
            return Err(TensorError::ShapeMismatch {
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let n = numel(&shape);
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = da[Binary::idx(a_bcast, i)];
            let y = db[Binary::idx(b_bcast, i)];
            out.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => {
                    if y == 0.0 {
                        return Err(TensorError::DivisionByZero { index: i });
                    }
                    x / y
                }
            });
        }
        let value = Tensor::from_parts(shape, out);
        self.record(&[a, b], value, Binary { kind, a_bcast, b_bcast })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Errors with the offending index when the divisor has a zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var, TensorError> {
        let ta = self.try_value(a)?;
        let x = ta.data();
        let mut out = Vec::with_capacity(x.len());
        for (i, &v) in x.iter().enumerate() {
            out.push(match kind {
                UnaryKind::Exp => math::exp(v),
                UnaryKind::Log => {
                    if v <= 0.0 {
                        return Err(TensorError::LogDomain { index: i, value: v });
                    }
                    math::ln(v)
                }
                UnaryKind::Abs => v.abs(),
                UnaryKind::MaxScalar(c) => v.max(c),
                UnaryKind::MinScalar(c) => v.min(c),
                UnaryKind::Pow(p) => {
                    if v < 0.0 && p != math::floor(p) {
                        return Err(TensorError::PowDomain { index: i, value: v });
                    }
                    math::powf(v, p)
                }
                UnaryKind::AddScalar(c) => v + c,
                UnaryKind::MulScalar(c) => v * c,
                UnaryKind::Sigmoid => {
                    if v >= 0.0 {
                        1.0 / (1.0 + math::exp(-v))
                    } else {
                        let e = math::exp(v);
                        e / (1.0 + e)
                    }
                }
                UnaryKind::LeakyRelu(s) => {
                    if v > 0.0 {
                        v
                    } else {
                        s * v
                    }
                }
            });
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), out);
        self.record(&[a], value, Unary(kind))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Exp, a)
    }

    /// Natural log; errors with the offending index on non-positive input.
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Abs, a)
    }

    /// `max(a, c)` elementwise; the hinge clamp.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(UnaryKind::MaxScalar(c), a)
    }

    pub fn min_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(UnaryKind::MinScalar(c), a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        let a = self.max_scalar(a, lo)?;
        self.min_scalar(a, hi)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Pow(p), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(UnaryKind::AddScalar(c), a)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(UnaryKind::MulScalar(c), a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.mul_scalar(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.mul(a, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        self.unary(UnaryKind::LeakyRelu(slope), a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
    Variance,
}

struct Reduce {
    kind: ReduceKind,
    map: Vec<usize>,
    group: usize,
    means: Vec<f64>,
}

impl VectorJacobian for Reduce {
    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let Some(ga) = grads[0].as_mut() else { return };
        let x = inputs[0].data();
        let n = self.group as f64;
        for (i, &o) in self.map.iter().enumerate() {
            ga[i] += match self.kind {
                ReduceKind::Sum => g[o],
                ReduceKind::Mean => g[o] / n,
                ReduceKind::Variance => g[o] * 2.0 * (x[i] - self.means[o]) / n,
            };
        }
    }
}

/// For each input position, the flat index of the output cell it reduces into.
fn reduction_map(
    shape: &[usize],
    axes: &[usize],
) -> Result<(Vec<usize>, Vec<usize>, usize), TensorError> {
    if axes.is_empty() {
        return Err(TensorError::EmptyReduction);
    }
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &axis in axes {
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        reduced[axis] = true;
    }
    let out_shape: Vec<usize> =
        shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&e, _)| e).collect();
    let group: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&e, _)| e).product();

    // Output stride for every input axis (0 on reduced axes).
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1;
    for axis in (0..rank).rev() {
        if !reduced[axis] {
            out_strides[axis] = stride;
            stride *= shape[axis];
        }
    }
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut index = vec![0usize; rank];
    for _ in 0..n {
        map.push(index.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    Ok((out_shape, map, group))
}

impl Tape {
    fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let ta = self.try_value(a)?;
        let (out_shape, map, group) = reduction_map(ta.shape(), axes)?;
        let m = numel(&out_shape);
        let x = ta.data();
        let mut sums = vec![0.0; m];
        for (&o, &v) in map.iter().zip(x) {
            sums[o] += v;
        }
        let n = group as f64;
        let (out, means) = match kind {
            ReduceKind::Sum => (sums, Vec::new()),
            ReduceKind::Mean => (sums.iter().map(|s| s / n).collect(), Vec::new()),
            ReduceKind::Variance => {
                // Two-pass form of mean(x^2) - mean(x)^2.
                let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
                let mut acc = vec![0.0; m];
                for (&o, &v) in map.iter().zip(x) {
                    let d = v - means[o];
                    acc[o] += d * d;
                }
                (acc.iter().map(|s| s / n).collect(), means)
            }
        };
        let value = Tensor::from_parts(out_shape, out);
        self.record(&[a], value, Reduce { kind, map, group, means })
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    /// Population variance over `axes`.
    pub fn variance(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        self.reduce(ReduceKind::Variance, a, axes)
    }

    fn all_axes(&self, a: Var) -> Result<Vec<usize>, TensorError> {
        Ok((0..self.try_value(a)?.rank()).collect())
    }

    /// Sum of every element; rank-0 result.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        if self.try_value(a)?.rank() == 0 {
            return self.mul_scalar(a, 1.0);
        }
        let axes = self.all_axes(a)?;
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        if self.try_value(a)?.rank() == 0 {
            return self.mul_scalar(a, 1.0);
        }
        let axes = self.all_axes(a)?;
        self.mean(a, &axes)
    }

    pub fn variance_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let axes = self.all_axes(a)?;
        self.variance(a, &axes)
    }
}

/// 3x3 box mean per channel of an `H x W x C` tensor, replicate borders.
struct MeanPool3;

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

impl VectorJacobian for MeanPool3 {
    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let Some(ga) = grads[0].as_mut() else { return };
        let s = inputs[0].shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        for y in 0..h {
            for x in 0..w {
                for dy in -1..=1isize {
                    let yy = clamp_index(y as isize + dy, h);
                    for dx in -1..=1isize {
                        let xx = clamp_index(x as isize + dx, w);
                        let (src, dst) = ((yy * w + xx) * c, (y * w + x) * c);
                        for ch in 0..c {
                            ga[src + ch] += g[dst + ch] / 9.0;
                        }
                    }
                }
            }
        }
    }
}

struct Reshape;

impl VectorJacobian for Reshape {
    fn vjp(&self, _inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        if let Some(ga) = grads[0].as_mut() {
            ga.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

struct Upsample2;

impl VectorJacobian for Upsample2 {
    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let Some(ga) = grads[0].as_mut() else { return };
        let s = inputs[0].shape();
        let (w, c) = (s[1], s[2]);
        let ow = 2 * w;
        for (o, &gv) in g.iter().enumerate() {
            let ch = o % c;
            let px = o / c;
            let (oy, ox) = (px / ow, px % ow);
            ga[((oy / 2) * w + ox / 2) * c + ch] += gv;
        }
    }
}

struct ConcatChannels {
    ca: usize,
    cb: usize,
}

impl VectorJacobian for ConcatChannels {
    fn vjp(&self, _inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let c = self.ca + self.cb;
        let (first, second) = grads.split_at_mut(1);
        for (px, chunk) in g.chunks_exact(c).enumerate() {
            if let Some(ga) = first[0].as_mut() {
                for (dst, src) in ga[px * self.ca..(px + 1) * self.ca].iter_mut().zip(&chunk[..self.ca]) {
                    *dst += src;
                }
            }
            if let Some(gb) = second[0].as_mut() {
                for (dst, src) in gb[px * self.cb..(px + 1) * self.cb].iter_mut().zip(&chunk[self.ca..]) {
                    *dst += src;
                }
            }
        }
    }
}

struct BiasAdd;

impl VectorJacobian for BiasAdd {
    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let c = inputs[1].len();
        let (first, second) = grads.split_at_mut(1);
        if let Some(ga) = first[0].as_mut() {
            ga.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if let Some(gb) = second[0].as_mut() {
            for chunk in g.chunks_exact(c) {
                gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn hwc(t: &Tensor, what: &'static str) -> Result<(usize, usize, usize), TensorError> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(TensorError::Domain(what)),
    }
}

impl Tape {
    /// Per-channel 3x3 box mean with replicate padding; input is `H x W x C`.
    pub fn mean_pool3(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.try_value(a)?;
        let (h, w, c) = hwc(ta, "mean_pool3 expects an H x W x C tensor")?;
        let x = ta.data();
        let mut out = vec![0.0; x.len()];
        for y in 0..h {
            for xx in 0..w {
                let dst = (y * w + xx) * c;
                for dy in -1..=1isize {
                    let sy = clamp_index(y as isize + dy, h);
                    for dx in -1..=1isize {
                        let sx = clamp_index(xx as isize + dx, w);
                        let src = (sy * w + sx) * c;
                        for ch in 0..c {
                            out[dst + ch] += x[src + ch];
                        }
                    }
                }
                for v in &mut out[dst..dst + c] {
                    *v /= 9.0;
                }
            }
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), out);
        self.record(&[a], value, MeanPool3)
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.try_value(a)?.clone().reshape(shape)?;
        self.record(&[a], value, Reshape)
    }

    /// Nearest-neighbour 2x upsampling of an `H x W x C` tensor.
    pub fn upsample2(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.try_value(a)?;
        let (h, w, c) = hwc(ta, "upsample2 expects an H x W x C tensor")?;
        let x = ta.data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(oh * ow * c);
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((oy / 2) * w + ox / 2) * c;
                out.extend_from_slice(&x[src..src + c]);
            }
        }
        let value = Tensor::from_parts(vec![oh, ow, c], out);
        self.record(&[a], value, Upsample2)
    }

    /// Channel concatenation of two `H x W x _` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.try_value(a)?, self.try_value(b)?);
        let (h, w, ca) = hwc(ta, "concat_channels expects H x W x C tensors")?;
        let (hb, wb, cb) = hwc(tb, "concat_channels expects H x W x C tensors")?;
        if (h, w) != (hb, wb) {
            return Err(TensorError::ShapeMismatch {
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(h * w * (ca + cb));
        for (pa, pb) in ta.data().chunks_exact(ca).zip(tb.data().chunks_exact(cb)) {
            out.extend_from_slice(pa);
            out.extend_from_slice(pb);
        }
        let value = Tensor::from_parts(vec![h, w, ca + cb], out);
        self.record(&[a, b], value, ConcatChannels { ca, cb })
    }

    /// Adds a length-`C` bias to every pixel of an `... x C` tensor.
    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.try_value(a)?, self.try_value(bias)?);
        let c = *ta.shape().last().ok_or(TensorError::Domain("bias_add on a scalar"))?;
        if tb.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let out: Vec<f64> =
            ta.data().chunks_exact(c).flat_map(|px| px.iter().zip(b).map(|(x, y)| x + y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), out);
        self.record(&[a, bias], value, BiasAdd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Var) -> Tensor {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).clone()
    }

    #[test]
    fn elementwise_examples() {
        let r = eval(|tp| {
            let a = tp.constant(t(&[2], &[1.0, 2.0]));
            let b = tp.constant(t(&[2], &[3.0, 4.0]));
            tp.add(a, b).unwrap()
        });
        assert_eq!(r.data(), &[4.0, 6.0]);
        let r = eval(|tp| {
            let a = tp.constant(t(&[2], &[-0.3, 0.2]));
            tp.max_scalar(a, 0.0).unwrap()
        });
        assert_eq!(r.data(), &[0.0, 0.2]);
        let r = eval(|tp| {
            let a = tp.constant(t(&[1], &[0.0]));
            tp.exp(a).unwrap()
        });
        assert_eq!(r.data(), &[1.0]);
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let r = eval(|tp| {
            let a = tp.constant(Tensor::scalar(10.0));
            let b = tp.constant(t(&[3], &[1.0, 2.0, 4.0]));
            tp.div(a, b).unwrap()
        });
        assert_eq!(r.data(), &[10.0, 5.0, 2.5]);
        let r = eval(|tp| {
            let a = tp.constant(t(&[3], &[1.0, 2.0, 4.0]));
            let b = tp.constant(Tensor::scalar(2.0));
            tp.sub(a, b).unwrap()
        });
        assert_eq!(r.data(), &[-1.0, 0.0, 2.0]);
    }

    #[test]
    fn elementwise_errors_report_index() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tp.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tp.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        let z = tp.constant(t(&[3], &[1.0, 0.0, 2.0]));
        assert_eq!(tp.div(a, z).unwrap_err(), TensorError::DivisionByZero { index: 1 });
        let neg = tp.constant(t(&[3], &[1.0, 2.0, -1.0]));
        assert_eq!(tp.log(neg).unwrap_err(), TensorError::LogDomain { index: 2, value: -1.0 });
        let zero = tp.constant(Tensor::scalar(0.0));
        assert!(matches!(tp.log(zero), Err(TensorError::LogDomain { index: 0, .. })));
        assert!(matches!(tp.powf(neg, 0.5), Err(TensorError::PowDomain { index: 2, .. })));
    }

    #[test]
    fn reduction_examples() {
        let r = eval(|tp| {
            let a = tp.constant(t(&[3], &[1.0, 1.0, 1.0]));
            tp.variance_all(a).unwrap()
        });
        assert_eq!(r.item(), 0.0);
        let r = eval(|tp| {
            let a = tp.constant(t(&[2], &[0.0, 2.0]));
            tp.variance_all(a).unwrap()
        });
        assert_eq!(r.item(), 1.0);
        let r = eval(|tp| {
            let a = tp.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
            tp.sum(a, &[0]).unwrap()
        });
        assert_eq!(r.data(), &[4.0, 6.0]);
        let r = eval(|tp| {
            let a = tp.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
            tp.mean(a, &[1]).unwrap()
        });
        assert_eq!(r.data(), &[1.5, 3.5]);
    }

    #[test]
    fn reduction_errors() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(tp.sum(a, &[]).unwrap_err(), TensorError::EmptyReduction);
        assert_eq!(tp.mean(a, &[2]).unwrap_err(), TensorError::InvalidAxis { axis: 2, rank: 2 });
    }

    #[test]
    fn middle_axis_reduction() {
        // shape [2,3,2], reduce axis 1
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let r = eval(|tp| {
            let a = tp.constant(t(&[2, 3, 2], &data));
            tp.sum(a, &[1]).unwrap()
        });
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.data(), &[6.0, 9.0, 24.0, 27.0]);
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                0.1 + 0.8 * ((s >> 11) as f64 / (1u64 << 53) as f64)
            })
            .collect()
    }

    #[test]
    fn primitives_pass_gradcheck() {
        let x = t(&[4, 3, 2], &pseudo_random(24, 7));
        let other = t(&[4, 3, 2], &pseudo_random(24, 8));
        type F = fn(&mut Tape, Var, Var) -> Result<Var, TensorError>;
        let cases: Vec<(&str, F)> = vec![
            ("add", |tp, x, o| tp.add(x, o)),
            ("sub", |tp, x, o| tp.sub(o, x)),
            ("mul", |tp, x, o| tp.mul(x, o)),
            ("div-num", |tp, x, o| tp.div(x, o)),
            ("div-den", |tp, x, o| tp.div(o, x)),
            ("exp", |tp, x, _| tp.exp(x)),
            ("log", |tp, x, _| tp.log(x)),
            ("abs", |tp, x, o| {
                let d = tp.sub(x, o)?;
                tp.abs(d)
            }),
            ("max", |tp, x, _| tp.max_scalar(x, 0.5)),
            ("pow", |tp, x, _| tp.powf(x, 2.5)),
            ("sigmoid", |tp, x, _| tp.sigmoid(x)),
            ("leaky", |tp, x, _| {
                let d = tp.add_scalar(x, -0.5)?;
                tp.leaky_relu(d, 0.1)
            }),
            ("scalar-bcast", |tp, x, _| {
                let m = tp.mean_all(x)?;
                tp.mul(x, m)
            }),
            ("sum-axis", |tp, x, _| tp.sum(x, &[0, 2])),
            ("mean-axis", |tp, x, _| tp.mean(x, &[1])),
            ("variance", |tp, x, _| tp.variance(x, &[0, 1])),
            ("pool", |tp, x, _| tp.mean_pool3(x)),
            ("upsample", |tp, x, _| tp.upsample2(x)),
            ("concat", |tp, x, o| tp.concat_channels(o, x)),
            ("bias", |tp, x, _| {
                let b = tp.constant(t(&[2], &[0.3, -0.2]));
                tp.bias_add(x, b)
            }),
        ];
        for (name, f) in cases {
            let other = other.clone();
            // Weighted sum so that every output position carries a distinct
            // cotangent.
            let err = gradcheck(
                |tp, x| {
                    let o = tp.constant(other.clone());
                    let y = f(tp, x, o)?;
                    let n = tp.value(y).len();
                    let wts = Tensor::new(
                        tp.value(y).shape().to_vec(),
                        (0..n).map(|i| 1.0 + 0.1 * (i % 7) as f64).collect(),
                    )?;
                    let wv = tp.constant(wts);
                    let p = tp.mul(y, wv)?;
                    tp.sum_all(p)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{name}: gradcheck error {err}");
        }
    }

    #[test]
    fn bias_gradient_sums_pixels() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[2, 2, 2], &[0.0; 8]));
        let b = tp.leaf(t(&[2], &[1.0, 2.0]));
        let y = tp.bias_add(x, b).unwrap();
        let s = tp.sum_all(y).unwrap();
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(b).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn pool_of_constant_is_constant() {
        let r = eval(|tp| {
            let a = tp.constant(Tensor::full(&[3, 4, 2], 0.25));
            tp.mean_pool3(a).unwrap()
        });
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn upsample_layout() {
        let r = eval(|tp| {
            let a = tp.constant(t(&[1, 2, 1], &[1.0, 2.0]));
            tp.upsample2(a).unwrap()
        });
        assert_eq!(r.shape(), &[2, 4, 1]);
        assert_eq!(r.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
