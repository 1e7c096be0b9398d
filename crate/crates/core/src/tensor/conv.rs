use alloc::vec;
use alloc::vec::Vec;

use super::{Tape, Tensor, TensorError, Var, VectorJacobian};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingMode {
    Zero,
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub amount: usize,
    pub mode: PaddingMode,
}

impl Padding {
    pub const NONE: Padding = Padding { amount: 0, mode: PaddingMode::Zero };

    pub fn zero(amount: usize) -> Self {
        Self { amount, mode: PaddingMode::Zero }
    }

    pub fn replicate(amount: usize) -> Self {
        Self { amount, mode: PaddingMode::Replicate }
    }

    /// Source index for padded coordinate `i`, or `None` for a zero tap.
    #[inline]
    fn source(&self, i: isize, n: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < n {
            return Some(i as usize);
        }
        match self.mode {
            PaddingMode::Zero => None,
            PaddingMode::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: Padding,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self, TensorError> {
        let [h, w, ci] = *input else {
            return Err(TensorError::InvalidConv("input must be H x W x C"));
        };
        let [kh, kw, kci, co] = *kernel else {
            return Err(TensorError::InvalidConv("kernel must be KH x KW x Cin x Cout"));
        };
        if stride == 0 {
            return Err(TensorError::InvalidConv("stride must be positive"));
        }
        if kci != ci {
            return Err(TensorError::InvalidConv("kernel input channels differ from input"));
        }
        let (ph, pw) = (h + 2 * padding.amount, w + 2 * padding.amount);
        if kh > ph || kw > pw {
            return Err(TensorError::InvalidConv("kernel larger than padded input"));
        }
        if padding.mode == PaddingMode::Replicate && padding.amount >= h.min(w) + kh.max(kw) {
            return Err(TensorError::InvalidConv("replicate padding wider than input"));
        }
        Ok(Self {
            h,
            w,
            ci,
            kh,
            kw,
            co,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
            stride,
            padding,
        })
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn taps(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    /// Source row (or column) index per output coordinate and kernel offset.
    fn sources(&self, out: usize, k: usize, n: usize) -> Vec<Option<usize>> {
        let p = self.padding.amount as isize;
        (0..k)
            .flat_map(|kk| (0..out).map(move |o| (kk, o)))
            .map(|(kk, o)| self.padding.source((o * self.stride + kk) as isize - p, n))
            .collect()
    }

    /// Calls `f(j, row, src)` where `row[px]` is the flat input pixel feeding
    /// output pixel `px` through kernel row `j`, or `None` for a zero tap.
    /// Rows are ordered like the kernel: `j = (ky * kw + kx) * ci + c`.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, &[Option<usize>])) {
        let ys = self.sources(self.oh, self.kh, self.h);
        let xs = self.sources(self.ow, self.kw, self.w);
        let mut row = vec![None; self.pixels()];
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let ry = &ys[ky * self.oh..(ky + 1) * self.oh];
                let rx = &xs[kx * self.ow..(kx + 1) * self.ow];
                for (oy, &iy) in ry.iter().enumerate() {
                    let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                    for (d, &ix) in dst.iter_mut().zip(rx) {
                        *d = iy.zip(ix).map(|(iy, ix)| iy * self.w + ix);
                    }
                }
                for c in 0..self.ci {
                    f((ky * self.kw + kx) * self.ci + c, c, &row);
                }
            }
        }
    }

    /// Unrolled input, `taps x pixels`, row-major.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.pixels();
        let mut col = vec![0.0; self.taps() * n];
        self.for_each_row(|j, c, row| {
            for (d, s) in col[j * n..(j + 1) * n].iter_mut().zip(row) {
                if let Some(i) = *s {
                    *d = x[i * self.ci + c];
                }
            }
        });
        col
    }

    /// Adjoint of `im2col`: scatters `taps x pixels` back onto the input.
    fn col2im(&self, col: &[f64], gx: &mut [f64]) {
        let n = self.pixels();
        self.for_each_row(|j, c, row| {
            for (v, s) in col[j * n..(j + 1) * n].iter().zip(row) {
                if let Some(i) = *s {
                    gx[i * self.ci + c] += v;
                }
            }
        });
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (d, s) in y.iter_mut().zip(x) {
        *d += a * s;
    }
}

/// Dot product with four independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

struct Conv2d {
    geom: Geometry,
}

impl VectorJacobian for Conv2d {
    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (x, k) = (inputs[0].data(), inputs[1].data());
        let geom = &self.geom;
        let (co, n, taps) = (geom.co, geom.pixels(), geom.taps());
        // Channel-major copy of the output gradient, `co x pixels`.
        let mut gt = vec![0.0; co * n];
        for (px, gp) in g.chunks_exact(co).enumerate() {
            for (o, &v) in gp.iter().enumerate() {
                gt[o * n + px] = v;
            }
        }
        let (gx, gk) = grads.split_at_mut(1);
        if let Some(gk) = gk[0].as_mut() {
            let col = geom.im2col(x);
            for j in 0..taps {
                let cr = &col[j * n..(j + 1) * n];
                for o in 0..co {
                    gk[j * co + o] += dot(cr, &gt[o * n..(o + 1) * n]);
                }
            }
        }
        if let Some(gx) = gx[0].as_mut() {
            let mut gcol = vec![0.0; taps * n];
            for j in 0..taps {
                let dst = &mut gcol[j * n..(j + 1) * n];
                for o in 0..co {
                    axpy(dst, k[j * co + o], &gt[o * n..(o + 1) * n]);
                }
            }
            geom.col2im(&gcol, gx);
        }
    }
}

impl Tape {
    /// Cross-correlation of an `H x W x Cin` input with a
    /// `KH x KW x Cin x Cout` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let (ti, tk) = (self.try_value(input)?, self.try_value(kernel)?);
        let geom = Geometry::new(ti.shape(), tk.shape(), stride, padding)?;
        let k = tk.data();
        let (co, n) = (geom.co, geom.pixels());
        let col = geom.im2col(ti.data());
        let mut ot = vec![0.0; co * n];
        for (o, dst) in ot.chunks_exact_mut(n).enumerate() {
            for (j, cr) in col.chunks_exact(n).enumerate() {
                axpy(dst, k[j * co + o], cr);
            }
        }
        let mut out = vec![0.0; n * co];
        for (o, src) in ot.chunks_exact(n).enumerate() {
            for (px, &v) in src.iter().enumerate() {
                out[px * co + o] = v;
            }
        }
        let value = Tensor::from_parts(vec![geom.oh, geom.ow, co], out);
        self.record(&[input, kernel], value, Conv2d { geom })
    }
}
