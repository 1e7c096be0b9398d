//! Rectified-stereo view synthesis and photometric supervision.
//!
//! The source view is sampled horizontally at `x - s * D(x, y) * d_px`, with
//! `s` the side of the source camera, bilinear interpolation and replicated
//! borders. The photometric loss mixes a 3x3 SSIM term with an L1 term.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::tensor::{Tape, Tensor, TensorError, Var, VectorJacobian};

/// Weight of the `1 - SSIM` term.
pub const BETA_SSIM: f64 = 0.425;
/// Weight of the absolute-difference term.
pub const BETA_L1: f64 = 0.15;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Disparities below this are clamped before conversion to depth.
pub const DISPARITY_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CameraError {
    #[error("focal length must be positive, got {0}")]
    Focal(f64),
    #[error("baseline must be positive, got {0}")]
    Baseline(f64),
    #[error("max disparity must be positive, got {0}")]
    MaxDisparity(f64),
}

/// Position of the source camera relative to the target camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceSide {
    /// Source translated by `(+B, 0, 0)`; scene points move left.
    Right,
    /// Source translated by `(-B, 0, 0)`.
    Left,
}

impl SourceSide {
    pub fn sign(self) -> f64 {
        match self {
            SourceSide::Right => 1.0,
            SourceSide::Left => -1.0,
        }
    }
}

/// Pinhole intrinsics plus a purely horizontal stereo baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Focal length in pixels.
    pub focal: f64,
    pub principal: (f64, f64),
    /// Baseline in metres.
    pub baseline: f64,
    pub source_side: SourceSide,
    /// Pixel shift of a normalized disparity of 1.
    pub max_disparity_px: f64,
}

impl CameraModel {
    pub fn new(
        focal: f64,
        principal: (f64, f64),
        baseline: f64,
        source_side: SourceSide,
        max_disparity_px: f64,
    ) -> Result<Self, CameraError> {
        let cam = Self { focal, principal, baseline, source_side, max_disparity_px };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if self.focal.is_nan() || self.focal <= 0.0 {
            return Err(CameraError::Focal(self.focal));
        }
        if self.baseline.is_nan() || self.baseline <= 0.0 {
            return Err(CameraError::Baseline(self.baseline));
        }
        if self.max_disparity_px.is_nan() || self.max_disparity_px <= 0.0 {
            return Err(CameraError::MaxDisparity(self.max_disparity_px));
        }
        Ok(())
    }

    /// Default rig for an `h x w` frame: source on the right, a normalized
    /// disparity of 1 shifting by `w / 64` pixels.
    pub fn for_frame(h: usize, w: usize) -> Self {
        Self {
            focal: w as f64,
            principal: (w as f64 / 2.0, h as f64 / 2.0),
            baseline: 0.54,
            source_side: SourceSide::Right,
            max_disparity_px: w as f64 / 64.0,
        }
    }

    /// Signed pixel shift per unit of normalized disparity.
    pub fn shift_scale(&self) -> f64 {
        self.source_side.sign() * self.max_disparity_px
    }

    pub fn depth_of(&self, disparity: f64) -> f64 {
        self.focal * self.baseline / (disparity.max(DISPARITY_FLOOR) * self.max_disparity_px)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthConversion {
    pub depth: Tensor,
    /// Pixels whose disparity was raised to [`DISPARITY_FLOOR`].
    pub clamped: usize,
}

/// `depth = focal * B / (D * d_px)` per pixel.
pub fn disparity_to_depth(disparity: &Tensor, cam: &CameraModel) -> DepthConversion {
    let clamped = disparity.data().iter().filter(|&&d| d < DISPARITY_FLOOR).count();
    let depth = disparity.data().iter().map(|&d| cam.depth_of(d)).collect();
    DepthConversion { depth: Tensor::from_parts(disparity.shape().to_vec(), depth), clamped }
}

/// Bilinear tap for continuous column `xs` on a row of width `w`, clamped to
/// the border. Returns `(x0, x1, frac, inside)`.
#[inline]
fn tap(xs: f64, w: usize) -> (usize, usize, f64, bool) {
    let max = (w - 1) as f64;
    let inside = (0.0..=max).contains(&xs);
    let xc = xs.clamp(0.0, max);
    let x0 = math::floor(xc) as usize;
    let x1 = (x0 + 1).min(w - 1);
    (x0, x1, xc - x0 as f64, inside)
}

struct HorizontalSample {
    scale: f64,
}

impl VectorJacobian for HorizontalSample {
    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (src, disp) = (inputs[0], inputs[1]);
        let s = src.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        let (sd, dd) = (src.data(), disp.data());
        let (gs, gd) = grads.split_at_mut(1);
        for y in 0..h {
            let row = y * w;
            for x in 0..w {
                let (x0, x1, f, inside) = tap(x as f64 - self.scale * dd[row + x], w);
                let o = (row + x) * c;
                let (a, b) = ((row + x0) * c, (row + x1) * c);
                if let Some(gd) = gd[0].as_mut() {
                    if inside {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += g[o + ch] * (sd[b + ch] - sd[a + ch]);
                        }
                        gd[row + x] += -self.scale * acc;
                    }
                }
                if let Some(gs) = gs[0].as_mut() {
                    for ch in 0..c {
                        gs[a + ch] += g[o + ch] * (1.0 - f);
                        gs[b + ch] += g[o + ch] * f;
                    }
                }
            }
        }
    }
}

fn sample(src: &Tensor, disp: &Tensor, scale: f64) -> Vec<f64> {
    let s = src.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (sd, dd) = (src.data(), disp.data());
    let mut out = vec![0.0; sd.len()];
    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            let (x0, x1, f, _) = tap(x as f64 - scale * dd[row + x], w);
            let o = (row + x) * c;
            let (a, b) = ((row + x0) * c, (row + x1) * c);
            for ch in 0..c {
                out[o + ch] = (1.0 - f) * sd[a + ch] + f * sd[b + ch];
            }
        }
    }
    out
}

fn check_pair(src: &Tensor, disp: &Tensor) -> Result<(), TensorError> {
    match (src.shape(), disp.shape()) {
        ([h, w, _], [hd, wd]) if h == hd && w == wd => Ok(()),
        _ => Err(TensorError::ShapeMismatch {
            lhs: src.shape().to_vec(),
            rhs: disp.shape().to_vec(),
        }),
    }
}

/// Synthesizes the target view from `source` (`H x W x C`) and a disparity
/// map (`H x W`). Differentiable with respect to both.
pub fn warp(tape: &mut Tape, source: Var, disparity: Var, cam: &CameraModel) -> Result<Var, TensorError> {
    let (src, disp) = (tape.try_value(source)?, tape.try_value(disparity)?);
    check_pair(src, disp)?;
    let scale = cam.shift_scale();
    let value = Tensor::from_parts(src.shape().to_vec(), sample(src, disp, scale));
    tape.record(&[source, disparity], value, HorizontalSample { scale })
}

/// Tape-free [`warp`].
pub fn warp_image(source: &Tensor, disparity: &Tensor, cam: &CameraModel) -> Result<Tensor, TensorError> {
    check_pair(source, disparity)?;
    Ok(Tensor::from_parts(source.shape().to_vec(), sample(source, disparity, cam.shift_scale())))
}

/// Per-pixel SSIM (`H x W`), averaged over channels, 3x3 replicate-padded
/// windows, clamped to `[-1, 1]`.
pub fn ssim(tape: &mut Tape, a: Var, b: Var) -> Result<Var, TensorError> {
    let (ta, tb) = (tape.try_value(a)?, tape.try_value(b)?);
    if ta.shape() != tb.shape() || ta.rank() != 3 {
        return Err(TensorError::ShapeMismatch { lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
    }
    let mu_a = tape.mean_pool3(a)?;
    let mu_b = tape.mean_pool3(b)?;
    let aa = tape.square(a)?;
    let bb = tape.square(b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.mean_pool3(aa)?;
    let e_bb = tape.mean_pool3(bb)?;
    let e_ab = tape.mean_pool3(ab)?;
    let mu_aa = tape.square(mu_a)?;
    let mu_bb = tape.square(mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let lum_num = tape.mul_scalar(mu_ab, 2.0)?;
    let lum_num = tape.add_scalar(lum_num, SSIM_C1)?;
    let cs_num = tape.mul_scalar(cov, 2.0)?;
    let cs_num = tape.add_scalar(cs_num, SSIM_C2)?;
    let num = tape.mul(lum_num, cs_num)?;

    let lum_den = tape.add(mu_aa, mu_bb)?;
    let lum_den = tape.add_scalar(lum_den, SSIM_C1)?;
    let cs_den = tape.add(var_a, var_b)?;
    let cs_den = tape.add_scalar(cs_den, SSIM_C2)?;
    let den = tape.mul(lum_den, cs_den)?;

    let map = tape.div(num, den)?;
    let map = tape.clamp(map, -1.0, 1.0)?;
    tape.mean(map, &[2])
}

/// `mean(BETA_SSIM * (1 - SSIM) + BETA_L1 * |target - warped|)`.
pub fn photometric_loss(tape: &mut Tape, target: Var, warped: Var) -> Result<Var, TensorError> {
    let s = ssim(tape, target, warped)?;
    let mean_s = tape.mean_all(s)?;
    let dissim = tape.mul_scalar(mean_s, -BETA_SSIM)?;
    let dissim = tape.add_scalar(dissim, BETA_SSIM)?;
    let diff = tape.sub(target, warped)?;
    let l1 = tape.abs(diff)?;
    let l1 = tape.mean_all(l1)?;
    let l1 = tape.mul_scalar(l1, BETA_L1)?;
    tape.add(dissim, l1)
}

/// Photometric loss of `target` against `source` warped by `disparity`.
pub fn reconstruction_loss(
    tape: &mut Tape,
    target: Var,
    source: Var,
    disparity: Var,
    cam: &CameraModel,
) -> Result<Var, TensorError> {
    let warped = warp(tape, source, disparity, cam)?;
    photometric_loss(tape, target, warped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
        Tensor::from_fn(shape, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .unwrap()
    }

    fn cam(d_px: f64) -> CameraModel {
        CameraModel::new(100.0, (4.0, 4.0), 0.5, SourceSide::Right, d_px).unwrap()
    }

    #[test]
    fn camera_validation() {
        assert_eq!(
            CameraModel::new(0.0, (0.0, 0.0), 0.5, SourceSide::Right, 1.0),
            Err(CameraError::Focal(0.0))
        );
        assert!(CameraModel::new(1.0, (0.0, 0.0), -0.5, SourceSide::Right, 1.0).is_err());
        assert!(CameraModel::new(1.0, (0.0, 0.0), 0.5, SourceSide::Left, 0.0).is_err());
    }

    #[test]
    fn depth_conversion() {
        let c = cam(50.0);
        let ones = Tensor::full(&[2, 3], 1.0);
        let r = disparity_to_depth(&ones, &c);
        assert!(r.depth.data().iter().all(|&d| (d - 1.0).abs() < 1e-15));
        assert_eq!(r.clamped, 0);
        let halves = Tensor::full(&[2, 3], 0.5);
        let r2 = disparity_to_depth(&halves, &c);
        assert!(r2.depth.data().iter().all(|&d| (d - 2.0).abs() < 1e-15));
        let tiny = Tensor::new([2], vec![0.0, 1e-6]).unwrap();
        let r3 = disparity_to_depth(&tiny, &c);
        assert_eq!(r3.clamped, 2);
        assert_eq!(r3.depth.data()[0], c.depth_of(DISPARITY_FLOOR));
    }

    #[test]
    fn zero_disparity_is_bit_identical() {
        let src = noise(&[7, 9, 3], 1);
        let d = Tensor::zeros(&[7, 9]);
        for side in [SourceSide::Left, SourceSide::Right] {
            let c = CameraModel { source_side: side, ..cam(13.0) };
            assert_eq!(warp_image(&src, &d, &c).unwrap(), src);
        }
    }

    #[test]
    fn constant_disparity_shifts_columns() {
        let (h, w) = (3, 10);
        let column = |x: usize| 0.05 + 0.09 * x as f64;
        let src = Tensor::from_fn(&[h, w, 1], |i| column(i % w)).unwrap();
        let c = cam(8.0);
        let k = 0.25; // 2 px
        let out = warp_image(&src, &Tensor::full(&[h, w], k), &c).unwrap();
        for y in 0..h {
            for x in 0..w {
                let xs = (x as f64 - k * 8.0).max(0.0) as usize;
                assert!((out.data()[y * w + x] - column(xs)).abs() < 1e-12);
            }
        }
        // Fractional shift: linear interpolation of a linear ramp stays on it.
        let out = warp_image(&src, &Tensor::full(&[h, w], 0.1875), &c).unwrap(); // 1.5 px
        for x in 2..w {
            let want = 0.05 + 0.09 * (x as f64 - 1.5);
            assert!((out.data()[x] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let src = noise(&[4, 4, 1], 2);
        assert!(warp_image(&src, &Tensor::zeros(&[4, 5]), &cam(1.0)).is_err());
    }

    fn ssim_of(a: &Tensor, b: &Tensor) -> Tensor {
        let mut tp = Tape::new();
        let (av, bv) = (tp.constant(a.clone()), tp.constant(b.clone()));
        let s = ssim(&mut tp, av, bv).unwrap();
        tp.value(s).clone()
    }

    fn loss_of(a: &Tensor, b: &Tensor) -> f64 {
        let mut tp = Tape::new();
        let (av, bv) = (tp.constant(a.clone()), tp.constant(b.clone()));
        let l = photometric_loss(&mut tp, av, bv).unwrap();
        tp.value(l).item()
    }

    #[test]
    fn ssim_examples() {
        let a = noise(&[6, 6, 3], 3);
        let s = ssim_of(&a, &a);
        assert_eq!(s.shape(), &[6, 6]);
        assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let bin = Tensor::from_fn(&[6, 6, 1], |i| ((i / 3) % 2) as f64).unwrap();
        let inv = Tensor::from_fn(&[6, 6, 1], |i| 1.0 - bin.data()[i]).unwrap();
        assert!(ssim_of(&bin, &inv).data().iter().all(|&v| v <= 1.0));

        let s = ssim_of(&Tensor::full(&[4, 4, 1], 0.3), &Tensor::full(&[4, 4, 1], 0.7));
        let closed = (2.0 * 0.3 * 0.7 + SSIM_C1) / (0.09 + 0.49 + SSIM_C1);
        assert!((closed - 0.7241).abs() < 1e-4);
        assert!(s.data().iter().all(|&v| (v - closed).abs() < 1e-12));
    }

    #[test]
    fn photometric_examples() {
        let a = noise(&[5, 5, 3], 4);
        assert!(loss_of(&a, &a).abs() < 1e-12);

        let x = Tensor::full(&[4, 4, 1], 0.4);
        let y = Tensor::full(&[4, 4, 1], 0.5);
        let lum = (2.0 * 0.4 * 0.5 + SSIM_C1) / (0.16 + 0.25 + SSIM_C1);
        let want = BETA_SSIM * (1.0 - lum) + 0.015;
        assert!((loss_of(&x, &y) - want).abs() < 1e-12);
        assert!((loss_of(&y, &x) - want).abs() < 1e-12);
    }

    #[test]
    fn photometric_nonnegative() {
        for seed in 0..20 {
            let a = noise(&[6, 5, 2], seed);
            let b = noise(&[6, 5, 2], seed + 100);
            assert!(loss_of(&a, &b) > 0.0);
        }
    }

    #[test]
    fn photometric_gradient_wrt_disparity() {
        let target = noise(&[8, 8, 3], 5);
        let source = noise(&[8, 8, 3], 6);
        let d = Tensor::from_fn(&[8, 8], |i| 0.1 + 0.8 * noise(&[64], 7).data()[i]).unwrap();
        let c = cam(2.0);
        let err = gradcheck(
            |tp, d| {
                let t = tp.constant(target.clone());
                let s = tp.constant(source.clone());
                reconstruction_loss(tp, t, s, d, &c)
            },
            &d,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn warp_gradient_wrt_source() {
        let source = noise(&[4, 6, 2], 8);
        let d = Tensor::from_fn(&[4, 6], |i| 0.13 + 0.05 * (i % 5) as f64).unwrap();
        let c = cam(3.0);
        let err = gradcheck(
            |tp, s| {
                let dv = tp.constant(d.clone());
                let w = warp(tp, s, dv, &c)?;
                let w2 = tp.square(w)?;
                tp.sum_all(w2)
            },
            &source,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
