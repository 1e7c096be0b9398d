//! Procedural rectified stereo scenes with exact disparity, plus seeded
//! weather degradations.
//!
//! A scene is a textured background plane with 3 to 8 fronto-parallel
//! textured rectangles in front of it. Textures are continuous functions of
//! target-view coordinates, so the source view is rendered by casting every
//! source pixel back into the target frame of each layer.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distbin::BinSpec;
use crate::geom::{disparity_to_depth, CameraModel};
use crate::math;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const MIN_SIDE: usize = 16;
/// Texture lattice spacing in pixels is `TEXTURE_CELL + TEXTURE_CELL_GAIN *
/// disparity`: nearer surfaces show coarser texture.
pub const TEXTURE_CELL: f64 = 4.0;
pub const TEXTURE_CELL_GAIN: f64 = 12.0;
/// Layer disparity ranges.
pub const BACKGROUND_DISPARITY: (f64, f64) = (0.1, 0.2);
pub const OBJECT_DISPARITY: (f64, f64) = (0.2, 0.6);
const TEXTURE_AMPLITUDE: f64 = 0.7;
/// Minimum number of occupied bins (of [`LAYOUT_BINS`]) in a layout.
pub const MIN_OCCUPIED_BINS: usize = 4;
pub const LAYOUT_BINS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherKind {
    Fog,
    Rain,
    Snow,
}

impl WeatherKind {
    pub const ALL: [WeatherKind; 3] = [WeatherKind::Fog, WeatherKind::Rain, WeatherKind::Snow];

    pub fn name(self) -> &'static str {
        match self {
            WeatherKind::Fog => "fog",
            WeatherKind::Rain => "rain",
            WeatherKind::Snow => "snow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherDescriptor {
    pub kind: WeatherKind,
    pub severity: f64,
}

/// Magnitudes of every degradation operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherParams {
    /// Attenuation per unit depth.
    pub fog_beta: f64,
    pub fog_airlight: f64,
    pub rain_streaks: usize,
    pub rain_length: f64,
    pub rain_intensity: f64,
    pub snow_blobs: usize,
    pub snow_radius: f64,
    pub snow_brightness: f64,
}

impl WeatherParams {
    pub const IDENTITY: Self = Self {
        fog_beta: 0.0,
        fog_airlight: 0.8,
        rain_streaks: 0,
        rain_length: 0.0,
        rain_intensity: 0.0,
        snow_blobs: 0,
        snow_radius: 0.0,
        snow_brightness: 0.0,
    };

    /// Monotone map from `severity` in `[0, 1]` to magnitudes, scaled to a
    /// frame of `h x w` pixels. Severity 0 is the identity.
    pub fn for_severity(severity: f64, h: usize, w: usize) -> Self {
        let s = severity.clamp(0.0, 1.0);
        let area = (h * w) as f64 / (64.0 * 128.0);
        let side = math::sqrt((h * w) as f64) / math::sqrt(64.0 * 128.0);
        Self {
            fog_beta: 0.08 * s,
            fog_airlight: 0.8,
            rain_streaks: (s * 160.0 * area) as usize,
            rain_length: 4.0 + 10.0 * s * side,
            rain_intensity: 0.6 * s,
            snow_blobs: (s * 60.0 * area) as usize,
            snow_radius: 1.0 + 1.5 * s * side,
            snow_brightness: 0.9 * s,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.fog_beta, self.rain_length, self.rain_intensity, self.snow_radius, self.snow_brightness]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && (0.0..=1.0).contains(&self.fog_airlight)
    }
}

/// Extra augmentation applied to degraded samples only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub erase_prob: f64,
    /// Side of the erased rectangle as a fraction of the frame side.
    pub erase_frac: (f64, f64),
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { erase_prob: 0.5, erase_frac: (0.1, 0.3), blur_prob: 0.5, blur_sigma: (0.5, 1.5) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentLog {
    /// `(y, x, h, w)` of the erased rectangle and its fill value.
    pub erased: Option<((usize, usize, usize, usize), f64)>,
    pub blur_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    /// Target view `I`, `H x W x 3`.
    pub target: Tensor,
    /// Source view `I'`, `H x W x 3`.
    pub source: Tensor,
    /// Ground-truth normalized disparity, `H x W`.
    pub disparity: Tensor,
    /// Target pixels whose bilinear source taps see the same surface.
    pub visible: Vec<bool>,
    pub augmented: Option<Tensor>,
    pub weather: Option<WeatherDescriptor>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.target.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.target.shape()[1]
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, ch: usize) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64) ^ splitmix((iy as u64) ^ splitmix(ch as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

fn smooth(t: f64) -> f64 {
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

/// Band-limited value noise in `[-0.5, 0.5]`, continuous in `(x, y)`.
fn value_noise(seed: u64, cell: f64, x: f64, y: f64, ch: usize) -> f64 {
    let (u, v) = (x / cell, y / cell);
    let (fx, fy) = (math::floor(u), math::floor(v));
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (smooth(u - fx), smooth(v - fy));
    let a = lattice(seed, ix, iy, ch);
    let b = lattice(seed, ix + 1, iy, ch);
    let c = lattice(seed, ix, iy + 1, ch);
    let d = lattice(seed, ix + 1, iy + 1, ch);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    /// Target-view rectangle `[x0, x1) x [y0, y1)`; the background is
    /// unbounded.
    rect: Option<(f64, f64, f64, f64)>,
    disparity: f64,
    base: [f64; 3],
    /// Horizontal and vertical colour gradient per unit of frame size.
    slope: (f64, f64),
    texture_seed: u64,
}

impl Layer {
    fn covers(&self, x: f64, y: f64) -> bool {
        match self.rect {
            None => true,
            Some((x0, x1, y0, y1)) => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }

    fn colour(&self, x: f64, y: f64, w: f64, h: f64, ch: usize) -> f64 {
        let grad = self.slope.0 * (x / w - 0.5) + self.slope.1 * (y / h - 0.5);
        let cell = TEXTURE_CELL + TEXTURE_CELL_GAIN * self.disparity;
        (self.base[ch] + grad + TEXTURE_AMPLITUDE * value_noise(self.texture_seed, cell, x, y, ch)).clamp(0.0, 1.0)
    }
}

struct Layout {
    /// Sorted far to near; index 0 is the background.
    layers: Vec<Layer>,
}

impl Layout {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let mut base = || [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
        let bg_base = base();
        let mut layers = vec![Layer {
            rect: None,
            disparity: 0.0,
            base: bg_base,
            slope: (0.0, 0.0),
            texture_seed: 0,
        }];
        layers[0].disparity = rng.gen_range(BACKGROUND_DISPARITY.0..BACKGROUND_DISPARITY.1);
        layers[0].slope = (rng.gen_range(-0.2..0.2), rng.gen_range(-0.3..0.3));
        layers[0].texture_seed = rng.gen();
        let count = rng.gen_range(3..=8);
        for _ in 0..count {
            // Apparent size grows with nearness.
            let d = rng.gen_range(OBJECT_DISPARITY.0..OBJECT_DISPARITY.1);
            let rw = wf * (0.08 + 0.4 * d) * rng.gen_range(0.8..1.2);
            let rh = hf * (0.15 + 0.5 * d) * rng.gen_range(0.8..1.2);
            let x0 = rng.gen_range(-rw / 4.0..wf - rw * 0.75);
            let y0 = rng.gen_range(-rh / 4.0..hf - rh * 0.75);
            let b = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
            layers.push(Layer {
                rect: Some((x0, x0 + rw, y0, y0 + rh)),
                disparity: d,
                base: b,
                slope: (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)),
                texture_seed: rng.gen(),
            });
        }
        layers[1..].sort_by(|a, b| a.disparity.total_cmp(&b.disparity));
        Self { layers }
    }

    /// Index of the frontmost layer seen at target coordinates `(x, y)`.
    fn target_hit(&self, x: f64, y: f64) -> usize {
        (0..self.layers.len()).rev().find(|&i| self.layers[i].covers(x, y)).unwrap_or(0)
    }

    /// Frontmost layer seen at source coordinates, with the target-frame
    /// abscissa it maps to.
    fn source_hit(&self, xs: f64, y: f64, shift: f64) -> (usize, f64) {
        for i in (0..self.layers.len()).rev() {
            let xt = xs + shift * self.layers[i].disparity;
            if self.layers[i].covers(xt, y) {
                return (i, xt);
            }
        }
        (0, xs + shift * self.layers[0].disparity)
    }
}

/// Noise-free stereo pair with exact disparity. Layouts that occupy fewer
/// than [`MIN_OCCUPIED_BINS`] disparity bins are redrawn from the same
/// stream.
pub fn generate_scene(seed: u64, h: usize, w: usize, cam: &CameraModel) -> SceneSample {
    assert!(h >= MIN_SIDE && w >= MIN_SIDE, "scene must be at least {MIN_SIDE}x{MIN_SIDE}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = BinSpec::new(LAYOUT_BINS);
    loop {
        let layout = Layout::random(&mut rng, h, w);
        let sample = render(seed, &layout, h, w, cam);
        if occupied_bins(&sample.disparity, &spec) >= MIN_OCCUPIED_BINS {
            return sample;
        }
    }
}

/// Bins of `spec` holding at least one pixel under hard assignment.
pub fn occupied_bins(disparity: &Tensor, spec: &BinSpec) -> usize {
    let n = spec.bins();
    let mut hit = vec![false; n];
    for &d in disparity.data() {
        hit[((d * n as f64) as usize).min(n - 1)] = true;
    }
    hit.iter().filter(|&&b| b).count()
}

fn render(seed: u64, layout: &Layout, h: usize, w: usize, cam: &CameraModel) -> SceneSample {
    let (hf, wf) = (h as f64, w as f64);
    let shift = cam.shift_scale();
    let mut target = Vec::with_capacity(h * w * CHANNELS);
    let mut disparity = Vec::with_capacity(h * w);
    let mut target_layer = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let i = layout.target_hit(xf, yf);
            let l = &layout.layers[i];
            target.extend((0..CHANNELS).map(|c| l.colour(xf, yf, wf, hf, c)));
            disparity.push(l.disparity);
            target_layer.push(i);
        }
    }
    let mut source = Vec::with_capacity(h * w * CHANNELS);
    let mut source_layer = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let yf = y as f64;
            let (i, xt) = layout.source_hit(x as f64, yf, shift);
            let l = &layout.layers[i];
            source.extend((0..CHANNELS).map(|c| l.colour(xt, yf, wf, hf, c)));
            source_layer.push(i);
        }
    }
    let mut visible = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let xs = x as f64 - shift * disparity[p];
            let ok = xs >= 0.0 && xs <= (w - 1) as f64 && {
                let x0 = math::floor(xs) as usize;
                let x1 = (x0 + 1).min(w - 1);
                source_layer[y * w + x0] == target_layer[p] && source_layer[y * w + x1] == target_layer[p]
            };
            visible.push(ok);
        }
    }
    SceneSample {
        seed,
        target: Tensor::from_parts(vec![h, w, CHANNELS], target),
        source: Tensor::from_parts(vec![h, w, CHANNELS], source),
        disparity: Tensor::from_parts(vec![h, w], disparity),
        visible,
        augmented: None,
        weather: None,
    }
}

fn clip(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// `I e^{-beta z} + A (1 - e^{-beta z})` per pixel, clipped to `[0, 1]`.
pub fn apply_fog(image: &Tensor, depth: &Tensor, beta: f64, airlight: f64) -> Tensor {
    let c = image.shape()[2];
    let data = image
        .data()
        .chunks_exact(c)
        .zip(depth.data())
        .flat_map(|(px, &z)| {
            let t = math::exp(-beta * z);
            px.iter().map(move |&v| clip(v * t + airlight * (1.0 - t)))
        })
        .collect();
    Tensor::from_parts(image.shape().to_vec(), data)
}

fn shape3(image: &Tensor) -> (usize, usize, usize) {
    let s = image.shape();
    (s[0], s[1], s[2])
}

/// Pixels touched by the rain streaks of `params` under `seed`, in stamp
/// order (repeats allowed).
pub fn rain_stamps(h: usize, w: usize, params: &WeatherParams, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slant: f64 = rng.gen_range(0.2..0.5);
    let norm = math::sqrt(1.0 + slant * slant);
    let (dx, dy) = (slant / norm, 1.0 / norm);
    let len = params.rain_length.max(0.0) as usize;
    let mut out = Vec::new();
    for _ in 0..params.rain_streaks {
        let x0: f64 = rng.gen_range(-(len as f64)..w as f64);
        let y0: f64 = rng.gen_range(-(len as f64)..h as f64);
        for s in 0..len {
            let x = math::floor(x0 + dx * s as f64 + 0.5);
            let y = math::floor(y0 + dy * s as f64 + 0.5);
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                out.push(y as usize * w + x as usize);
            }
        }
    }
    out
}

/// Streak colour blended into stamped pixels.
pub const RAIN_TONE: f64 = 0.9;

/// Semi-transparent diagonal streaks.
pub fn apply_rain(image: &Tensor, params: &WeatherParams, seed: u64) -> Tensor {
    let (h, w, c) = shape3(image);
    let mut data = image.data().to_vec();
    let k = params.rain_intensity.clamp(0.0, 1.0);
    for p in rain_stamps(h, w, params, seed) {
        for v in &mut data[p * c..(p + 1) * c] {
            *v = clip(*v * (1.0 - k) + k * RAIN_TONE);
        }
    }
    Tensor::from_parts(image.shape().to_vec(), data)
}

/// Additive bright Gaussian blobs. Blob `k` depends only on `seed` and `k`,
/// so raising the count only adds light.
pub fn apply_snow(image: &Tensor, params: &WeatherParams, seed: u64) -> Tensor {
    let (h, w, c) = shape3(image);
    let mut data = image.data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..params.snow_blobs {
        let cx: f64 = rng.gen_range(0.0..w as f64);
        let cy: f64 = rng.gen_range(0.0..h as f64);
        let r = params.snow_radius * rng.gen_range(0.5..1.5);
        if r <= 0.0 {
            continue;
        }
        let reach = 3.0 * r;
        let (ylo, yhi) = ((cy - reach).max(0.0) as usize, ((cy + reach) as usize).min(h - 1));
        let (xlo, xhi) = ((cx - reach).max(0.0) as usize, ((cx + reach) as usize).min(w - 1));
        for y in ylo..=yhi {
            for x in xlo..=xhi {
                let (ddx, ddy) = (x as f64 - cx, y as f64 - cy);
                let g = params.snow_brightness * math::exp(-(ddx * ddx + ddy * ddy) / (2.0 * r * r));
                let p = (y * w + x) * c;
                for v in &mut data[p..p + c] {
                    *v = clip(*v + g);
                }
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), data)
}

/// Degrades `sample.target` into `sample.augmented`.
pub fn degrade(sample: &mut SceneSample, kind: WeatherKind, severity: f64, seed: u64, cam: &CameraModel) {
    let (h, w) = (sample.height(), sample.width());
    let params = WeatherParams::for_severity(severity, h, w);
    let img = &sample.target;
    let out = match kind {
        WeatherKind::Fog => {
            let depth = disparity_to_depth(&sample.disparity, cam).depth;
            apply_fog(img, &depth, params.fog_beta, params.fog_airlight)
        }
        WeatherKind::Rain => apply_rain(img, &params, seed),
        WeatherKind::Snow => apply_snow(img, &params, seed),
    };
    sample.augmented = Some(out);
    sample.weather = Some(WeatherDescriptor { kind, severity });
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = math::ceil(3.0 * sigma) as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur with replicate borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    let (h, w, c) = shape3(image);
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as i64;
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for (k, &t) in taps.iter().enumerate() {
                let xs = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                for ch in 0..c {
                    tmp[(y * w + x) * c + ch] += t * src[(y * w + xs) * c + ch];
                }
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for (k, &t) in taps.iter().enumerate() {
            let ys = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
            for x in 0..w {
                for ch in 0..c {
                    out[(y * w + x) * c + ch] += t * tmp[(ys * w + x) * c + ch];
                }
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

/// Random erasing (fill = image mean) and random Gaussian blur, each with
/// its configured probability.
pub fn extra_augment(image: &Tensor, cfg: &AugmentConfig, seed: u64) -> (Tensor, AugmentLog) {
    let (h, w, c) = shape3(image);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let do_erase = rng.gen_bool(cfg.erase_prob.clamp(0.0, 1.0));
    let do_blur = rng.gen_bool(cfg.blur_prob.clamp(0.0, 1.0));
    let mut log = AugmentLog::default();
    let mut out = image.clone();
    if do_erase {
        let (lo, hi) = cfg.erase_frac;
        let eh = ((rng.gen_range(lo..=hi) * h as f64) as usize).clamp(1, h);
        let ew = ((rng.gen_range(lo..=hi) * w as f64) as usize).clamp(1, w);
        let y0 = rng.gen_range(0..=h - eh);
        let x0 = rng.gen_range(0..=w - ew);
        let fill = out.data().iter().sum::<f64>() / out.len() as f64;
        let mut data = out.into_data();
        for y in y0..y0 + eh {
            for v in &mut data[(y * w + x0) * c..(y * w + x0 + ew) * c] {
                *v = fill;
            }
        }
        out = Tensor::from_parts(vec![h, w, c], data);
        log.erased = Some(((y0, x0, eh, ew), fill));
    }
    if do_blur {
        let (lo, hi) = cfg.blur_sigma;
        let sigma = rng.gen_range(lo..=hi);
        out = gaussian_blur(&out, sigma);
        log.blur_sigma = Some(sigma);
    }
    (out, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::warp_image;

    fn cam() -> CameraModel {
        CameraModel::for_frame(64, 128)
    }

    fn mean(t: &Tensor) -> f64 {
        t.data().iter().sum::<f64>() / t.len() as f64
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = generate_scene(5, 32, 64, &CameraModel::for_frame(32, 64));
        let b = generate_scene(5, 32, 64, &CameraModel::for_frame(32, 64));
        assert_eq!(a, b);
        let c = generate_scene(6, 32, 64, &CameraModel::for_frame(32, 64));
        assert_ne!(a.target, c.target);
    }

    #[test]
    fn ranges() {
        let s = generate_scene(1, 64, 128, &cam());
        assert!(s.target.data().iter().chain(s.source.data()).all(|v| (0.0..=1.0).contains(v)));
        assert!(s.disparity.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn warp_reconstructs_target_on_visible_pixels() {
        for seed in 0..20 {
            let s = generate_scene(seed, 64, 128, &cam());
            let rec = warp_image(&s.source, &s.disparity, &cam()).unwrap();
            let (mut err, mut n) = (0.0, 0usize);
            for (p, &vis) in s.visible.iter().enumerate() {
                if vis {
                    for c in 0..CHANNELS {
                        err += (rec.data()[p * 3 + c] - s.target.data()[p * 3 + c]).abs();
                    }
                    n += 3;
                }
            }
            assert!(n > s.visible.len(), "seed {seed}: too few visible pixels");
            let mae = err / n as f64;
            assert!(mae < 0.02, "seed {seed}: {mae}");
        }
    }

    #[test]
    fn layouts_span_several_bins() {
        let spec = BinSpec::new(LAYOUT_BINS);
        for seed in 0..100 {
            let s = generate_scene(seed, 64, 128, &cam());
            assert!(occupied_bins(&s.disparity, &spec) >= MIN_OCCUPIED_BINS, "seed {seed}");
        }
    }

    fn image(seed: u64) -> Tensor {
        generate_scene(seed, 32, 64, &CameraModel::for_frame(32, 64)).target
    }

    #[test]
    fn fog_examples() {
        let img = image(3);
        let depth = Tensor::full(&[32, 64], 10.0);
        assert_eq!(apply_fog(&img, &depth, 0.0, 0.8), img);
        let whiteout = apply_fog(&img, &depth, 1e3, 0.8);
        assert!(whiteout.data().iter().all(|&v| (v - 0.8).abs() < 1e-12));
        let one = Tensor::new([1, 1, 1], vec![1.0]).unwrap();
        let z = Tensor::new([1, 1], vec![core::f64::consts::LN_2]).unwrap();
        assert!((apply_fog(&one, &z, 1.0, 0.0).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rain_is_local_and_seeded() {
        let img = image(4);
        let p = WeatherParams::for_severity(0.8, 32, 64);
        let out = apply_rain(&img, &p, 9);
        assert_eq!(out, apply_rain(&img, &p, 9));
        let mut stamped = vec![false; 32 * 64];
        for s in rain_stamps(32, 64, &p, 9) {
            stamped[s] = true;
        }
        assert!(stamped.iter().any(|&b| b));
        for (i, &st) in stamped.iter().enumerate() {
            if !st {
                assert_eq!(&out.data()[i * 3..i * 3 + 3], &img.data()[i * 3..i * 3 + 3]);
            }
        }
        let none = WeatherParams { rain_streaks: 0, ..p };
        assert_eq!(apply_rain(&img, &none, 9), img);
    }

    #[test]
    fn snow_brightens_monotonically() {
        let base = WeatherParams::for_severity(0.7, 32, 64);
        let counts = [0usize, 5, 10, 20, 40];
        let mut means = vec![0.0; counts.len()];
        for seed in 0..50 {
            let img = image(seed);
            for (m, &n) in means.iter_mut().zip(&counts) {
                *m += mean(&apply_snow(&img, &WeatherParams { snow_blobs: n, ..base }, seed));
            }
        }
        assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
        let img = image(1);
        assert_eq!(apply_snow(&img, &WeatherParams { snow_blobs: 0, ..base }, 3), img);
    }

    #[test]
    fn zero_severity_is_identity() {
        let c = CameraModel::for_frame(32, 64);
        for kind in WeatherKind::ALL {
            let mut s = generate_scene(2, 32, 64, &c);
            degrade(&mut s, kind, 0.0, 11, &c);
            assert_eq!(s.augmented.as_ref().unwrap(), &s.target, "{kind:?}");
        }
        assert!(WeatherParams::for_severity(0.5, 64, 128).is_valid());
    }

    #[test]
    fn severity_is_monotone() {
        let mut prev = WeatherParams::for_severity(0.0, 64, 128);
        for i in 1..=10 {
            let p = WeatherParams::for_severity(i as f64 / 10.0, 64, 128);
            assert!(p.fog_beta >= prev.fog_beta && p.rain_streaks >= prev.rain_streaks);
            assert!(p.rain_intensity >= prev.rain_intensity && p.snow_blobs >= prev.snow_blobs);
            assert!(p.snow_brightness >= prev.snow_brightness && p.rain_length >= prev.rain_length);
            prev = p;
        }
    }

    #[test]
    fn degradation_leaves_ground_truth_alone() {
        let c = CameraModel::for_frame(32, 64);
        let clean = generate_scene(8, 32, 64, &c);
        for kind in WeatherKind::ALL {
            let mut s = clean.clone();
            degrade(&mut s, kind, 1.0, 4, &c);
            assert_eq!(s.disparity, clean.disparity);
            assert_eq!(s.target, clean.target);
            assert_ne!(s.augmented.as_ref().unwrap(), &clean.target);
        }
    }

    #[test]
    fn augment_identity_when_both_draws_fail() {
        let img = image(5);
        let off = AugmentConfig { erase_prob: 0.0, blur_prob: 0.0, ..AugmentConfig::default() };
        let (out, log) = extra_augment(&img, &off, 3);
        assert_eq!(out, img);
        assert_eq!(log, AugmentLog::default());
        // Some seed draws neither operator under the default probabilities.
        let seed = (0..64).find(|&s| extra_augment(&img, &AugmentConfig::default(), s).1 == AugmentLog::default());
        assert_eq!(extra_augment(&img, &AugmentConfig::default(), seed.unwrap()).0, img);
    }

    #[test]
    fn erased_region_holds_fill() {
        let img = image(6);
        let cfg = AugmentConfig { erase_prob: 1.0, blur_prob: 0.0, ..AugmentConfig::default() };
        let (out, log) = extra_augment(&img, &cfg, 1);
        let ((y0, x0, eh, ew), fill) = log.erased.unwrap();
        assert_eq!(fill, mean(&img));
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                assert!(out.data()[(y * 64 + x) * 3..(y * 64 + x) * 3 + 3].iter().all(|&v| v == fill));
            }
        }
    }

    #[test]
    fn blur_preserves_mean() {
        for seed in 0..5 {
            let img = image(seed);
            for sigma in [0.5, 1.0, 1.5] {
                assert!((mean(&gaussian_blur(&img, sigma)) - mean(&img)).abs() < 1e-3);
            }
        }
        let flat = Tensor::full(&[8, 8, 3], 0.4);
        assert!(gaussian_blur(&flat, 1.2).max_abs_diff(&flat) < 1e-15);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in WeatherKind::ALL {
            assert_eq!(WeatherKind::parse(k.name()), Some(k));
        }
        assert_eq!(WeatherKind::parse("hail"), None);
    }
}
