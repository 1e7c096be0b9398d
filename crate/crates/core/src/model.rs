//! Tiny convolutional encoder-decoder mapping an `H x W x 3` image to an
//! `H x W` disparity map in `(0, 1)`.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::latencyq::ModelSnapshot;
use crate::math;
use crate::tensor::{Padding, Tape, Tensor, TensorError, Var};

pub const INPUT_CHANNELS: usize = 3;
pub const LEAKY_SLOPE: f64 = 0.1;
/// Input sides must be multiples of the total downsampling factor.
pub const SIZE_MULTIPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub const KERNEL: usize = 3;

    pub const fn kernel_len(&self) -> usize {
        Self::KERNEL * Self::KERNEL * self.cin * self.cout
    }

    pub const fn param_len(&self) -> usize {
        self.kernel_len() + self.cout
    }
}

/// enc1, enc2 (down), enc3 (down), dec2 (after up + skip enc2), head (after up
/// + skip enc1).
pub const LAYERS: [LayerSpec; 5] = [
    LayerSpec { cin: INPUT_CHANNELS, cout: 8, stride: 1 },
    LayerSpec { cin: 8, cout: 16, stride: 2 },
    LayerSpec { cin: 16, cout: 16, stride: 2 },
    LayerSpec { cin: 32, cout: 8, stride: 1 },
    LayerSpec { cin: 16, cout: 1, stride: 1 },
];

pub const PARAM_COUNT: usize = {
    let mut n = 0;
    let mut i = 0;
    while i < LAYERS.len() {
        n += LAYERS[i].param_len();
        i += 1;
    }
    n
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("spatial size {h}x{w} is not divisible by 4")]
    IndivisibleSize { h: usize, w: usize },
    #[error("expected an H x W x 3 image, got {0:?}")]
    BadInput(Vec<usize>),
    #[error("fingerprint {found:#018x} does not match {expected:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("expected {expected} parameters, got {found}")]
    ParamCount { expected: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// FNV-1a over the layer shapes.
pub fn fingerprint() -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for l in &LAYERS {
        for v in [LayerSpec::KERNEL, LayerSpec::KERNEL, l.cin, l.cout, l.stride] {
            for b in (v as u64).to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthNet {
    params: Vec<f64>,
}

/// Per-layer `(kernel, bias)` variables of a net recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundNet {
    layers: Vec<(Var, Var)>,
}

impl DepthNet {
    /// Fan-in scaled uniform kernels (leaky-ReLU gain), zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(PARAM_COUNT);
        let gain = math::sqrt(2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE));
        for l in &LAYERS {
            let fan_in = (LayerSpec::KERNEL * LayerSpec::KERNEL * l.cin) as f64;
            let bound = gain * math::sqrt(3.0 / fan_in);
            params.extend((0..l.kernel_len()).map(|_| rng.gen_range(-bound..bound)));
            params.extend(core::iter::repeat_n(0.0, l.cout));
        }
        Self { params }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self, ModelError> {
        if params.len() != PARAM_COUNT {
            return Err(ModelError::ParamCount { expected: PARAM_COUNT, found: params.len() });
        }
        crate::tensor::check_finite(&params)?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn export_snapshot(&self) -> ModelSnapshot {
        ModelSnapshot { fingerprint: fingerprint(), params: self.params.clone() }
    }

    pub fn import_snapshot(s: &ModelSnapshot) -> Result<Self, ModelError> {
        if s.fingerprint != fingerprint() {
            return Err(ModelError::FingerprintMismatch { expected: fingerprint(), found: s.fingerprint });
        }
        Self::from_params(s.params.clone())
    }

    /// Records the parameters on `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNet {
        let mut off = 0;
        let mut layers = Vec::with_capacity(LAYERS.len());
        for l in &LAYERS {
            let k = LayerSpec::KERNEL;
            let kernel = Tensor::from_parts(
                alloc::vec![k, k, l.cin, l.cout],
                self.params[off..off + l.kernel_len()].to_vec(),
            );
            off += l.kernel_len();
            let bias = Tensor::from_parts(alloc::vec![l.cout], self.params[off..off + l.cout].to_vec());
            off += l.cout;
            let (kv, bv) = if trainable {
                (tape.leaf(kernel), tape.leaf(bias))
            } else {
                (tape.constant(kernel), tape.constant(bias))
            };
            layers.push((kv, bv));
        }
        BoundNet { layers }
    }

    /// Disparity map (`H x W`) of an `H x W x 3` image.
    pub fn forward(tape: &mut Tape, net: &BoundNet, image: Var) -> Result<Var, ModelError> {
        let shape = tape.try_value(image)?.shape().to_vec();
        let [h, w, c] = shape[..] else { return Err(ModelError::BadInput(shape)) };
        if c != INPUT_CHANNELS {
            return Err(ModelError::BadInput(shape));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(ModelError::IndivisibleSize { h, w });
        }
        let conv = |tape: &mut Tape, x: Var, i: usize| -> Result<Var, TensorError> {
            let (k, b) = net.layers[i];
            let y = tape.conv2d(x, k, LAYERS[i].stride, Padding::replicate(1))?;
            tape.bias_add(y, b)
        };
        let act = |tape: &mut Tape, x: Var| tape.leaky_relu(x, LEAKY_SLOPE);

        let e1 = conv(tape, image, 0)?;
        let e1 = act(tape, e1)?;
        let e2 = conv(tape, e1, 1)?;
        let e2 = act(tape, e2)?;
        let e3 = conv(tape, e2, 2)?;
        let e3 = act(tape, e3)?;
        let u2 = tape.upsample2(e3)?;
        let d2 = tape.concat_channels(u2, e2)?;
        let d2 = conv(tape, d2, 3)?;
        let d2 = act(tape, d2)?;
        let u1 = tape.upsample2(d2)?;
        let d1 = tape.concat_channels(u1, e1)?;
        let logits = conv(tape, d1, 4)?;
        let out = tape.sigmoid(logits)?;
        Ok(tape.reshape(out, &[h, w])?)
    }

    /// Gradient-free forward pass.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let d = Self::forward(&mut tape, &bound, x)?;
        Ok(tape.value(d).clone())
    }

    /// Flat parameter gradient after `tape.backward`; zeros where absent.
    pub fn gradient(tape: &Tape, net: &BoundNet) -> Vec<f64> {
        let mut g = Vec::with_capacity(PARAM_COUNT);
        for (l, &(k, b)) in LAYERS.iter().zip(&net.layers) {
            for (v, n) in [(k, l.kernel_len()), (b, l.cout)] {
                match tape.grad(v) {
                    Some(t) => g.extend_from_slice(t.data()),
                    None => g.extend(core::iter::repeat_n(0.0, n)),
                }
            }
        }
        g
    }
}
