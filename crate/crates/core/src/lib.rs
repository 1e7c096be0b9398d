//! Contrastive training of tiny self-supervised disparity networks against
//! historical snapshots of their own weights.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numerical piece
//! of the pipeline: a reverse-mode tape over dense `f64` tensors, rectified
//! stereo view synthesis with SSIM supervision, Gaussian soft binning of
//! disparity maps with a Jensen-Shannon divergence, the margin-scheduled
//! contrastive loss, the queue of historical model snapshots, the procedural
//! weather scene generator, the disparity network and the training step.
//!
//! File formats, the run driver and the command line live in the `secdepth`
//! crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod math;

pub mod distbin;
pub mod geom;
pub mod latencyq;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod secloss;
pub mod tensor;
pub mod train;
pub mod weather;

pub use distbin::{js_divergence, soft_bin, BinSpec, DepthDistribution};
pub use geom::{disparity_to_depth, photometric_loss, ssim, warp, CameraModel};
pub use latencyq::{LatencyQueue, ModelSnapshot, UpdateReason};
pub use metrics::MetricsRecord;
pub use model::DepthNet;
pub use secloss::{sec_loss, ContrastiveVariant, ScheduleState, TripletBatch};
pub use tensor::{Tape, Tensor, TensorError, Var};
pub use train::{TrainConfig, Trainer};
pub use weather::{SceneSample, WeatherKind, WeatherParams};
