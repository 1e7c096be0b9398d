//! File formats, the training driver and the `secdepth` command line on top
//! of [`secdepth_core`].

pub mod binio;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod runner;
pub mod verify;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use dataset::{Dataset, SynthSpec, WeatherChoice};
pub use runner::{Run, RunManifest, RunOptions, RunOutcome};
