//! Training checkpoints.
//!
//! Layout: magic `SECD`, one version byte, then five sections in fixed order.
//! Each section is a 4-byte tag, a `u64` payload length and the payload; all
//! integers and floats are little-endian.
//!
//! ```text
//! MODL  fingerprint u64, params (u64 count + f64 values)
//! OPTM  t u64, lr beta1 beta2 eps f64, m (count + values), v (count + values)
//! QUEU  cursor u64, omega f64, interval u64, update_count u64, slot count u64,
//!       then per slot: fingerprint u64, params (count + values)
//! SCHD  step u64, epoch u64, total_steps u64, sha256 of the TrainConfig JSON
//! RNG_  seed [u8; 32], stream u64, word_pos u128
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use secdepth_core::latencyq::LatencyQueue;
use secdepth_core::model::{self, PARAM_COUNT};
use secdepth_core::optim::{Adam, AdamConfig};
use secdepth_core::train::{RngState, TrainerState};
use secdepth_core::{ModelSnapshot, TrainConfig};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::binio::{DecodeError, Reader, Writer};

pub const MAGIC: &[u8; 4] = b"SECD";
pub const VERSION: u8 = 1;
const SECTIONS: [&[u8; 4]; 5] = [b"MODL", b"OPTM", b"QUEU", b"SCHD", b"RNG_"];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    Magic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u8 },
    #[error("expected section {expected}, found {found}")]
    Section { expected: String, found: String },
    #[error("model fingerprint {found:#018x} does not match this build ({expected:#018x})")]
    Fingerprint { expected: u64, found: u64 },
    #[error("{what}: expected {expected} values, found {found}")]
    Count { what: &'static str, expected: usize, found: usize },
    #[error("checkpoint was written for a different training configuration")]
    ConfigMismatch,
    #[error("corrupt checkpoint: {0}")]
    Decode(#[from] DecodeError),
    #[error("invalid queue state: {0}")]
    Queue(#[from] secdepth_core::latencyq::QueueError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Everything a checkpoint restores.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainerState,
    pub epoch: u64,
    pub total_steps: u64,
    pub config_hash: [u8; 32],
}

pub fn config_hash(config: &TrainConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).into()
}

impl Checkpoint {
    pub fn new(state: TrainerState, config: &TrainConfig) -> Self {
        let epoch = state.step.saturating_sub(1) / config.steps_per_epoch.max(1);
        Self { state, epoch, total_steps: config.total_steps(), config_hash: config_hash(config) }
    }

    /// Errors unless this checkpoint was written for `config`.
    pub fn check_config(&self, config: &TrainConfig) -> Result<(), CheckpointError> {
        if self.config_hash != config_hash(config) {
            return Err(CheckpointError::ConfigMismatch);
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let s = &self.state;
        let mut out = Writer::new();
        out.bytes(MAGIC).u8(VERSION);
        let section = |out: &mut Writer, tag: &[u8; 4], body: Writer| {
            let body = body.into_inner();
            out.bytes(tag).u64(body.len() as u64).bytes(&body);
        };

        let mut w = Writer::new();
        w.u64(model::fingerprint()).f64s(&s.params);
        section(&mut out, SECTIONS[0], w);

        let mut w = Writer::new();
        let AdamConfig { lr, beta1, beta2, eps } = s.optimizer.config;
        w.u64(s.optimizer.t).f64(lr).f64(beta1).f64(beta2).f64(eps).f64s(&s.optimizer.m).f64s(&s.optimizer.v);
        section(&mut out, SECTIONS[1], w);

        let mut w = Writer::new();
        let q = &s.queue;
        w.u64(q.cursor() as u64).f64(q.omega()).u64(q.interval()).u64(q.update_count()).u64(q.len() as u64);
        for slot in q.slots() {
            w.u64(slot.fingerprint).f64s(&slot.params);
        }
        section(&mut out, SECTIONS[2], w);

        let mut w = Writer::new();
        w.u64(s.step).u64(self.epoch).u64(self.total_steps).bytes(&self.config_hash);
        section(&mut out, SECTIONS[3], w);

        let mut w = Writer::new();
        w.bytes(&s.rng.seed).u64(s.rng.stream).u128(s.rng.word_pos);
        section(&mut out, SECTIONS[4], w);

        out.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes);
        if r.take(4).map_err(|_| CheckpointError::Magic)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let mut bodies = Vec::with_capacity(SECTIONS.len());
        for tag in SECTIONS {
            let found = r.take(4)?;
            if found != tag {
                return Err(CheckpointError::Section {
                    expected: String::from_utf8_lossy(tag).into(),
                    found: String::from_utf8_lossy(found).into(),
                });
            }
            let n = r.usize()?;
            bodies.push(r.take(n)?);
        }
        r.finish()?;
        let fp = model::fingerprint();
        let counted = |what, v: Vec<f64>| {
            if v.len() == PARAM_COUNT {
                Ok(v)
            } else {
                Err(CheckpointError::Count { what, expected: PARAM_COUNT, found: v.len() })
            }
        };
        let check_fp = |found| if found == fp { Ok(()) } else { Err(CheckpointError::Fingerprint { expected: fp, found }) };

        let mut r = Reader::new(bodies[0]);
        check_fp(r.u64()?)?;
        let params = counted("model parameters", r.f64s()?)?;
        r.finish()?;

        let mut r = Reader::new(bodies[1]);
        let t = r.u64()?;
        let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let m = counted("optimizer first moments", r.f64s()?)?;
        let v = counted("optimizer second moments", r.f64s()?)?;
        r.finish()?;
        let optimizer = Adam { config, m, v, t };

        let mut r = Reader::new(bodies[2]);
        let (cursor, omega, interval, update_count) = (r.usize()?, r.f64()?, r.u64()?, r.u64()?);
        let n = r.usize()?;
        let mut slots = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let fingerprint = r.u64()?;
            check_fp(fingerprint)?;
            slots.push(ModelSnapshot { fingerprint, params: counted("queue slot parameters", r.f64s()?)? });
        }
        r.finish()?;
        let queue = LatencyQueue::restore(slots, cursor, omega, interval, update_count)?;

        let mut r = Reader::new(bodies[3]);
        let (step, epoch, total_steps, config_hash) = (r.u64()?, r.u64()?, r.u64()?, r.bytes32()?);
        r.finish()?;

        let mut r = Reader::new(bodies[4]);
        let rng = RngState { seed: r.bytes32()?, stream: r.u64()?, word_pos: r.u128()? };
        r.finish()?;

        Ok(Self { state: TrainerState { step, params, optimizer, queue, rng }, epoch, total_steps, config_hash })
    }

    /// Writes to a sibling temporary file, syncs it, then renames over `path`
    /// so readers never observe a partial checkpoint.
    pub fn save_atomic(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("secd.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&fs::read(path)?)
    }
}
