//! Training driver: output directory, metrics CSV, checkpoints and resume.
//!
//! An output directory holds `manifest.json`, `metrics.csv` and
//! `checkpoint.secd`. A run resumed from its checkpoint rewrites the CSV up
//! to the checkpoint step and then appends exactly the rows an uninterrupted
//! run would have written.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use secdepth_core::train::{StepReport, TrainError};
use secdepth_core::{MetricsRecord, Trainer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::dataset::{self, Dataset, DatasetError};
use crate::eval;

pub const CSV_HEADER: &str =
    "step,epoch,phase,L_ph,L_c,w,alpha1,queue_updates,AbsRel,SqRel,RMSE,RMSElog,a1,a2,a3";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.secd";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Setup(String),
    #[error("training failed at step {step}: {source}; last good checkpoint: {}", last_checkpoint.map_or("none".into(), |s| format!("step {s}")))]
    Train { step: u64, source: TrainError, last_checkpoint: Option<u64> },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Provenance written once per output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    /// Git-style sha256 of the training dataset's manifest file.
    pub dataset_manifest_sha256: String,
    pub eval_dataset_manifest_sha256: Option<String>,
    /// Seconds since the Unix epoch when the run directory was created.
    pub created_unix: u64,
}

impl RunManifest {
    /// Equal up to the creation time.
    fn same_run(&self, other: &Self) -> bool {
        Self { created_unix: 0, ..self.clone() } == Self { created_unix: 0, ..other.clone() }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stops after this global step, checkpointing first.
    pub stop_at: Option<u64>,
    pub created_unix: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Finished { steps: u64 },
    Stopped { steps: u64 },
}

pub fn csv_row(r: &StepReport, metrics: Option<&MetricsRecord>) -> String {
    let mut row = format!(
        "{},{},{},{},{},{},{},{}",
        r.step,
        r.epoch,
        r.phase.name(),
        r.l_ph,
        r.l_c,
        r.w,
        r.alpha1,
        r.queue_updates
    );
    match metrics {
        Some(m) => m.values().iter().for_each(|v| row.push_str(&format!(",{v}"))),
        None => row.push_str(&",".repeat(MetricsRecord::KEYS.len())),
    }
    row
}

/// Keeps the header and every row whose step is at most `step`.
fn truncate_csv(path: &Path, step: u64) -> Result<String, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(RunError::Setup(format!("{}: unexpected CSV header", path.display())));
    }
    let mut out = format!("{CSV_HEADER}\n");
    for line in lines {
        let s: u64 = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| RunError::Setup(format!("{}: malformed row {line:?}", path.display())))?;
        if s <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

pub struct Run {
    pub config: RunConfig,
    pub train: Dataset,
    pub eval: Option<Dataset>,
    pub manifest: RunManifest,
}

impl Run {
    pub fn prepare(config: RunConfig, created_unix: u64) -> Result<Self, RunError> {
        let train = dataset::load(&config.dataset)?;
        let eval = config.eval_dataset.as_deref().map(dataset::load).transpose()?;
        if let Some(e) = &eval {
            if e.camera() != train.camera() {
                return Err(RunError::Setup("train and eval datasets use different cameras".into()));
            }
        }
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            dataset_manifest_sha256: dataset::manifest_hash(&config.dataset)?,
            eval_dataset_manifest_sha256: config.eval_dataset.as_deref().map(dataset::manifest_hash).transpose()?,
            config,
            created_unix,
        };
        Ok(Self { config: manifest.config.clone(), train, eval, manifest })
    }

    fn metrics_due(&self, step: u64, last: u64) -> bool {
        self.eval.is_some() && (step == last || (self.config.eval_interval > 0 && step.is_multiple_of(self.config.eval_interval)))
    }

    pub fn execute(&self, out: &Path, opts: RunOptions) -> Result<RunOutcome, RunError> {
        fs::create_dir_all(out).map_err(io_err(out))?;
        let (csv_path, ckpt_path, man_path) =
            (out.join(METRICS_FILE), out.join(CHECKPOINT_FILE), out.join(MANIFEST_FILE));
        let cam = self.train.camera();
        let tc = self.config.train.clone();

        let (mut trainer, csv_text) = if opts.resume {
            let old: RunManifest = serde_json::from_str(&fs::read_to_string(&man_path).map_err(io_err(&man_path))?)
                .map_err(|e| RunError::Setup(format!("{}: {e}", man_path.display())))?;
            if !old.same_run(&self.manifest) {
                return Err(RunError::Setup(
                    "config or dataset differs from the run being resumed (compare manifest.json)".into(),
                ));
            }
            let ckpt = Checkpoint::load(&ckpt_path)?;
            ckpt.check_config(&tc)?;
            let step = ckpt.state.step;
            let t = Trainer::resume(tc, cam, ckpt.state)
                .map_err(|source| RunError::Train { step, source, last_checkpoint: Some(step) })?;
            (t, truncate_csv(&csv_path, step)?)
        } else {
            if csv_path.exists() || ckpt_path.exists() {
                return Err(RunError::Setup(format!(
                    "{} already holds a run; pass --resume or choose another directory",
                    out.display()
                )));
            }
            let t = Trainer::new(tc, cam).map_err(|source| RunError::Train { step: 0, source, last_checkpoint: None })?;
            let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
            text.push('\n');
            fs::write(&man_path, text).map_err(io_err(&man_path))?;
            (t, format!("{CSV_HEADER}\n"))
        };
        fs::write(&csv_path, csv_text).map_err(io_err(&csv_path))?;
        let mut csv = BufWriter::new(fs::OpenOptions::new().append(true).open(&csv_path).map_err(io_err(&csv_path))?);

        let last = self.config.train.total_steps();
        let mut last_checkpoint = opts.resume.then(|| trainer.steps_done());
        while !trainer.is_finished() {
            let report = trainer.step(&self.train.samples).map_err(|source| RunError::Train {
                step: trainer.steps_done() + 1,
                source,
                last_checkpoint,
            })?;
            let t = report.step;
            if t % self.config.log_interval == 0 || t == last {
                let metrics = if self.metrics_due(t, last) {
                    let ds = self.eval.as_ref().expect("checked by metrics_due");
                    let r = eval::score(trainer.net(), ds, None)
                        .map_err(|source| RunError::Train { step: t, source, last_checkpoint })?;
                    Some(r.aggregate.metrics)
                } else {
                    None
                };
                writeln!(csv, "{}", csv_row(&report, metrics.as_ref())).map_err(io_err(&csv_path))?;
            }
            let stop = opts.stop_at == Some(t);
            if t % self.config.checkpoint_interval == 0 || t == last || stop {
                csv.flush().map_err(io_err(&csv_path))?;
                Checkpoint::new(trainer.state(), &self.config.train).save_atomic(&ckpt_path)?;
                last_checkpoint = Some(t);
            }
            if stop && t != last {
                return Ok(RunOutcome::Stopped { steps: t });
            }
        }
        csv.flush().map_err(io_err(&csv_path))?;
        Ok(RunOutcome::Finished { steps: trainer.steps_done() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use secdepth_core::train::Phase;

    #[test]
    fn row_layout() {
        let r = StepReport {
            step: 5,
            epoch: 0,
            phase: Phase::Augmented,
            l_ph: 0.25,
            l_c: 0.5,
            w: 0.01,
            alpha1: 0.051,
            queue_updates: 2,
            update: None,
            grad_norm: 1.0,
        };
        assert_eq!(csv_row(&r, None), "5,0,augmented,0.25,0.5,0.01,0.051,2,,,,,,,");
        let m = MetricsRecord::from_values([0.1, 0.2, 0.3, 0.4, 0.5, 0.75, 1.0]);
        assert_eq!(csv_row(&r, Some(&m)), "5,0,augmented,0.25,0.5,0.01,0.051,2,0.1,0.2,0.3,0.4,0.5,0.75,1");
        assert_eq!(CSV_HEADER.split(',').count(), csv_row(&r, None).split(',').count());
    }

    #[test]
    fn truncation_keeps_rows_up_to_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        fs::write(&p, format!("{CSV_HEADER}\n1,a\n2,b\n3,c\n")).unwrap();
        assert_eq!(truncate_csv(&p, 2).unwrap(), format!("{CSV_HEADER}\n1,a\n2,b\n"));
        fs::write(&p, "bad\n").unwrap();
        assert!(truncate_csv(&p, 2).is_err());
    }
}
