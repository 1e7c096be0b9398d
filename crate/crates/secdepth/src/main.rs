use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use secdepth::checkpoint::Checkpoint;
use secdepth::config::{RunConfig, SEED_ENV};
use secdepth::dataset::{self, SynthSpec, WeatherChoice};
use secdepth::runner::{Run, RunError, RunOptions, RunOutcome};
use secdepth::verify::{self, Perturbation, VerifyOptions};
use secdepth_core::DepthNet;

#[derive(Parser)]
#[command(name = "secdepth", version, about = "Snapshot-contrastive disparity training on synthetic weather scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory of synthetic stereo scenes.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: u64,
        /// Frame size as HxW; both sides multiples of 4, at least 16.
        #[arg(long, default_value = "64x128")]
        size: String,
        #[arg(long)]
        out: PathBuf,
        /// none, fog, rain, snow or mixed.
        #[arg(long, default_value = "none")]
        weather: String,
        #[arg(long, default_value_t = 0.75)]
        severity: f64,
    },
    /// Train from a JSON run config, writing metrics.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from OUT/checkpoint.secd.
        #[arg(long)]
        resume: bool,
        /// Checkpoint and exit after this global step.
        #[arg(long, hide = true)]
        stop_at: Option<u64>,
    },
    /// Score a checkpoint on a dataset; prints JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Keep only samples of this kind (fog, rain, snow, clear).
        #[arg(long)]
        weather: Option<String>,
    },
    /// Run the invariant suite; exit code 1 if any check fails.
    Verify {
        #[arg(long, value_enum, hide = true)]
        perturb: Option<PerturbArg>,
    },
    /// Print the step, optimizer and queue state held by a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbArg {
    Alpha1Floor,
}

/// Exit code 1: the command ran and found a failure.
const FAILED: u8 = 1;
/// Exit code 2: bad usage, config or input files.
const USAGE: u8 = 2;

struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait Classify<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn created_unix() -> u64 {
    // Honour the reproducible-builds convention so reruns can be byte-identical.
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

fn synth(
    seed: u64,
    count: u64,
    size: &str,
    out: PathBuf,
    weather: &str,
    severity: f64,
) -> Result<(), Failure> {
    let (height, width) = dataset::parse_size(size).ok_or_else(|| anyhow!("--size must be HxW, got {size:?}")).code(USAGE)?;
    let weather = WeatherChoice::parse(weather)
        .ok_or_else(|| anyhow!("--weather must be none, fog, rain, snow or mixed, got {weather:?}"))
        .code(USAGE)?;
    let spec = SynthSpec { seed, count, height, width, weather, severity };
    spec.validate().code(USAGE)?;
    let samples = spec.generate().code(USAGE)?;
    let m = dataset::write(&out, &spec, &samples).code(FAILED)?;
    eprintln!("wrote {} samples ({height}x{width}) to {}", m.samples.len(), out.display());
    Ok(())
}

fn train(config: PathBuf, out: PathBuf, resume: bool, stop_at: Option<u64>) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&config).code(USAGE)?;
    cfg.apply_env(std::env::var(SEED_ENV).ok().as_deref()).code(USAGE)?;
    let run = Run::prepare(cfg, created_unix()).code(USAGE)?;
    let outcome = run.execute(&out, RunOptions { resume, stop_at, created_unix: run.manifest.created_unix });
    match outcome {
        Ok(RunOutcome::Finished { steps }) => eprintln!("finished {steps} steps in {}", out.display()),
        Ok(RunOutcome::Stopped { steps }) => eprintln!("stopped after step {steps}; resume with --resume"),
        Err(e @ RunError::Train { .. }) | Err(e @ RunError::Io { .. }) => return Err(e).code(FAILED),
        Err(e) => return Err(e).code(USAGE),
    }
    Ok(())
}

fn eval(checkpoint: PathBuf, dataset: PathBuf, weather: Option<String>) -> Result<(), Failure> {
    if let Some(k) = &weather {
        if k != "clear" && secdepth_core::WeatherKind::parse(k).is_none() {
            return Err(anyhow!("--weather must be fog, rain, snow or clear, got {k:?}")).code(USAGE);
        }
    }
    let ckpt = Checkpoint::load(&checkpoint).with_context(|| checkpoint.display().to_string()).code(USAGE)?;
    let ds = dataset::load(&dataset).code(USAGE)?;
    let net = DepthNet::from_params(ckpt.state.params).code(USAGE)?;
    let report = secdepth::eval::score(&net, &ds, weather.as_deref()).code(FAILED)?;
    let json = serde_json::json!({
        "checkpoint_step": ckpt.state.step,
        "per_kind": report.per_kind,
        "aggregate": report.aggregate,
    });
    println!("{}", serde_json::to_string_pretty(&json).expect("report serializes"));
    Ok(())
}

fn verify(perturb: Option<PerturbArg>) -> Result<(), Failure> {
    let opts = VerifyOptions { perturb: perturb.map(|PerturbArg::Alpha1Floor| Perturbation::Alpha1Floor) };
    let checks = verify::run(&opts);
    print!("{}", verify::render(&checks));
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(anyhow!("{failed} verification checks failed")).code(FAILED);
    }
    Ok(())
}

fn inspect(checkpoint: PathBuf) -> Result<(), Failure> {
    let c = Checkpoint::load(&checkpoint).with_context(|| checkpoint.display().to_string()).code(USAGE)?;
    let q = &c.state.queue;
    println!("step {} of {} (epoch {})", c.state.step, c.total_steps, c.epoch);
    println!("optimizer steps {}, lr {}", c.state.optimizer.t, c.state.optimizer.config.lr);
    println!(
        "queue: {} slots, cursor {}, omega {}, interval {}, updates {}",
        q.len(),
        q.cursor(),
        q.omega(),
        q.interval(),
        q.update_count()
    );
    let theta = &c.state.params;
    for (k, s) in q.slots().iter().enumerate() {
        let dist = s.params.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        println!("  slot {k}: fingerprint {:#018x}, |slot - theta| = {dist:.6}", s.fingerprint);
    }
    Ok(())
}

/// The error and its causes, skipping causes already quoted by an outer
/// message.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !out.contains(&c) {
            out = format!("{out}: {c}");
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { seed, count, size, out, weather, severity } => synth(seed, count, &size, out, &weather, severity),
        Command::Train { config, out, resume, stop_at } => train(config, out, resume, stop_at),
        Command::Eval { checkpoint, dataset, weather } => eval(checkpoint, dataset, weather),
        Command::Verify { perturb } => verify(perturb),
        Command::Inspect { checkpoint } => inspect(checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", render_chain(&f.error));
            ExitCode::from(f.code)
        }
    }
}
