//! Invariant suite behind `secdepth verify`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secdepth_core::distbin::{distribution_of, js, BinSpec, DepthDistribution};
use secdepth_core::geom::{warp_image, SourceSide};
use secdepth_core::latencyq::{ema_blend, QueueConfig};
use secdepth_core::secloss::{alpha1, combine, contrastive_weight, ScheduleConfig};
use secdepth_core::tensor::gradcheck;
use secdepth_core::weather::{generate_scene, CHANNELS};
use secdepth_core::{
    js_divergence, photometric_loss, sec_loss, soft_bin, warp, CameraModel, ContrastiveVariant, LatencyQueue,
    ModelSnapshot, ScheduleState, Tape, Tensor, TripletBatch, UpdateReason,
};

pub const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-6;

/// Deliberate corruptions proving that checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    /// Doubles the additive floor of the α₁ decay.
    Alpha1Floor,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub perturb: Option<Perturbation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub group: &'static str,
    pub name: String,
    pub expected: String,
    pub actual: String,
    pub pass: bool,
}

fn check(group: &'static str, name: impl Into<String>, expected: impl Into<String>, actual: String, pass: bool) -> Check {
    Check { group, name: name.into(), expected: expected.into(), actual, pass }
}

fn noise(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

fn grad_check(name: &str, err: Result<f64, secdepth_core::TensorError>) -> Check {
    match err {
        Ok(e) => check("gradient", name, format!("< {GRADCHECK_TOL:e}"), format!("{e:.3e}"), e < GRADCHECK_TOL),
        Err(e) => check("gradient", name, format!("< {GRADCHECK_TOL:e}"), format!("error: {e}"), false),
    }
}

fn gradients() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, w) = (8, 8);
    let cam = CameraModel::new(w as f64, (w as f64 / 2.0, h as f64 / 2.0), 0.54, SourceSide::Right, 3.0)
        .expect("valid camera");
    let target = noise(&mut rng, &[h, w, CHANNELS], 0.0, 1.0);
    let source = noise(&mut rng, &[h, w, CHANNELS], 0.0, 1.0);
    let d = noise(&mut rng, &[h, w], 0.1, 0.9);
    let photo = gradcheck(
        |tp, d| {
            let s = tp.constant(source.clone());
            let t = tp.constant(target.clone());
            let warped = warp(tp, s, d, &cam)?;
            photometric_loss(tp, t, warped)
        },
        &d,
        GRADCHECK_STEP,
    );

    let spec = BinSpec::new(32);
    let q = distribution_of(&noise(&mut rng, &[h, w], 0.0, 1.0), &spec).expect("valid map").to_tensor();
    let binned = gradcheck(
        |tp, d| {
            let p = soft_bin(tp, d, &spec)?;
            let q = tp.constant(q.clone());
            js_divergence(tp, p, q)
        },
        &d,
        GRADCHECK_STEP,
    );

    // Negatives close to the anchor keep both margin hinges active.
    let pos = distribution_of(&noise(&mut rng, &[h, w], 0.2, 0.8), &spec).expect("valid map").to_tensor();
    let negs: Vec<Tensor> = (0..3)
        .map(|_| {
            let n = d.data().iter().map(|v| (v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0)).collect();
            distribution_of(&Tensor::new([h, w], n).expect("shape"), &spec).expect("valid map").to_tensor()
        })
        .collect();
    let sched = ScheduleState::new(ScheduleConfig::default(), 1000).at(0, 0);
    let full = gradcheck(
        |tp, d| {
            let anchor = soft_bin(tp, d, &spec)?;
            let positive = tp.constant(pos.clone());
            let negatives = negs.iter().map(|n| tp.constant(n.clone())).collect();
            sec_loss(tp, &TripletBatch { anchor, positive, negatives }, &sched)
                .map_err(|_| secdepth_core::TensorError::Domain("contrastive loss failed"))
        },
        &d,
        GRADCHECK_STEP,
    );
    vec![
        grad_check("photometric loss wrt disparity (8x8)", photo),
        grad_check("soft bin + JS wrt disparity (8x8)", binned),
        grad_check("contrastive loss wrt anchor disparity (8x8)", full),
    ]
}

fn distributions() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spec = BinSpec::new(32);
    let (mut worst_sum, mut min_entry) = (0.0f64, f64::INFINITY);
    let mut dists: Vec<DepthDistribution> = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let (lo, hi) = (rng.gen_range(0.0..0.5), rng.gen_range(0.5..1.0));
        let p = distribution_of(&noise(&mut rng, &[8, 8], lo, hi), &spec).expect("valid map");
        worst_sum = worst_sum.max((p.probs().iter().sum::<f64>() - 1.0).abs());
        min_entry = min_entry.min(p.probs().iter().copied().fold(f64::INFINITY, f64::min));
        dists.push(p);
    }
    let (mut asym, mut max_js) = (0.0f64, 0.0f64);
    for pair in dists.chunks_exact(2) {
        let (a, b) = (js(&pair[0], &pair[1]).expect("same length"), js(&pair[1], &pair[0]).expect("same length"));
        asym = asym.max((a - b).abs());
        max_js = max_js.max(a);
    }
    let oracle = {
        let p = DepthDistribution::new(vec![1.0, 0.0]).expect("valid");
        let q = DepthDistribution::new(vec![0.5, 0.5]).expect("valid");
        js(&p, &q).expect("same length")
    };
    // 1.5 ln 2 - 0.75 ln 3, evaluated independently.
    let closed = 1.5 * std::f64::consts::LN_2 - 0.75 * 3f64.ln();
    vec![
        check("distribution", "soft bin sums to 1 (1000 maps)", "<= 1e-9", format!("{worst_sum:.2e}"), worst_sum <= 1e-9),
        check("distribution", "soft bin entries non-negative", ">= 0", format!("{min_entry:.2e}"), min_entry >= 0.0),
        check("distribution", "JS symmetric", "<= 1e-12", format!("{asym:.2e}"), asym <= 1e-12),
        check(
            "distribution",
            "JS bounded by ln 2",
            format!("<= {:.6}", std::f64::consts::LN_2),
            format!("{max_js:.6}"),
            max_js <= std::f64::consts::LN_2,
        ),
        check(
            "distribution",
            "JS([1,0],[0.5,0.5])",
            "0.215762 +- 1e-6",
            format!("{oracle:.7}"),
            (oracle - 0.215762).abs() <= 1e-6 && (oracle - closed).abs() < 1e-12,
        ),
    ]
}

fn schedule(opts: &VerifyOptions) -> Vec<Check> {
    let mut cfg = ScheduleConfig::default();
    if opts.perturb == Some(Perturbation::Alpha1Floor) {
        cfg.c *= 2.0;
    }
    let total = 10_000;
    let st = |step, epoch| ScheduleState::new(cfg, total).at(step, epoch);
    let a0 = alpha1(&st(0, 0));
    let at = alpha1(&st(total, 0));
    let at_expected = 0.05 * (-15f64).exp() + 0.001;
    let mut out = vec![
        check("schedule", "alpha1(0)", "0.051", format!("{a0}"), (a0 - 0.051).abs() <= 1e-9),
        check("schedule", "alpha1(T)", format!("{at_expected}"), format!("{at}"), (at - at_expected).abs() <= 1e-9),
    ];
    for (epoch, expected) in [(3, 0.01), (10, 0.06), (20, 0.1)] {
        let got = contrastive_weight(&st(0, epoch));
        out.push(check("schedule", format!("w(epoch {epoch})"), format!("{expected}"), format!("{got}"), got == expected));
    }
    out
}

fn queue() -> Vec<Check> {
    let cfg = QueueConfig::default();
    let q = LatencyQueue::random(&cfg, [1, 2, 3]).expect("valid queue");
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let anchor = noise(&mut rng, &[8, 8], 0.0, 1.0);
    let positive = Tensor::new([8, 8], anchor.data().iter().map(|v| v + 0.1).collect()).expect("shape");
    let spread: Vec<Tensor> = (0..3).map(|_| noise(&mut rng, &[8, 8], 0.0, 1.0)).collect();
    let mut wrong = Vec::new();
    for t in 1..=2000u64 {
        let got = q.should_update(t, &anchor, &positive, &spread).expect("valid inputs");
        let want = (t % cfg.interval == 0).then_some(UpdateReason::Interval);
        if got != want {
            wrong.push(t);
        }
    }
    let collapsed = vec![anchor.clone(); 3];
    let noisy_pos = noise(&mut rng, &[8, 8], 0.0, 1.0);
    let div = q.should_update(401, &anchor, &noisy_pos, &collapsed).expect("valid inputs");

    // Scalar model: the slot's distance to a fixed target shrinks by omega
    // per update. Three updates keep the gap far above f64 resolution.
    let theta = ModelSnapshot { fingerprint: 0, params: vec![1.0] };
    let mut slot = ModelSnapshot { fingerprint: 0, params: vec![0.0] };
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let before = theta.params[0] - slot.params[0];
        ema_blend(&mut slot, &theta, cfg.omega).expect("same fingerprint");
        let after = theta.params[0] - slot.params[0];
        worst = worst.max((after / before - cfg.omega).abs());
    }
    vec![
        check(
            "queue",
            format!("interval trigger only at multiples of {}", cfg.interval),
            "0 mismatches in 2000 steps",
            format!("{} mismatches", wrong.len()),
            wrong.is_empty(),
        ),
        check("queue", "diversity trigger on collapsed negatives", "Diversity", format!("{div:?}"), div == Some(UpdateReason::Diversity)),
        check("queue", format!("EMA contraction ratio {}", cfg.omega), "|ratio - omega| < 1e-9", format!("{worst:.2e}"), worst < 1e-9),
    ]
}

fn loss() -> Vec<Check> {
    let mut tape = Tape::new();
    let ap = tape.leaf(Tensor::scalar(0.01));
    let an = tape.leaf(Tensor::scalar(0.002));
    let value = combine(&mut tape, ap, &[an], 0.051, &ScheduleConfig::default(), &ContrastiveVariant::FULL)
        .map(|v| tape.value(v).item());
    let hand = 0.0100109;

    let spec = BinSpec::new(32);
    let a = Tensor::full(&[8, 8], 0.2);
    let far = Tensor::full(&[8, 8], 0.9);
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone());
    let anchor = soft_bin(&mut tape, av, &spec).expect("valid map");
    let positive = tape.constant(distribution_of(&a, &spec).expect("valid map").to_tensor());
    let n = tape.constant(distribution_of(&far, &spec).expect("valid map").to_tensor());
    let sched = ScheduleState::new(ScheduleConfig::default(), 100).at(0, 0);
    let zero = sec_loss(&mut tape, &TripletBatch { anchor, positive, negatives: vec![n, n, n] }, &sched)
        .map(|v| tape.value(v).item());
    vec![
        match value {
            Ok(v) => check("loss", "hand-computed single-negative case", format!("{hand}"), format!("{v:.10}"), (v - hand).abs() <= 1e-9),
            Err(e) => check("loss", "hand-computed single-negative case", format!("{hand}"), e.to_string(), false),
        },
        match zero {
            Ok(v) => check("loss", "identical positive, distant negatives", "0", format!("{v}"), v == 0.0),
            Err(e) => check("loss", "identical positive, distant negatives", "0", e.to_string(), false),
        },
    ]
}

fn geometry() -> Vec<Check> {
    let (h, w) = (64, 128);
    let cam = CameraModel::for_frame(h, w);
    let mut identical = true;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let s = generate_scene(seed, h, w, &cam);
        let zero = warp_image(&s.source, &Tensor::zeros(&[h, w]), &cam).expect("matching shapes");
        identical &= zero.data().iter().zip(s.source.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let rec = warp_image(&s.source, &s.disparity, &cam).expect("matching shapes");
        let (mut err, mut n) = (0.0, 0usize);
        for (p, _) in s.visible.iter().enumerate().filter(|(_, &v)| v) {
            for c in 0..CHANNELS {
                err += (rec.data()[p * CHANNELS + c] - s.target.data()[p * CHANNELS + c]).abs();
                n += 1;
            }
        }
        worst = worst.max(err / n.max(1) as f64);
    }
    vec![
        check("geometry", "zero-disparity warp is bit-identical", "identical", if identical { "identical" } else { "differs" }.into(), identical),
        check("geometry", "ground-truth warp MAE on visible pixels (worst of 20)", "< 0.02", format!("{worst:.4}"), worst < 0.02),
    ]
}

pub fn run(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = gradients();
    out.extend(distributions());
    out.extend(schedule(opts));
    out.extend(queue());
    out.extend(loss());
    out.extend(geometry());
    out
}

pub fn render(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(
            s,
            "{status}  {:<10} {:<width$}  expected {}  actual {}",
            c.group, c.name, c.expected, c.actual
        );
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    let _ = writeln!(s, "{} checks, {failed} failed", checks.len());
    s
}
