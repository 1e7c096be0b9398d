//! Acceptance gate. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (bypassing the test harness capture) before asserting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secdepth::config::RunConfig;
use secdepth::dataset::{self, SynthSpec, WeatherChoice};
use secdepth::runner::{Run, RunOptions, RunOutcome, CHECKPOINT_FILE, CSV_HEADER, MANIFEST_FILE, METRICS_FILE};
use secdepth_core::distbin::{distribution_of, js, BinSpec, DepthDistribution};
use secdepth_core::geom::{warp_image, SourceSide};
use secdepth_core::latencyq::{ema_blend, QueueConfig};
use secdepth_core::secloss::{alpha1, combine, contrastive_weight, ScheduleConfig};
use secdepth_core::tensor::gradcheck;
use secdepth_core::weather::{generate_scene, CHANNELS};
use secdepth_core::{
    js_divergence, photometric_loss, sec_loss, soft_bin, warp, CameraModel, ContrastiveVariant, LatencyQueue,
    ModelSnapshot, ScheduleState, Tape, Tensor, TensorError, TripletBatch, UpdateReason,
};

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn noise(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn presets_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

fn synth(dir: &Path, spec: SynthSpec) -> PathBuf {
    let samples = spec.generate().unwrap();
    dataset::write(dir, &spec, &samples).unwrap();
    dir.to_path_buf()
}

fn load_preset(name: &str, train: &Path, test: Option<&Path>) -> RunConfig {
    let mut cfg = RunConfig::load(&presets_dir().join(format!("{name}.json"))).unwrap();
    cfg.dataset = train.to_path_buf();
    cfg.eval_dataset = test.map(Path::to_path_buf);
    cfg
}

fn csv_rows(dir: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(dir.join(METRICS_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    lines.map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cam = CameraModel::new(8.0, (4.0, 4.0), 0.54, SourceSide::Right, 3.0).unwrap();
    let target = noise(&mut rng, &[8, 8, CHANNELS], 0.0, 1.0);
    let source = noise(&mut rng, &[8, 8, CHANNELS], 0.0, 1.0);
    let d = noise(&mut rng, &[8, 8], 0.1, 0.9);
    let photo = gradcheck(
        |tp, d| {
            let s = tp.constant(source.clone());
            let t = tp.constant(target.clone());
            let w = warp(tp, s, d, &cam)?;
            photometric_loss(tp, t, w)
        },
        &d,
        1e-6,
    )
    .unwrap();

    let spec = BinSpec::new(32);
    let q = distribution_of(&noise(&mut rng, &[8, 8], 0.0, 1.0), &spec).unwrap().to_tensor();
    let binned = gradcheck(
        |tp, d| {
            let p = soft_bin(tp, d, &spec)?;
            let q = tp.constant(q.clone());
            js_divergence(tp, p, q)
        },
        &d,
        1e-6,
    )
    .unwrap();

    // Negatives near the anchor keep both hinges active, so every term of
    // the loss contributes to the gradient.
    let pos = distribution_of(&noise(&mut rng, &[8, 8], 0.2, 0.8), &spec).unwrap().to_tensor();
    let negs: Vec<Tensor> = (0..3)
        .map(|_| {
            let n: Vec<f64> = d.data().iter().map(|v| (v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0)).collect();
            distribution_of(&Tensor::new([8, 8], n).unwrap(), &spec).unwrap().to_tensor()
        })
        .collect();
    let sched = ScheduleState::new(ScheduleConfig::default(), 1000).at(0, 0);
    let full = gradcheck(
        |tp, d| {
            let anchor = soft_bin(tp, d, &spec)?;
            let positive = tp.constant(pos.clone());
            let negatives = negs.iter().map(|n| tp.constant(n.clone())).collect();
            sec_loss(tp, &TripletBatch { anchor, positive, negatives }, &sched)
                .map_err(|_| TensorError::Domain("contrastive loss"))
        },
        &d,
        1e-6,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let pass = photo < 1e-4 && binned < 1e-4 && full < 1e-4 && elapsed < Duration::from_secs(60);
    report(
        1,
        pass,
        &format!("max rel err photometric {photo:.2e}, soft bin+JS {binned:.2e}, L_c {full:.2e} (< 1e-4); {elapsed:.2?} (< 1 min)"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_distribution_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let spec = BinSpec::new(32);
    let mut dists = Vec::with_capacity(1000);
    let (mut worst_sum, mut min_entry) = (0.0f64, f64::INFINITY);
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(2..12), rng.gen_range(2..12));
        let (lo, hi) = (rng.gen_range(0.0..0.5), rng.gen_range(0.5..1.0));
        let p = distribution_of(&noise(&mut rng, &[h, w], lo, hi), &spec).unwrap();
        worst_sum = worst_sum.max((p.probs().iter().sum::<f64>() - 1.0).abs());
        min_entry = p.probs().iter().copied().fold(min_entry, f64::min);
        dists.push(p);
    }
    let (mut asym, mut max_js) = (0.0f64, 0.0f64);
    for (i, a) in dists.iter().enumerate() {
        let b = &dists[(i * 7 + 3) % dists.len()];
        let (ab, ba) = (js(a, b).unwrap(), js(b, a).unwrap());
        asym = asym.max((ab - ba).abs());
        max_js = max_js.max(ab.max(ba));
    }
    let point = js(&DepthDistribution::new(vec![1.0, 0.0]).unwrap(), &DepthDistribution::new(vec![0.5, 0.5]).unwrap())
        .unwrap();
    // Closed form: KL(P|M)/2 = ln(4/3)/2, KL(Q|M)/2 = (ln(2/3) + ln 2)/4.
    let closed = (4.0f64 / 3.0).ln() / 2.0 + ((2.0f64 / 3.0).ln() + 2f64.ln()) / 4.0;
    let pass = worst_sum <= 1e-9
        && min_entry >= 0.0
        && asym <= 1e-12
        && max_js <= std::f64::consts::LN_2
        && (point - 0.215762).abs() <= 1e-6
        && (point - closed).abs() <= 1e-12;
    report(
        2,
        pass,
        &format!(
            "sum err {worst_sum:.1e}, min entry {min_entry:.1e}, JS asym {asym:.1e}, max JS {max_js:.4}, JS([1,0],[.5,.5]) = {point:.7}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_schedule_exactness() {
    let cfg = ScheduleConfig::default();
    let total = 1000;
    let at = |step, epoch| ScheduleState::new(cfg, total).at(step, epoch);
    let a0 = alpha1(&at(0, 0));
    let at_end = alpha1(&at(total, 0));
    let want_end = 0.05 * (-15f64).exp() + 0.001;
    let w: Vec<f64> = [3, 10, 20].iter().map(|&e| contrastive_weight(&at(0, e))).collect();
    let pass = (a0 - 0.051).abs() <= 1e-9 && (at_end - want_end).abs() <= 1e-9 && w == [0.01, 0.06, 0.1];
    report(3, pass, &format!("alpha1(0) = {a0}, alpha1(T) = {at_end} (want {want_end}), w(3,10,20) = {w:?}"));
    assert!(pass);
}

#[test]
fn criterion_4_queue_state_machine() {
    let cfg = QueueConfig::default();
    assert_eq!(cfg.interval, 200);
    let q = LatencyQueue::random(&cfg, [4, 5, 6]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let anchor = noise(&mut rng, &[8, 8], 0.0, 1.0);
    // Constant offset: the positive difference has zero variance, so the
    // diversity condition can never hold.
    let positive = Tensor::new([8, 8], anchor.data().iter().map(|v| v + 0.125).collect()).unwrap();
    let negatives: Vec<Tensor> = (0..3).map(|_| noise(&mut rng, &[8, 8], 0.0, 1.0)).collect();
    let fired: Vec<u64> =
        (1..=5000).filter(|&t| q.should_update(t, &anchor, &positive, &negatives).unwrap().is_some()).collect();
    let want: Vec<u64> = (1..=25).map(|k| k * 200).collect();
    let reasons_ok = fired
        .iter()
        .all(|&t| q.should_update(t, &anchor, &positive, &negatives).unwrap() == Some(UpdateReason::Interval));

    let collapsed = vec![anchor.clone(); 3];
    let noisy_positive = noise(&mut rng, &[8, 8], 0.0, 1.0);
    let diversity = q.should_update(401, &anchor, &noisy_positive, &collapsed).unwrap();

    let theta = ModelSnapshot { fingerprint: 1, params: vec![2.0] };
    let mut slot = ModelSnapshot { fingerprint: 1, params: vec![-1.0] };
    let mut ratios = Vec::new();
    // Beyond three updates the remaining gap nears f64 resolution.
    for _ in 0..3 {
        let before = theta.params[0] - slot.params[0];
        ema_blend(&mut slot, &theta, cfg.omega).unwrap();
        ratios.push((theta.params[0] - slot.params[0]) / before);
    }
    let ratio_err = ratios.iter().map(|r| (r - cfg.omega).abs()).fold(0.0, f64::max);
    let ratio_ok = ratio_err < 1e-9;
    let pass = fired == want && reasons_ok && diversity == Some(UpdateReason::Diversity) && ratio_ok;
    report(
        4,
        pass,
        &format!(
            "interval fired at {} of 5000 steps (want the 25 multiples of 200), diversity = {diversity:?}, max |EMA ratio - omega| {ratio_err:.1e}",
            fired.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_loss_algebra() {
    let mut tape = Tape::new();
    let ap = tape.leaf(Tensor::scalar(0.01));
    let an = tape.leaf(Tensor::scalar(0.002));
    let l = combine(&mut tape, ap, &[an], 0.051, &ScheduleConfig::default(), &ContrastiveVariant::FULL).unwrap();
    let got = tape.value(l).item();
    // 0.01 + 1e-4 * (0.051 - 0.002) + 0.002 * (0.005 - 0.002)
    let hand = 0.01 + 1e-4 * 0.049 + 0.002 * 0.003;

    let spec = BinSpec::new(32);
    let a = Tensor::full(&[8, 8], 0.3);
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone());
    let anchor = soft_bin(&mut tape, av, &spec).unwrap();
    let positive = tape.constant(distribution_of(&a, &spec).unwrap().to_tensor());
    let negatives = [0.8, 0.9, 0.95]
        .iter()
        .map(|&v| tape.constant(distribution_of(&Tensor::full(&[8, 8], v), &spec).unwrap().to_tensor()))
        .collect();
    let sched = ScheduleState::new(ScheduleConfig::default(), 100).at(0, 0);
    let z = sec_loss(&mut tape, &TripletBatch { anchor, positive, negatives }, &sched).unwrap();
    let zero = tape.value(z).item();
    let pass = (got - 0.0100109).abs() <= 1e-9 && (got - hand).abs() <= 1e-15 && zero == 0.0;
    report(5, pass, &format!("L_c = {got:.10} (want 0.0100109), saturated case L_c = {zero}"));
    assert!(pass);
}

#[test]
fn criterion_6_geometry() {
    let (h, w) = (64, 128);
    let cam = CameraModel::for_frame(h, w);
    let mut identical = true;
    let mut maes = Vec::new();
    for seed in 0..20 {
        let s = generate_scene(1000 + seed, h, w, &cam);
        let zero = warp_image(&s.source, &Tensor::zeros(&[h, w]), &cam).unwrap();
        identical &= zero.data().iter().zip(s.source.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let rec = warp_image(&s.source, &s.disparity, &cam).unwrap();
        let (mut err, mut n) = (0.0, 0usize);
        for p in (0..h * w).filter(|&p| s.visible[p]) {
            for c in 0..CHANNELS {
                err += (rec.data()[p * CHANNELS + c] - s.target.data()[p * CHANNELS + c]).abs();
                n += 1;
            }
        }
        assert!(n > h * w, "seed {seed}: fewer than a third of pixels visible");
        maes.push(err / n as f64);
    }
    let worst = maes.iter().copied().fold(0.0, f64::max);
    let pass = identical && worst < 0.02;
    report(6, pass, &format!("zero-disparity warp bit-identical: {identical}; worst visible-pixel MAE over 20 scenes {worst:.4} (< 0.02)"));
    assert!(pass);
}

#[test]
fn criterion_7_directional_ablation() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let train = synth(
        &tmp.path().join("train"),
        SynthSpec { seed: 0, count: 256, height: 64, width: 128, weather: WeatherChoice::Clear, severity: 0.0 },
    );
    let test = synth(
        &tmp.path().join("test"),
        SynthSpec { seed: 100_000, count: 64, height: 64, width: 128, weather: WeatherChoice::Mixed, severity: 0.75 },
    );
    let arms = ["baseline", "cl", "cl_id", "sec_full"];
    let mut means = Vec::new();
    for arm in arms {
        let (mut abs_rel, mut rmse) = (0.0, 0.0);
        for seed in 0..3u64 {
            let mut cfg = load_preset(arm, &train, Some(&test));
            cfg.train.seed = seed;
            let out = tmp.path().join(format!("{arm}-{seed}"));
            let run = Run::prepare(cfg, 0).unwrap();
            assert!(matches!(run.execute(&out, RunOptions::default()).unwrap(), RunOutcome::Finished { .. }));
            let rows = csv_rows(&out);
            let last = rows.last().unwrap();
            let (a, r): (f64, f64) = (last[8].parse().unwrap(), last[10].parse().unwrap());
            let _ = std::io::stderr().write_all(format!("  {arm} seed {seed}: AbsRel {a:.4} RMSE {r:.3}\n").as_bytes());
            abs_rel += a / 3.0;
            rmse += r / 3.0;
        }
        means.push((abs_rel, rmse));
    }
    let elapsed = start.elapsed();
    let [(base_abs, _), (_, cl_rmse), (_, id_rmse), (sec_abs, _)] = means[..] else { unreachable!() };
    let reduction = 1.0 - sec_abs / base_abs;
    let pass = reduction >= 0.10 && id_rmse <= cl_rmse && elapsed < Duration::from_secs(45 * 60);
    report(
        7,
        pass,
        &format!(
            "SEC AbsRel {sec_abs:.4} vs baseline {base_abs:.4} ({:.1}% lower, need >= 10%); CL+ID RMSE {id_rmse:.3} vs CL-pixel {cl_rmse:.3}; {:.1} min (< 45)",
            100.0 * reduction,
            elapsed.as_secs_f64() / 60.0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let tmp = tempfile::tempdir().unwrap();
    let train = synth(
        &tmp.path().join("train"),
        SynthSpec { seed: 5, count: 8, height: 16, width: 32, weather: WeatherChoice::Clear, severity: 0.0 },
    );
    let test = synth(
        &tmp.path().join("test"),
        SynthSpec { seed: 50, count: 3, height: 16, width: 32, weather: WeatherChoice::Mixed, severity: 0.8 },
    );
    let mut cfg = load_preset("sec_full", &train, Some(&test));
    cfg.train.epochs = 3;
    cfg.train.steps_per_epoch = 20;
    cfg.train.queue.interval = 15;
    cfg.log_interval = 1;
    cfg.eval_interval = 10;
    cfg.checkpoint_interval = 25;
    let files = [METRICS_FILE, CHECKPOINT_FILE, MANIFEST_FILE];
    let read = |d: &Path| files.map(|f| fs::read(d.join(f)).unwrap());

    let run = Run::prepare(cfg.clone(), 1_700_000_000).unwrap();
    let full = tmp.path().join("full");
    run.execute(&full, RunOptions::default()).unwrap();
    let again = tmp.path().join("again");
    Run::prepare(cfg.clone(), 1_700_000_000).unwrap().execute(&again, RunOptions::default()).unwrap();

    // Interrupt between checkpoints, then append a stale row the resumed run
    // must discard.
    let resumed = tmp.path().join("resumed");
    let stop = run.execute(&resumed, RunOptions { stop_at: Some(37), ..RunOptions::default() }).unwrap();
    fs::OpenOptions::new()
        .append(true)
        .open(resumed.join(METRICS_FILE))
        .unwrap()
        .write_all(b"38,1,clean,9,9,9,9,9,,,,,,,\n")
        .unwrap();
    let done = run.execute(&resumed, RunOptions { resume: true, ..RunOptions::default() }).unwrap();

    let (a, b, c) = (read(&full), read(&again), read(&resumed));
    let rows = csv_rows(&full);
    let pass = stop == RunOutcome::Stopped { steps: 37 }
        && done == RunOutcome::Finished { steps: 60 }
        && a == b
        && a == c
        && rows.len() == 60
        && rows.iter().any(|r| r[2] == "augmented" && r[4].parse::<f64>().unwrap() > 0.0)
        && rows.iter().any(|r| !r[8].is_empty());
    report(
        8,
        pass,
        &format!(
            "rerun byte-identical: {}; stop at 37 + resume byte-identical (csv, checkpoint, manifest): {}",
            a == b,
            a == c
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_negative_step_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let train = synth(
        &tmp.path().join("train"),
        SynthSpec { seed: 9, count: 16, height: 32, width: 64, weather: WeatherChoice::Clear, severity: 0.0 },
    );
    let steps = 100u64;
    let mut counts = Vec::new();
    for s in [1u64, 5, 10, 20] {
        let mut cfg = load_preset(&format!("s{s}"), &train, None);
        assert_eq!(cfg.train.schedule.negative_step, s);
        cfg.log_interval = 1;
        let out = tmp.path().join(format!("s{s}"));
        let outcome =
            Run::prepare(cfg, 0).unwrap().execute(&out, RunOptions { stop_at: Some(steps), ..RunOptions::default() }).unwrap();
        assert_eq!(outcome, RunOutcome::Stopped { steps });
        let augmented = csv_rows(&out).iter().filter(|r| r[2] == "augmented").count() as u64;
        counts.push((s, augmented));
    }
    let law = counts.iter().all(|&(s, n)| n == steps / s);
    let monotone = counts.windows(2).all(|w| w[1].1 <= w[0].1);
    let pass = law && monotone;
    report(9, pass, &format!("augmented steps after {steps} steps (S, count): {counts:?}; floor(E/S) law: {law}; non-increasing: {monotone}"));
    assert!(pass);
}
