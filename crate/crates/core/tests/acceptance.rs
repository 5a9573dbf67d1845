//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned
//! below. Run with `cargo test -p nima-core --test acceptance`.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use nima_core::data::{generate_synthetic, split, SplitSpec, SynthConfig};
use nima_core::dist::{emd, squared_emd_grad, BucketScale, Logits, ScoreDistribution};
use nima_core::image::ImageTensor;
use nima_core::maxent::{fit_maxent_default, MomentTarget};
use nima_core::metrics::{evaluate, lcc, srcc};
use nima_core::model::{
    predict, train_on_images, InputGeometry, LossKind, ModelParams, TrainConfig, STATS_DIM,
};
use nima_core::tuner::{add_awgn, denoise, tune, Operator, OperatorGrid, TuneProtocol};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LOGIT_GRAD_TOL: f64 = 1e-5;
const MODEL_GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(5);
const EMD_TRANSPORT_TOL: f64 = 1e-12;
const MAXENT_MOMENT_TOL: f64 = 1e-6;
const MAXENT_UNIFORM_TOL: f64 = 1e-8;
const MAXENT_BUDGET: Duration = Duration::from_secs(10);
const METRIC_TOL: f64 = 1e-12;
const LOSS_SEEDS: u64 = 10;
const LOSS_MIN_WINS: usize = 8;
const LOSS_BUDGET: Duration = Duration::from_secs(300);
const LEVEL_SRCC_MIN: f64 = 0.8;
const OVERFIT_LOSS_MAX: f64 = 1e-3;
const TUNE_IMAGES: u64 = 20;
const TUNE_SIGMA: f64 = 30.0;
const TONE_GRID_SIZE: usize = 726;
const REFERENCE_MOMENTS: [(f64, f64); 4] = [(6.36, 1.04), (7.84, 2.08), (2.62, 2.15), (3.12, 1.28)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradients),
        ("emd oracle", emd_oracle),
        ("maxent fidelity", maxent_fidelity),
        ("metric oracles", metric_oracles),
        ("emd beats cross-entropy", loss_comparison),
        ("learning sanity", learning_sanity),
        ("tuner oracle", tuner_oracle),
        ("end-to-end determinism", determinism),
        ("reference moments round trip", reference_moments),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{tag} [{}] {name}: {} ({:.1}s)",
            i + 1,
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scale = BucketScale::ava();
    let mut worst_logit: f64 = 0.0;
    for _ in 0..100 {
        let p = random_dist(&mut rng, &scale);
        let z: Vec<f64> = (0..10).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g = squared_emd_grad(&p, &Logits(z.clone())).unwrap();
        worst_logit = worst_logit.max(rel_err(&g, &fd_logit_grad(&p, &z, 1e-5)));
    }

    let mut worst_model: f64 = 0.0;
    for seed in 0..5 {
        let params = ModelParams::new(
            scale.clone(),
            &[12, 8],
            InputGeometry {
                resize_to: 16,
                crop_to: 16,
            },
            seed,
        );
        let stats: Vec<f64> = (0..STATS_DIM)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let gt = random_dist(&mut rng, &scale);
        let (analytic, numeric) = model_gradients(&params, &stats, &gt, 1e-6);
        worst_model = worst_model.max(rel_err(&analytic, &numeric));
    }
    let elapsed = t0.elapsed();
    outcome(
        worst_logit <= LOGIT_GRAD_TOL && worst_model <= MODEL_GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "logit rel err {worst_logit:.2e} (tol {LOGIT_GRAD_TOL:.0e}), model rel err {worst_model:.2e} \
             (tol {MODEL_GRAD_TOL:.0e}), {:.2}s of {}s",
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

fn emd_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for n in 2..=6 {
        let scale = BucketScale::integer_range(1, n).unwrap();
        for _ in 0..1000 {
            let (p, q) = (random_dist(&mut rng, &scale), random_dist(&mut rng, &scale));
            let got = emd(&p, &q, 1.0).unwrap() * n as f64;
            worst = worst.max((got - greedy_transport(p.mass(), q.mass())).abs());
        }
    }
    outcome(
        worst <= EMD_TRANSPORT_TOL,
        format!(
            "5000 pairs, N=2..6, max |N*emd - transport| {worst:.2e} (tol {EMD_TRANSPORT_TOL:.0e})"
        ),
    )
}

fn maxent_fidelity() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scales = [BucketScale::ava(), BucketScale::tid()];
    let mut worst: f64 = 0.0;
    let mut errors = 0;
    for i in 0..1000 {
        let s = &scales[i % 2];
        let mu = rng.random_range(s.first()..s.last());
        let probe = MomentTarget::new(mu, 0.0, s.clone());
        let (lo, hi) = (probe.min_variance().sqrt(), probe.max_variance().sqrt());
        let sigma = lo + (hi - lo) * rng.random::<f64>();
        match fit_maxent_default(&MomentTarget::new(mu, sigma, s.clone())) {
            Ok(sol) => {
                worst = worst
                    .max((sol.dist.mean() - mu).abs())
                    .max((sol.dist.std_dev() - sigma).abs())
            }
            Err(_) => errors += 1,
        }
    }
    let elapsed = t0.elapsed();

    let uniform =
        fit_maxent_default(&MomentTarget::new(5.5, 8.25f64.sqrt(), BucketScale::ava())).unwrap();
    let lam = uniform.lambda1.abs().max(uniform.lambda2.abs());
    let rounded =
        fit_maxent_default(&MomentTarget::new(5.5, 2.872281, BucketScale::ava())).unwrap();
    let lam_rounded = rounded.lambda1.abs().max(rounded.lambda2.abs());
    outcome(
        errors == 0 && worst <= MAXENT_MOMENT_TOL && lam <= MAXENT_UNIFORM_TOL && elapsed < MAXENT_BUDGET,
        format!(
            "1000 targets, {errors} errors, max moment err {worst:.2e} (tol {MAXENT_MOMENT_TOL:.0e}), \
             {:.2}s of {}s; uniform (5.5, sqrt 8.25) max |lambda| {lam:.2e} (tol {MAXENT_UNIFORM_TOL:.0e}), \
             rounded sigma 2.872281 gives {lam_rounded:.2e}",
            elapsed.as_secs_f64(),
            MAXENT_BUDGET.as_secs()
        ),
    )
}

/// Values drawn from a small pool so ties are common. Pool entries are
/// multiples of 1/64 in [-5, 5], so the raw sums in the oracle are exact.
fn tied_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let pool: Vec<f64> = (0..rng.random_range(2..=len.max(2)))
        .map(|_| rng.random_range(-320..=320) as f64 / 64.0)
        .collect();
    (0..len)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_lcc, mut worst_srcc, mut worst_mono): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let (mut compared, mut degenerate_mismatch) = (0, 0);
    let transforms: [fn(f64) -> f64; 4] =
        [|x| 3.0 * x - 7.0, f64::exp, |x| x * x * x, |x| x.atan()];
    for _ in 0..1000 {
        let len = rng.random_range(2..=20);
        let x = tied_vector(&mut rng, len);
        let y = tied_vector(&mut rng, len);
        match (lcc(&x, &y), pearson_brute(&x, &y)) {
            (Ok(a), Some(b)) => worst_lcc = worst_lcc.max((a - b).abs()),
            (Err(_), None) => {}
            _ => degenerate_mismatch += 1,
        }
        match (srcc(&x, &y), spearman_brute(&x, &y)) {
            (Ok(a), Some(b)) => {
                worst_srcc = worst_srcc.max((a - b).abs());
                compared += 1;
            }
            (Err(_), None) => {}
            _ => degenerate_mismatch += 1,
        }
        if srcc(&x, &x).is_ok() {
            for f in transforms {
                let fx: Vec<f64> = x.iter().map(|v| f(*v)).collect();
                worst_mono = worst_mono.max((srcc(&x, &fx).unwrap() - 1.0).abs());
            }
        }
    }
    outcome(
        degenerate_mismatch == 0 && worst_lcc <= METRIC_TOL && worst_srcc <= METRIC_TOL && worst_mono <= METRIC_TOL,
        format!(
            "{compared} defined pairs, max |lcc - brute| {worst_lcc:.2e}, max |srcc - brute| {worst_srcc:.2e}, \
             max |srcc(x, f(x)) - 1| {worst_mono:.2e} (tol {METRIC_TOL:.0e}), degenerate mismatches {degenerate_mismatch}"
        ),
    )
}

struct Split {
    train: Vec<nima_core::data::DatasetRecord>,
    train_images: Vec<ImageTensor>,
    test: Vec<nima_core::data::DatasetRecord>,
    test_images: Vec<ImageTensor>,
}

fn synthetic_split(seed: u64) -> Split {
    let records = generate_synthetic(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let (train, test) = split(
        &records,
        SplitSpec {
            test_fraction: 0.2,
            seed,
        },
    )
    .unwrap();
    let train_images = train.iter().map(|r| r.load_image().unwrap()).collect();
    let test_images = test.iter().map(|r| r.load_image().unwrap()).collect();
    Split {
        train,
        train_images,
        test,
        test_images,
    }
}

fn predictions(params: &ModelParams, images: &[ImageTensor]) -> Vec<ScoreDistribution> {
    images
        .iter()
        .map(|img| predict(img, params).unwrap())
        .collect()
}

/// Head trained on frozen standardized statistics; one configuration for
/// both losses.
fn comparison_config(seed: u64, loss: LossKind) -> TrainConfig {
    TrainConfig {
        lr_backbone: 0.0,
        lr_head: 0.1,
        dropout_rate: 0.0,
        epochs: 100,
        batch_size: 32,
        resize_to: 32,
        crop_to: 28,
        hidden: vec![],
        seed,
        loss,
        ..TrainConfig::default()
    }
}

fn loss_comparison() -> Outcome {
    let t0 = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..LOSS_SEEDS {
        let data = synthetic_split(seed);
        let gt: Vec<_> = data.test.iter().map(|r| r.gt.clone()).collect();
        let mut test_emd = [0.0; 2];
        for (k, loss) in [LossKind::SquaredEmd, LossKind::CrossEntropy]
            .into_iter()
            .enumerate()
        {
            let (params, _) = train_on_images(
                &data.train,
                &data.train_images,
                &comparison_config(seed, loss),
            )
            .unwrap();
            test_emd[k] = evaluate(&predictions(&params, &data.test_images), &gt, 5.0)
                .unwrap()
                .mean_emd_r1;
        }
        wins += usize::from(test_emd[0] < test_emd[1]);
        rows.push(format!("{:.4}/{:.4}", test_emd[0], test_emd[1]));
    }
    let elapsed = t0.elapsed();
    outcome(
        wins >= LOSS_MIN_WINS && elapsed < LOSS_BUDGET,
        format!(
            "emd wins {wins}/{LOSS_SEEDS} (need {LOSS_MIN_WINS}), test emd emd/ce per seed [{}], {:.0}s of {}s",
            rows.join(" "),
            elapsed.as_secs_f64(),
            LOSS_BUDGET.as_secs()
        ),
    )
}

fn learning_sanity() -> Outcome {
    let data = synthetic_split(100);
    let config = TrainConfig {
        lr_backbone: 0.01,
        lr_head: 0.1,
        dropout_rate: 0.0,
        epochs: 60,
        batch_size: 32,
        resize_to: 32,
        crop_to: 28,
        hidden: vec![32],
        seed: 100,
        ..TrainConfig::default()
    };
    let (params, _) = train_on_images(&data.train, &data.train_images, &config).unwrap();
    let means: Vec<f64> = predictions(&params, &data.test_images)
        .iter()
        .map(|d| d.mean())
        .collect();
    let quality: Vec<f64> = data
        .test
        .iter()
        .map(|r| -(r.level.unwrap() as f64))
        .collect();
    let level_srcc = srcc(&means, &quality).unwrap();

    let single = &data.train[..1];
    let overfit = TrainConfig {
        lr_backbone: 0.1,
        lr_head: 1.0,
        dropout_rate: 0.0,
        epochs: 500,
        batch_size: 1,
        resize_to: 32,
        crop_to: 28,
        hflip: false,
        hidden: vec![16],
        seed: 7,
        ..TrainConfig::default()
    };
    let (_, trace) = train_on_images(single, &data.train_images[..1], &overfit).unwrap();
    let final_loss = *trace.last().unwrap();
    outcome(
        level_srcc >= LEVEL_SRCC_MIN && final_loss <= OVERFIT_LOSS_MAX,
        format!(
            "held-out srcc(pred mean, quality level) {level_srcc:.4} (min {LEVEL_SRCC_MIN}), \
             single-example final loss {final_loss:.2e} (max {OVERFIT_LOSS_MAX:.0e})"
        ),
    )
}

/// Smooth gradient with a few sinusoidal patches, in [0.1, 0.9].
fn clean_image(seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (size, channels) = (32, 3);
    let mut data = vec![0.0; size * size * channels];
    let base: Vec<f64> = (0..channels)
        .map(|_| rng.random_range(0.35..0.65))
        .collect();
    let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let patches: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
                rng.random_range(4.0..12.0),
                rng.random_range(0.05..0.15),
            )
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 / size as f64 - 0.5, y as f64 / size as f64 - 0.5);
            let mut v = gx * fx + gy * fy;
            for &(cx, cy, period, amp) in &patches {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                v += amp * (-d2 / 50.0).exp() * (std::f64::consts::TAU * x as f64 / period).sin();
            }
            for c in 0..channels {
                data[(y * size + x) * channels + c] = (base[c] + v).clamp(0.1, 0.9);
            }
        }
    }
    ImageTensor::new(size, size, channels, data).unwrap()
}

fn neg_mse(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    -sse / a.data().len() as f64
}

fn tuner_oracle() -> Outcome {
    let grid = OperatorGrid::default_denoise();
    let mut matched = 0;
    let mut picks = Vec::new();
    for seed in 0..TUNE_IMAGES {
        let clean = clean_image(seed);
        let noisy = add_awgn(&clean, TUNE_SIGMA, 1000 + seed).unwrap();
        // one crop spanning the whole image, so the oracle needs no offsets
        let protocol = TuneProtocol {
            n_crops: 1,
            crop_size: clean.height(),
            seed,
        };
        let result = tune(
            &noisy,
            &grid,
            &protocol,
            &OracleScorer {
                clean: clean.clone(),
            },
        )
        .unwrap();
        let mut best = (0, f64::NEG_INFINITY);
        for (i, setting) in grid.settings().enumerate() {
            let score = neg_mse(&denoise(&noisy, setting[0]).unwrap(), &clean);
            if score > best.1 {
                best = (i, score);
            }
        }
        matched += usize::from(result.best_index == best.0);
        picks.push(format!("{}", grid.setting(best.0)[0]));
    }
    let tone = OperatorGrid::default_tone();
    let axes: Vec<usize> = tone.axes.iter().map(|a| a.values.len()).collect();
    let tone_ok = tone.operator == Operator::Tone
        && tone.len() == TONE_GRID_SIZE
        && tone.settings().count() == TONE_GRID_SIZE;
    outcome(
        matched as u64 == TUNE_IMAGES && tone_ok,
        format!(
            "argmax matched {matched}/{TUNE_IMAGES} (best sigma [{}]), tone grid {} settings from axes {axes:?} \
             (expect {TONE_GRID_SIZE})",
            picks.join(" "),
            tone.len()
        ),
    )
}

fn nima(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_nima"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "nima {} failed: {}",
            args[0],
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

/// Checkpoint bytes, eval stdout and JSON report of one train/eval run.
type Artifacts = (Vec<u8>, Vec<u8>, Vec<u8>);

fn pipeline(dir: &Path) -> Result<Artifacts, String> {
    let d = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let train = [
        "train",
        "--data",
        &d("synth.txt"),
        "--out",
        &d("model.ckpt"),
        "--seed",
        "5",
        "--epochs",
        "3",
        "--hidden",
        "16",
        "--lr-backbone",
        "0.01",
        "--lr-head",
        "0.1",
        "--dropout",
        "0.5",
        "--resize-to",
        "16",
        "--crop-to",
        "12",
        "--batch-size",
        "8",
        "--holdout",
        "0.2",
    ];
    nima(&train)?;
    let ckpt = std::fs::read(d("model.ckpt")).map_err(|e| e.to_string())?;
    let eval = nima(&[
        "eval",
        "--data",
        &d("synth.txt"),
        "--model",
        &d("model.ckpt"),
        "--seed",
        "5",
        "--holdout",
        "0.2",
        "--out",
        &d("report.json"),
    ])?;
    let report = std::fs::read(d("report.json")).map_err(|e| e.to_string())?;
    Ok((ckpt, eval.stdout, report))
}

fn determinism() -> Outcome {
    let run = || -> Result<String, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = dir.path().to_string_lossy().into_owned();
        nima(&[
            "gen-synth",
            "--out",
            &out,
            "--n-base",
            "12",
            "--size",
            "16",
            "--seed",
            "9",
        ])?;
        let first = pipeline(dir.path())?;
        let second = pipeline(dir.path())?;
        let same = [
            first.0 == second.0,
            first.1 == second.1,
            first.2 == second.2,
        ];
        if same.iter().all(|s| *s) {
            Ok(format!(
                "checkpoint {} bytes, eval stdout {} bytes, report {} bytes identical across two runs",
                first.0.len(),
                first.1.len(),
                first.2.len()
            ))
        } else {
            Err(format!("identical [checkpoint, stdout, report] = {same:?}"))
        }
    };
    match run() {
        Ok(detail) => outcome(true, detail),
        Err(detail) => outcome(false, detail),
    }
}

fn reference_moments() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut fits = Vec::new();
    for (mu, sigma) in REFERENCE_MOMENTS {
        let sol = fit_maxent_default(&MomentTarget::new(mu, sigma, BucketScale::ava())).unwrap();
        let (m, s) = (sol.dist.mean(), sol.dist.std_dev());
        worst = worst.max((m - mu).abs()).max((s - sigma).abs());
        fits.push(format!("{mu}/{sigma} -> {m:.7}/{s:.7}"));
    }
    outcome(
        worst <= MAXENT_MOMENT_TOL,
        format!(
            "{}; max err {worst:.2e} (tol {MAXENT_MOMENT_TOL:.0e})",
            fits.join(", ")
        ),
    )
}
