//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p spagan-core --test acceptance`. Passing a
//! substring as the first argument (after `--`) runs only matching criteria.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spagan_core::attention_net::{
    sam_forward, sarb_forward, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
    ParamTree,
};
use spagan_core::data::{self, synth_pair, ImageU8, Sample};
use spagan_core::losses::{self, AttentionNorm};
use spagan_core::metrics::{self, SsimMode};
use spagan_core::numerics::gradcheck::{project, random_tensor};
use spagan_core::numerics::{
    grad_check, ops, BoundParams, Direction, GradCheck, GradCheckReport, Graph, NumericMode,
    Tensor, Var,
};
use spagan_core::trainer::{
    load_checkpoint, run_training, Prepared, RunOptions, TrainConfig, Trainer,
};

const SEEDS: u64 = 5;
const GRAD_TOL: f64 = 1e-4;
/// Relative-error denominator floor: gradients that are zero by construction
/// (a bias feeding a norm) only carry finite-difference roundoff.
const GRAD_FLOOR: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const METRIC_TOL: f64 = 1e-9;
const CLOSED_FORM_TOL: f64 = 1e-10;
const LOSS_TOL: f64 = 1e-9;
const JACOBIAN_FLOOR: f64 = 1e-12;
const OVERFIT_STEPS: u64 = 500;
const OVERFIT_MIN_GAIN_DB: f64 = 2.0;
const OVERFIT_MIN_ATT_DROP: f64 = 0.25;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient correctness", gradient_correctness),
        ("metric oracles", metric_oracles),
        ("irnn prefix-sum oracle", irnn_oracle),
        ("sam global receptive field", sam_receptive_field),
        ("loss identities", loss_identities),
        ("overfit smoke test", overfit_smoke),
        ("determinism and resume", determinism_and_resume),
        ("paper-number statement", paper_number_statement),
    ];
    let filter = std::env::args().nth(1).filter(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!(
            "{verdict} {name}: {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// gradients

fn leaf(name: &str, t: Tensor) -> (String, Tensor) {
    (name.to_string(), t)
}

fn tree_leaves(tree: &ParamTree, prefix: &str) -> Vec<(String, Tensor)> {
    tree.iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

fn bound(names: &[String], vars: &[Var]) -> BoundParams {
    BoundParams::from_vars(names.iter().cloned().zip(vars.iter().cloned()))
}

/// Replace every tensor under `prefix` by uniform noise in `[-r, r)`.
fn randomize(tree: &mut ParamTree, prefix: &str, r: f64, seed: u64) {
    let names: Vec<String> = tree
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(String::from)
        .collect();
    for (i, n) in names.into_iter().enumerate() {
        let shape = tree.get(&n).unwrap().shape().to_vec();
        tree.insert(n, random_tensor(&shape, -r, r, seed * 1000 + i as u64));
    }
}

fn primitive_checks(seed: u64) -> spagan_core::Result<Vec<GradCheckReport>> {
    let s = seed * 100;
    let all = GradCheck {
        tolerance: GRAD_TOL,
        max_per_leaf: None,
        seed,
        floor: GRAD_FLOOR,
        refine: true,
    };
    let sampled = GradCheck {
        max_per_leaf: Some(6),
        ..all.clone()
    };
    let mut out = Vec::new();
    let r = |shape: &[usize], k: u64| random_tensor(shape, -1.0, 1.0, s + k);

    let stride = 1 + (seed as usize % 2);
    let pad = seed as usize % 2 + usize::from(seed == 4);
    out.push(grad_check(
        &format!("conv2d stride {stride} pad {pad}"),
        &[
            leaf("x", r(&[2, 6, 7], 1)),
            leaf("w", r(&[3, 2, 3, 3], 2)),
            leaf("b", r(&[3], 3)),
        ],
        &all,
        |g, v| {
            let y = g.conv2d(&v[0], &v[1], &v[2], stride, pad)?;
            project(g, &y, s)
        },
    )?);
    out.push(grad_check("relu", &[leaf("x", r(&[3, 4, 4], 4))], &all, |g, v| {
        let y = g.relu(&v[0]);
        project(g, &y, s)
    })?);
    out.push(grad_check("leaky_relu", &[leaf("x", r(&[3, 4, 4], 5))], &all, |g, v| {
        let y = g.leaky_relu(&v[0], 0.2)?;
        project(g, &y, s)
    })?);
    out.push(grad_check("sigmoid", &[leaf("x", r(&[2, 4, 4], 6).map(|v| 4.0 * v))], &all, |g, v| {
        let y = g.sigmoid(&v[0]);
        project(g, &y, s)
    })?);
    out.push(grad_check(
        "channel_norm",
        &[
            leaf("x", r(&[3, 4, 5], 7)),
            leaf("gain", r(&[3], 8)),
            leaf("shift", r(&[3], 9)),
        ],
        &all,
        |g, v| {
            let y = g.channel_norm(&v[0], &v[1], &v[2], 1e-5)?;
            project(g, &y, s)
        },
    )?);
    out.push(grad_check(
        "add/mul/scale/concat",
        &[
            leaf("a", r(&[2, 3, 4], 10)),
            leaf("b", r(&[2, 3, 4], 11)),
            leaf("gate", r(&[1, 3, 4], 12)),
        ],
        &all,
        |g, v| {
            let sum = g.add(&v[0], &v[1])?;
            let gated = g.mul(&sum, &v[2])?;
            let prod = g.mul(&v[0], &v[1])?;
            let scaled = g.scale(&prod, -1.7);
            let y = g.concat_channels(&[&gated, &scaled, &v[2]])?;
            project(g, &y, s)
        },
    )?);
    out.push(grad_check(
        "weighted_l1/mean_sq/sum_sq/bce",
        &[leaf("p", r(&[3, 4, 4], 13)), leaf("t", r(&[3, 4, 4], 14))],
        &all,
        |g, v| {
            let l1 = g.weighted_l1(&v[0], &v[1], &[0.5, 1.0, 2.0])?;
            let ms = g.mean_squared_diff(&v[0], &v[1])?;
            let ss = g.sum_squared_diff(&v[0], &v[1])?;
            let b1 = g.bce_with_logits(&v[0], 1.0);
            let b0 = g.bce_with_logits(&v[1], 0.0);
            let mut total = g.add(&l1, &ms)?;
            for t in [&ss, &b1, &b0] {
                total = g.add(&total, t)?;
            }
            Ok(total)
        },
    )?);
    for (k, dir) in Direction::ALL.into_iter().enumerate() {
        out.push(grad_check(
            &format!("directional_sweep {}", dir.name()),
            &[
                leaf("x", r(&[3, 5, 6], 20 + k as u64)),
                leaf("w", r(&[3, 3], 30 + k as u64).map(|v| 0.6 * v)),
            ],
            &all,
            |g, v| {
                let y = g.directional_sweep(&v[0], &v[1], dir)?;
                project(g, &y, s)
            },
        )?);
    }

    let gen = Generator::new(GeneratorConfig::with_width(8))?;
    let mut params = gen.init_params(seed);
    for k in 1..=4 {
        randomize(&mut params, &format!("generator/sab{k}/sam/conv_out"), 0.1, s + k);
    }

    let sam = tree_leaves(&params, "generator/sab1/sam/");
    let sam_names: Vec<String> = sam.iter().map(|(n, _)| n.clone()).collect();
    let mut leaves = vec![leaf("features", r(&[8, 8, 8], 40))];
    leaves.extend(sam);
    out.push(grad_check("sam", &leaves, &sampled, |g, v| {
        let p = bound(&sam_names, &v[1..]);
        let y = sam_forward(g, &p, "generator/sab1/sam", &v[0])?;
        project(g, &y, s)
    })?);

    let sarb = tree_leaves(&params, "generator/sab1/sarb1/");
    let sarb_names: Vec<String> = sarb.iter().map(|(n, _)| n.clone()).collect();
    let mut leaves = vec![
        leaf("features", r(&[8, 8, 8], 41)),
        leaf("attention", random_tensor(&[1, 8, 8], 0.05, 0.95, s + 42)),
    ];
    leaves.extend(sarb);
    out.push(grad_check("sarb", &leaves, &sampled, |g, v| {
        let p = bound(&sarb_names, &v[2..]);
        let y = sarb_forward(g, &p, "generator/sab1/sarb1", &v[0], &v[1])?;
        project(g, &y, s)
    })?);

    let all_g = tree_leaves(&params, "");
    let g_names: Vec<String> = all_g.iter().map(|(n, _)| n.clone()).collect();
    let mut leaves = vec![leaf("image", random_tensor(&[3, 8, 8], 0.0, 1.0, s + 50))];
    leaves.extend(all_g);
    out.push(grad_check("generator width 8 on 3x8x8", &leaves, &sampled, |g, v| {
        let p = bound(&g_names, &v[1..]);
        let o = gen.forward(g, &p, &v[0])?;
        let mut total = project(g, &o.output, s)?;
        for (k, m) in o.maps.iter().enumerate() {
            let t = project(g, m, s + 1 + k as u64)?;
            total = g.add(&total, &t)?;
        }
        Ok(total)
    })?);

    // Default strides shrink 16x16 to nothing by the last layer, so the
    // 16x16 check uses one fewer stride-2 layer.
    let disc = Discriminator::new(DiscriminatorConfig {
        strides: vec![2, 2, 1, 1, 1],
        ..DiscriminatorConfig::with_base_width(8)
    })?;
    let dparams = disc.init_params(seed);
    let all_d = tree_leaves(&dparams, "");
    let d_names: Vec<String> = all_d.iter().map(|(n, _)| n.clone()).collect();
    let mut leaves = vec![
        leaf("condition", random_tensor(&[3, 16, 16], 0.0, 1.0, s + 60)),
        leaf("candidate", random_tensor(&[3, 16, 16], 0.0, 1.0, s + 61)),
    ];
    leaves.extend(all_d);
    out.push(grad_check("discriminator width 8 on 16x16", &leaves, &sampled, |g, v| {
        let p = bound(&d_names, &v[2..]);
        let y = disc.forward(g, &p, &v[0], &v[1])?;
        project(g, &y, s)
    })?);
    Ok(out)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: Option<GradCheckReport> = None;
    let mut failures = Vec::new();
    let mut checks = 0;
    let mut elements = 0;
    let mut refined = 0;
    for seed in 0..SEEDS {
        let reports = match primitive_checks(seed) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        for r in reports {
            checks += 1;
            elements += r.checked;
            refined += r.refined;
            if !r.passed() {
                failures.push(format!("seed {seed} {r}"));
            }
            if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                worst = Some(r);
            }
        }
    }
    let elapsed = start.elapsed();
    let worst = worst.map(|w| w.to_string()).unwrap_or_default();
    let mut detail = format!(
        "{checks} checks, {elements} elements over {SEEDS} seeds, tol {GRAD_TOL:.0e} (floor {GRAD_FLOOR:.0e}), \
         {refined} needed a smaller step, worst {worst}, {:.1}s of {}s budget",
        elapsed.as_secs_f64(),
        GRAD_BUDGET.as_secs()
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; failed: {}", failures.join("; ")));
    }
    outcome(failures.is_empty() && elapsed < GRAD_BUDGET, detail)
}

// ---------------------------------------------------------------------------
// metrics

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageU8 {
    let data = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
    ImageU8::new(w, h, data).unwrap()
}

/// A noisy, brightness-shifted copy so the pair has realistic correlation.
fn degraded(rng: &mut ChaCha8Rng, x: &ImageU8) -> ImageU8 {
    let shift: i32 = rng.random_range(-40..40);
    let data = x
        .data()
        .iter()
        .map(|&v| (v as i32 + shift + rng.random_range(-25..=25)).clamp(0, 255) as u8)
        .collect();
    ImageU8::new(x.width(), x.height(), data).unwrap()
}

fn oracle_mse(x: &ImageU8, y: &ImageU8) -> f64 {
    let n = x.data().len() as f64;
    x.data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n
}

fn oracle_psnr(x: &ImageU8, y: &ImageU8) -> f64 {
    10.0 * (255.0f64 * 255.0 / oracle_mse(x, y)).log10()
}

/// Two-term SSIM with raw moments; with C3 = C2 / 2 the contrast and
/// structure terms combine into `(2 cov + C2) / (vx + vy + C2)`.
fn oracle_ssim_block(xs: &[f64], ys: &[f64], w: &[f64]) -> f64 {
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let e = |f: &dyn Fn(usize) -> f64| (0..xs.len()).map(|i| w[i] * f(i)).sum::<f64>();
    let mx = e(&|i| xs[i]);
    let my = e(&|i| ys[i]);
    let vx = e(&|i| xs[i] * xs[i]) - mx * mx;
    let vy = e(&|i| ys[i] * ys[i]) - my * my;
    let cov = e(&|i| xs[i] * ys[i]) - mx * my;
    (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn oracle_ssim(x: &ImageU8, y: &ImageU8, mode: SsimMode) -> f64 {
    let (w, h) = (x.width(), x.height());
    let at = |img: &ImageU8, px: usize, py: usize, c: usize| img.pixel(px, py)[c] as f64;
    let mut total = 0.0;
    for c in 0..3 {
        total += match mode {
            SsimMode::Global => {
                let xs: Vec<f64> = (0..w * h).map(|i| at(x, i % w, i / w, c)).collect();
                let ys: Vec<f64> = (0..w * h).map(|i| at(y, i % w, i / w, c)).collect();
                let wt = vec![1.0 / (w * h) as f64; w * h];
                oracle_ssim_block(&xs, &ys, &wt)
            }
            SsimMode::Windowed => {
                let raw: Vec<f64> = (0..121)
                    .map(|i| {
                        let (dy, dx) = ((i / 11) as f64 - 5.0, (i % 11) as f64 - 5.0);
                        (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp()
                    })
                    .collect();
                let z: f64 = raw.iter().sum();
                let wt: Vec<f64> = raw.iter().map(|v| v / z).collect();
                let mut acc = 0.0;
                let mut n = 0;
                for y0 in 0..=h - 11 {
                    for x0 in 0..=w - 11 {
                        let xs: Vec<f64> = (0..121).map(|i| at(x, x0 + i % 11, y0 + i / 11, c)).collect();
                        let ys: Vec<f64> = (0..121).map(|i| at(y, x0 + i % 11, y0 + i / 11, c)).collect();
                        acc += oracle_ssim_block(&xs, &ys, &wt);
                        n += 1;
                    }
                }
                acc / n as f64
            }
        };
    }
    total / 3.0
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 4];
    for _ in 0..50 {
        let (w, h) = (rng.random_range(11..33), rng.random_range(11..33));
        let x = random_image(&mut rng, w, h);
        let y = degraded(&mut rng, &x);
        let diffs = [
            (metrics::mse(&x, &y).unwrap() - oracle_mse(&x, &y)).abs(),
            (metrics::psnr(&x, &y).unwrap().value() - oracle_psnr(&x, &y)).abs(),
            (metrics::ssim(&x, &y, SsimMode::Global).unwrap() - oracle_ssim(&x, &y, SsimMode::Global)).abs(),
            (metrics::ssim(&x, &y, SsimMode::Windowed).unwrap() - oracle_ssim(&x, &y, SsimMode::Windowed))
                .abs(),
        ];
        for (w, d) in worst.iter_mut().zip(diffs) {
            *w = w.max(d);
        }
    }
    let oracle_ok = worst.iter().all(|&d| d <= METRIC_TOL);

    let mut identity_ok = true;
    for _ in 0..10 {
        let x = random_image(&mut rng, 20, 17);
        for mode in [SsimMode::Global, SsimMode::Windowed] {
            identity_ok &= metrics::ssim(&x, &x, mode).unwrap() == 1.0;
        }
        identity_ok &= metrics::psnr(&x, &x).unwrap().is_infinite();
    }

    let c1 = (0.01f64 * 255.0).powi(2);
    let closed = |a: f64, b: f64| (2.0 * a * b + c1) / (a * a + b * b + c1);
    let mut closed_worst = 0.0f64;
    for (a, b) in [(100u8, 200u8), (0, 255), (17, 18), (128, 64)] {
        let x = ImageU8::filled(16, 16, [a; 3]);
        let y = ImageU8::filled(16, 16, [b; 3]);
        let got = metrics::ssim(&x, &y, SsimMode::Global).unwrap();
        closed_worst = closed_worst.max((got - closed(a as f64, b as f64)).abs());
    }
    let ab = metrics::ssim(
        &ImageU8::filled(16, 16, [100; 3]),
        &ImageU8::filled(16, 16, [200; 3]),
        SsimMode::Global,
    )
    .unwrap();
    let closed_ok = closed_worst <= CLOSED_FORM_TOL;
    outcome(
        oracle_ok && identity_ok && closed_ok,
        format!(
            "50 pairs max |diff| mse {:.1e} psnr {:.1e} ssim-global {:.1e} ssim-windowed {:.1e} (tol {METRIC_TOL:.0e}); \
             ssim(X,X)==1 and psnr inf: {identity_ok}; constant closed form max |diff| {closed_worst:.1e}, a=100 b=200 -> {ab:.6}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------------------
// irnn, receptive field, losses

fn irnn_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for case in 0..100 {
        let c = rng.random_range(1..5);
        let h = rng.random_range(1..10);
        let w = rng.random_range(1..10);
        let x = random_tensor(&[c, h, w], 0.0, 3.0, 1000 + case);
        let dir = Direction::ALL[case as usize % 4];
        let got = ops::directional_sweep(&x, &Tensor::eye(c), dir).unwrap();
        let mut expect = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let (ys, xs): (Vec<usize>, Vec<usize>) = match dir {
                        Direction::Right => ((y..=y).collect(), (0..=xx).collect()),
                        Direction::Left => ((y..=y).collect(), (xx..w).collect()),
                        Direction::Down => ((0..=y).collect(), (xx..=xx).collect()),
                        Direction::Up => ((y..h).collect(), (xx..=xx).collect()),
                    };
                    // accumulate in sweep order so the sum is bit-exact
                    let mut order: Vec<(usize, usize)> = ys
                        .iter()
                        .flat_map(|&a| xs.iter().map(move |&b| (a, b)))
                        .collect();
                    if matches!(dir, Direction::Left | Direction::Up) {
                        order.reverse();
                    }
                    let mut s = 0.0;
                    for (a, b) in order {
                        s += x.data()[ch * h * w + a * w + b];
                    }
                    expect[ch * h * w + y * w + xx] = s;
                }
            }
        }
        if got.data() != expect.as_slice() {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("100 random cases, {mismatches} not bit-identical to the prefix sum"),
    )
}

fn sam_receptive_field() -> Outcome {
    let gen = Generator::new(GeneratorConfig::with_width(8)).unwrap();
    let mut min_corner = f64::INFINITY;
    let mut min_any = f64::INFINITY;
    for seed in 0..SEEDS {
        let mut params = gen.init_params(seed);
        randomize(&mut params, "generator/sab1/sam/", 0.5, seed + 77);
        let feats = random_tensor(&[8, 8, 8], -1.0, 1.0, seed + 99);
        for out_px in 0..64 {
            let mut g = Graph::new();
            let p = g.bind(&params, false);
            let x = g.input(feats.clone());
            let map = sam_forward(&mut g, &p, "generator/sab1/sam", &x).unwrap();
            let mut onehot = Tensor::zeros(&[1, 8, 8]);
            onehot.data_mut()[out_px] = 1.0;
            let sel = g.constant(onehot);
            let picked = g.mul(&map, &sel).unwrap();
            let loss = g.sum(&picked);
            let grad = g.backward(&loss).unwrap().get_or_zeros(&x);
            for in_px in 0..64 {
                let mag = (0..8).map(|c| grad.data()[c * 64 + in_px].abs()).fold(0.0, f64::max);
                min_any = min_any.min(mag);
                if (out_px, in_px) == (0, 63) || (out_px, in_px) == (63, 0) {
                    min_corner = min_corner.min(mag);
                }
            }
        }
    }
    outcome(
        min_corner > JACOBIAN_FLOOR,
        format!(
            "{SEEDS} seeds, min |d out(0,0)/d in(7,7)| and reverse = {min_corner:.3e}, \
             min over all 64x64 pixel pairs = {min_any:.3e} (floor {JACOBIAN_FLOOR:.0e})"
        ),
    )
}

fn loss_identities() -> Outcome {
    let zeros = Tensor::zeros(&[1, 6, 6]);
    let (d, g) = losses::adversarial_losses(&zeros, &zeros);
    let ln2 = std::f64::consts::LN_2;
    let adv_ok = (d - 2.0 * ln2).abs() <= LOSS_TOL && (g - ln2).abs() <= LOSS_TOL;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for case in 0..200u64 {
        let shape = [3, rng.random_range(1..8), rng.random_range(1..8)];
        let a = random_tensor(&shape, 0.0, 1.0, case);
        let ch = [rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)];
        if losses::l1_loss_value(&a, &a, &ch).unwrap() != 0.0 {
            violations += 1;
        }
        let mut b = a.clone();
        let i = rng.random_range(0..b.numel());
        b.data_mut()[i] += rng.random_range(1e-6..1.0);
        if !(losses::l1_loss_value(&a, &b, &ch).unwrap() > 0.0) {
            violations += 1;
        }

        let mshape = [1, shape[1], shape[2]];
        let mask = Tensor::from_fn(&mshape, |_| f64::from(rng.random_bool(0.5)));
        let maps: Vec<Tensor> = (0..4).map(|_| mask.clone()).collect();
        let refs: Vec<&Tensor> = maps.iter().collect();
        for norm in [AttentionNorm::MeanOverMaps, AttentionNorm::LastMapFrobenius] {
            if losses::attention_loss_value(&refs, &mask, norm).unwrap() != 0.0 {
                violations += 1;
            }
        }
        let mut off = maps.clone();
        let j = rng.random_range(0..mask.numel());
        off[3].data_mut()[j] = 0.5;
        let refs: Vec<&Tensor> = off.iter().collect();
        for norm in [AttentionNorm::MeanOverMaps, AttentionNorm::LastMapFrobenius] {
            if !(losses::attention_loss_value(&refs, &mask, norm).unwrap() > 0.0) {
                violations += 1;
            }
        }
    }
    outcome(
        adv_ok && violations == 0,
        format!(
            "zero logits: d_loss - 2ln2 = {:.1e}, g_loss - ln2 = {:.1e} (tol {LOSS_TOL:.0e}); \
             200 randomized zero-iff-equal cases, {violations} violations",
            d - 2.0 * ln2,
            g - ln2
        ),
    )
}

// ---------------------------------------------------------------------------
// training

/// Mean over maps of the per-pixel mean `|A - M|`.
fn attention_error(trainer: &Trainer, p: &Prepared) -> f64 {
    let (_, maps) = trainer
        .generator()
        .infer(&trainer.state().generator, &p.input, trainer.config().mode)
        .unwrap();
    let per_map: Vec<f64> = maps
        .iter()
        .map(|m| {
            m.tensor()
                .data()
                .iter()
                .zip(p.mask.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / p.mask.numel() as f64
        })
        .collect();
    per_map.iter().sum::<f64>() / per_map.len() as f64
}

fn output_psnr(trainer: &Trainer, sample: &Sample, p: &Prepared) -> f64 {
    let (out, _) = trainer
        .generator()
        .infer(&trainer.state().generator, &p.input, trainer.config().mode)
        .unwrap();
    metrics::psnr(&data::from_tensor(&out).unwrap(), &sample.cloudless)
        .unwrap()
        .value()
}

fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let sample = synth_pair(0, 64).unwrap();
    let cfg = TrainConfig::desk();
    let p = Prepared::from_sample(&sample, cfg.mask_threshold).unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    let baseline = metrics::psnr(&sample.cloudy, &sample.cloudless).unwrap().value();
    let att_start = attention_error(&trainer, &p);
    for _ in 0..OVERFIT_STEPS {
        if let Err(e) = trainer.train_step(std::slice::from_ref(&p)) {
            return outcome(false, format!("training failed: {e}"));
        }
    }
    let final_psnr = output_psnr(&trainer, &sample, &p);
    let att_end = attention_error(&trainer, &p);
    let gain = final_psnr - baseline;
    let drop = 1.0 - att_end / att_start;
    let elapsed = start.elapsed();
    outcome(
        gain >= OVERFIT_MIN_GAIN_DB && drop >= OVERFIT_MIN_ATT_DROP && elapsed < OVERFIT_BUDGET,
        format!(
            "{OVERFIT_STEPS} steps on one 64x64 pair: psnr {baseline:.3} -> {final_psnr:.3} dB \
             (gain {gain:.2}, need {OVERFIT_MIN_GAIN_DB}); mean |A-M| {att_start:.4} -> {att_end:.4} \
             (drop {:.1}%, need {:.0}%)",
            100.0 * drop,
            100.0 * OVERFIT_MIN_ATT_DROP
        ),
    )
}

fn small_run_config() -> TrainConfig {
    TrainConfig {
        crop: 32,
        epochs: 2,
        eval_every: 0,
        seed: 11,
        mode: NumericMode::Exact,
        ..TrainConfig::desk()
    }
}

fn run_to_end(out: &Path, max_steps: Option<u64>, train: &Vec<Sample>, test: &Vec<Sample>) -> Trainer {
    let mut trainer = Trainer::new(small_run_config()).unwrap();
    let opts = RunOptions {
        out_dir: out.to_path_buf(),
        max_steps,
    };
    run_training(&mut trainer, train, test, &opts, &mut |_| {}).unwrap();
    trainer
}

fn determinism_and_resume() -> Outcome {
    let train: Vec<Sample> = (0..3).map(|i| synth_pair(40 + i, 40).unwrap()).collect();
    let test = vec![synth_pair(90, 32).unwrap()];
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));

    let ta = run_to_end(&a, None, &train, &test);
    let tb = run_to_end(&b, None, &train, &test);
    let log_a = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let log_b = fs::read_to_string(b.join("metrics.csv")).unwrap();
    let same_runs = log_a == log_b && ta.state().generator == tb.state().generator;

    // stop mid-way through the second epoch, reload and finish
    run_to_end(&c, Some(4), &train, &test);
    let ckpt = load_checkpoint(&c.join("ckpt_last")).unwrap();
    let stopped_at = ckpt.state.step;
    let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
    let opts = RunOptions {
        out_dir: c.clone(),
        max_steps: None,
    };
    run_training(&mut resumed, &train, &test, &opts, &mut |_| {}).unwrap();
    let log_c = fs::read_to_string(c.join("metrics.csv")).unwrap();
    let same_resume = log_a == log_c
        && ta.state().generator == resumed.state().generator
        && ta.state().discriminator == resumed.state().discriminator
        && ta.state().opt_g == resumed.state().opt_g;
    let rows = log_a.lines().count() - 1;
    outcome(
        same_runs && same_resume,
        format!(
            "{rows} logged steps; repeat run identical: {same_runs}; resumed at step {stopped_at} of 6 identical: {same_resume}"
        ),
    )
}

// ---------------------------------------------------------------------------
// documentation

fn paper_number_statement() -> Outcome {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = match fs::read_to_string(&readme) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("cannot read README.md: {e}")),
    };
    let needles = [
        "30.232",
        "0.954",
        "28.368",
        "0.906",
        "not reproducible",
        "spagan train --data",
        "--epochs 200",
        "--lr 0.0004",
    ];
    let missing: Vec<&str> = needles.iter().copied().filter(|n| !text.contains(n)).collect();
    outcome(
        missing.is_empty(),
        if missing.is_empty() {
            "README states both table results are not reproducible at desk scale and gives the full command".to_string()
        } else {
            format!("README is missing {missing:?}")
        },
    )
}
