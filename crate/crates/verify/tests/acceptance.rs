//! End-to-end acceptance suite. Runs without the libtest harness so each
//! criterion prints one PASS/FAIL line; exits non-zero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mdet_core::autodiff::Graph;
use mdet_core::bench::{
    bench_kernel, count_flops, total_flops, BenchKernel, Component, FpnVariant, TimingOptions,
};
use mdet_core::commands::{cmd_eval, cmd_gen, cmd_train, CHECKPOINT, VAL_SPLIT};
use mdet_core::config::{ModelConfig, RunConfig};
use mdet_core::gradcheck::{grad_check, GradCheckOptions};
use mdet_core::head::hungarian_match;
use mdet_core::model::{prepare_sample, BatchContext, Detector};
use mdet_core::params::{Init, ParamStore};
use mdet_core::pruner::{class_weight, generate_patch_labels, weighted_bce, PatchLabels, Pruner};
use mdet_core::ssm::kernels::{scan_lanes_blelloch, scan_lanes_sequential};
use mdet_core::ssm::{run_stack, BlockOptions, ScanKernel, SsmStack};
use mdet_core::synth::{generate_scene, to_png_bytes, SceneConfig};
use mdet_core::tensor::Tensor;
use mdet_core::tokenizer::PatchGrid;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn report(id: usize, name: &str, limit: Duration, elapsed: Duration, outcome: &Check) -> bool {
    let in_time = elapsed <= limit;
    let (ok, detail) = match outcome {
        Ok(d) if in_time => (true, d.clone()),
        Ok(d) => (
            false,
            format!("{d}; over the {:.0} s budget", limit.as_secs_f64()),
        ),
        Err(e) => (false, e.clone()),
    };
    println!(
        "criterion {id:>2} {name:<28} {}  {:>7.1} s  {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

fn timed(id: usize, name: &str, limit_secs: u64, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = f();
    report(
        id,
        name,
        Duration::from_secs(limit_secs),
        start.elapsed(),
        &outcome,
    )
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn scan_equivalence() -> Check {
    let lengths = [1usize, 2, 3, 17, 64, 257, 1024];
    let mut worst = 0.0f32;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Lane kernels on selective-style coefficients.
        for &t in &lengths {
            let lanes = 16;
            let decay: Vec<f32> = (0..t * lanes)
                .map(|_| (-rng.gen_range(0.001f32..0.1) * rng.gen_range(0.1f32..2.0)).exp())
                .collect();
            let input: Vec<f32> = (0..t * lanes)
                .map(|_| rng.gen_range(0.001f32..0.1) * rng.gen_range(-1.0f32..1.0))
                .collect();
            let x0: Vec<f32> = (0..lanes).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = scan_lanes_sequential(&decay, &input, &x0, lanes);
            let p = scan_lanes_blelloch(&decay, &input, &x0, lanes);
            let d = max_abs_diff(&s, &p);
            worst = worst.max(d);
            ensure(d <= 1e-5, || {
                format!("lanes: seed {seed}, T = {t}: max |Δ| = {d:e}")
            })?;
        }
        // A full bidirectional selective block under both kernels.
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB10C);
        let options = BlockOptions {
            kernel: ScanKernel::Sequential,
            ..BlockOptions::default()
        };
        let seq = SsmStack::new(
            &mut Init::new(&mut store, &mut init_rng),
            "s",
            1,
            16,
            8,
            options,
        );
        let mut par = seq.clone();
        par.blocks[0].options.kernel = ScanKernel::Parallel;
        for &t in &lengths {
            let u = Tensor::from_fn(&[t, 16], |_| rng.gen_range(-1.0f32..1.0));
            let a = run_stack(&u, &seq, &store).map_err(|e| e.to_string())?;
            let b = run_stack(&u, &par, &store).map_err(|e| e.to_string())?;
            let d = max_abs_diff(a.data(), b.data());
            worst = worst.max(d);
            ensure(d <= 1e-5, || {
                format!("block: seed {seed}, T = {t}: max |Δ| = {d:e}")
            })?;
        }
    }
    Ok(format!("max |Δ| = {worst:.2e} over 20 seeds x 7 lengths"))
}

fn scaling_trend() -> Check {
    let sizes: Vec<usize> = (10..=15).map(|e| 1usize << e).collect();
    let opts = TimingOptions::default();
    let run = |k| bench_kernel(k, &sizes, 64, 16, opts).map_err(|e| e.to_string());
    let scan = run(BenchKernel::SsmScanSeq)?;
    let attn = run(BenchKernel::DenseAttention)?;
    let slope = |r: &mdet_core::bench::ScalingRun| {
        r.fit
            .map(|f| f.slope)
            .ok_or_else(|| format!("{}: no slope ({} sizes timed)", r.kernel, r.sizes.len()))
    };
    let (s, a) = (slope(&scan)?, slope(&attn)?);
    ensure((0.85..=1.25).contains(&s), || {
        format!("ssm_scan slope {s:.3} outside [0.85, 1.25]")
    })?;
    ensure((1.7..=2.3).contains(&a), || {
        format!("dense_attention slope {a:.3} outside [1.7, 2.3]")
    })?;
    Ok(format!(
        "ssm_scan slope {s:.3}, dense_attention slope {a:.3}"
    ))
}

fn hungarian_optimality() -> Check {
    let mut cases = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in 1..=7usize {
            for m in n..=8usize {
                // Odd seeds use a small integer alphabet so ties are common.
                let cost: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        (0..m)
                            .map(|_| {
                                if seed % 2 == 1 {
                                    rng.gen_range(0..4) as f64
                                } else {
                                    rng.gen_range(-3.0..10.0)
                                }
                            })
                            .collect()
                    })
                    .collect();
                let (assignment, total) = common::brute_force_assignment(&cost);
                let got = hungarian_match(&Tensor::from_rows(&cost).map_err(|e| e.to_string())?)
                    .map_err(|e| e.to_string())?;
                ensure(got.total_cost == total, || {
                    format!(
                        "seed {seed}, {n}x{m}: cost {} vs brute force {total}",
                        got.total_cost
                    )
                })?;
                ensure(got.assignment == assignment, || {
                    format!(
                        "seed {seed}, {n}x{m}: assignment {:?} vs {assignment:?}",
                        got.assignment
                    )
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} matrices agree with enumeration"))
}

fn patch_label_oracle() -> Check {
    let patches = [16usize, 8, 12, 24, 32];
    let mut tokens = 0;
    for seed in 0..100u64 {
        let cfg = SceneConfig::default().with_seed(1_000 + seed);
        let (_, ann) = generate_scene(&cfg).map_err(|e| e.to_string())?;
        let patch = patches[seed as usize % patches.len()];
        let grid = PatchGrid::new(ann.height, ann.width, patch).map_err(|e| e.to_string())?;
        let got = generate_patch_labels(&grid, &ann.boxes).map_err(|e| e.to_string())?;
        let want = common::raster_patch_labels(ann.height, ann.width, patch, &ann.boxes);
        ensure(got.labels == want, || {
            format!("scene {seed} (Z = {patch}) differs from the raster")
        })?;
        tokens += want.len();
    }
    Ok(format!("100 scenes, {tokens} patches identical"))
}

fn pruning_contract() -> Check {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = [4usize, 8, 16][rng.gen_range(0..3)];
        let state = rng.gen_range(1..=4);
        let tokens = rng.gen_range(1..=64);
        let ratio = rng.gen_range(0.0..0.95);
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let pruner = Pruner::new(
            &mut Init::new(&mut store, &mut init_rng),
            "p",
            dim,
            state,
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            BlockOptions::default(),
        );
        let u = Tensor::from_fn(&[tokens, dim], |_| rng.gen_range(-1.0f32..1.0));
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let x = g.constant(u);
        let out = pruner
            .forward(&g, &p, x, ratio)
            .map_err(|e| e.to_string())?;
        let pre = g.value(out.pre).clone();
        let result = g.value(out.tokens).clone();
        let expect_kept = ((1.0 - ratio) * tokens as f64).round() as usize;
        ensure(out.decision.kept.len() == expect_kept, || {
            format!(
                "config {seed}: kept {} of {tokens} at r = {ratio:.3}",
                out.decision.kept.len()
            )
        })?;
        for &i in &out.decision.dropped {
            let same = pre
                .row(i)
                .iter()
                .zip(result.row(i))
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("config {seed}: dropped token {i} changed"))?;
        }
        // Oracle: gather the kept rows, run the deep stack, scatter back.
        if expect_kept == 0 {
            continue;
        }
        let kept_rows: Vec<f32> = out
            .decision
            .kept
            .iter()
            .flat_map(|&i| pre.row(i).to_vec())
            .collect();
        let gathered = Tensor::new(vec![expect_kept, dim], kept_rows).map_err(|e| e.to_string())?;
        let processed = run_stack(&gathered, &pruner.main, &store).map_err(|e| e.to_string())?;
        for (k, &i) in out.decision.kept.iter().enumerate() {
            let same = processed
                .row(k)
                .iter()
                .zip(result.row(i))
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || {
                format!("config {seed}: kept token {i} differs from gather-run-scatter")
            })?;
        }
    }
    Ok("50 configs: counts, dropped bits and kept outputs match".into())
}

fn gradient_checks() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let scene = SceneConfig {
            height: 64,
            width: 64,
            object_count: (1, 1),
            size_weights: [1.0, 1.0, 0.0],
            ..SceneConfig::default()
        };
        let (image, ann) = generate_scene(&scene.with_seed(seed)).map_err(|e| e.to_string())?;
        let cfg = ModelConfig {
            image_height: 64,
            image_width: 64,
            ..ModelConfig::default()
        };
        let (model, store) = Detector::new(&cfg, seed).map_err(|e| e.to_string())?;
        let sample =
            prepare_sample(&image.cast::<f64>(), &ann, cfg.patch).map_err(|e| e.to_string())?;
        ensure(sample.targets.len() == 1, || {
            "expected one ground-truth box".into()
        })?;
        let batch = BatchContext::new(&[&sample], 1.0).map_err(|e| e.to_string())?;
        let weights = RunConfig::default().train.loss;
        let store64 = store.cast::<f64>();
        let opts = GradCheckOptions {
            step: 1e-5,
            samples_per_tensor: 32,
            seed,
            floor: 1e-6,
        };
        let report = grad_check(
            |g, p| Ok(model.sample_loss(g, p, &sample, &batch, &weights)?.0.total),
            &store64,
            opts,
        )
        .map_err(|e| e.to_string())?;
        let (name, err) = report.worst().cloned().unwrap_or_default();
        worst = worst.max(err);
        ensure(report.max_relative_error < 1e-3, || {
            format!("seed {seed}: {name} relative error {err:.3e}")
        })?;
    }
    Ok(format!("worst relative error {worst:.2e} over 3 seeds"))
}

fn flop_ordering() -> Check {
    let mut lines = Vec::new();
    for (h, w) in [(256usize, 256usize), (1080, 1920)] {
        let base = |patch: usize, ratio: f64| ModelConfig {
            image_height: h,
            image_width: w,
            patch,
            prune_ratio: ratio,
            ..ModelConfig::default()
        };
        let rows = [
            total_flops(&base(16, 0.0), FpnVariant::Simple),
            total_flops(&base(16, 0.0), FpnVariant::Efficient),
            total_flops(&base(16, 0.5), FpnVariant::Efficient),
            total_flops(&base(32, 0.5), FpnVariant::Efficient),
        ];
        ensure(rows.windows(2).all(|p| p[0] > p[1]), || {
            format!("{h}x{w}: ordering broken: {rows:?}")
        })?;
        let full = count_flops(Component::MainBackbone { ratio: 0.0 }, &base(16, 0.0));
        let half = count_flops(Component::MainBackbone { ratio: 0.5 }, &base(16, 0.5));
        ensure(2.0 * half == full, || {
            format!("{h}x{w}: main backbone {half} is not half of {full}")
        })?;
        lines.push(format!(
            "{h}x{w}: {}",
            rows.iter()
                .map(|r| format!("{:.3}", r / 1e9))
                .collect::<Vec<_>>()
                .join(" > ")
        ));
    }
    Ok(format!("GMAC {}", lines.join("; ")))
}

fn bce_arithmetic() -> Check {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = rng.gen_range(1..=8);
        let per_image = rng.gen_range(1..=64);
        let fore_rate: f64 = rng.gen_range(0.0..0.6);
        let labels: Vec<u8> = (0..images * per_image)
            .map(|_| u8::from(rng.gen_bool(fore_rate)))
            .collect();
        let scores: Vec<f64> = labels.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
        let pl = PatchLabels::from_labels(labels.clone());
        let (w, loss) = common::bce_oracle(&scores, &labels);
        ensure(class_weight(&pl) == w, || {
            format!("batch {seed}: w = {} vs {w}", class_weight(&pl))
        })?;
        let got = weighted_bce(&scores, &pl).map_err(|e| e.to_string())?;
        ensure((got - loss).abs() <= 1e-12 * loss.abs().max(1.0), || {
            format!("batch {seed}: loss {got} vs {loss}")
        })?;
        let perfect: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
        let p = weighted_bce(&perfect, &pl).map_err(|e| e.to_string())?;
        ensure(p < 1e-5, || {
            format!("batch {seed}: perfect-prediction loss {p:e}")
        })?;
    }
    Ok("50 batches match the scalar oracle".into())
}

struct EndToEnd {
    quality: Check,
    determinism: Check,
    quality_time: Duration,
    determinism_time: Duration,
}

fn end_to_end(work: &Path) -> EndToEnd {
    let cfg = RunConfig::default();
    let data = work.join("data");
    let start = Instant::now();
    let prep = cmd_gen(&cfg, &data, false).map_err(|e| e.to_string());
    let gen_time = start.elapsed();

    let start = Instant::now();
    let first = prep.clone().and_then(|_| {
        cmd_train(&cfg, &data, &work.join("run_a"), false)
            .map(|_| ())
            .map_err(|e| e.to_string())
    });
    let eval = first.clone().and_then(|_| {
        cmd_eval(
            &cfg,
            &work.join("run_a").join(CHECKPOINT),
            &data,
            VAL_SPLIT,
            None,
        )
        .map_err(|e| e.to_string())
    });
    let quality_time = gen_time + start.elapsed();
    let quality = eval.and_then(|r| {
        let ap = r.ap50.unwrap_or(0.0);
        let fg = r.foreground.accuracy().unwrap_or(0.0);
        let detail = format!(
            "AP50 {ap:.3} (bands {}), fg accuracy {fg:.3}",
            r.ap50_band
                .iter()
                .map(|b| b.map_or("n/a".into(), |v| format!("{v:.3}")))
                .collect::<Vec<_>>()
                .join("/")
        );
        if ap >= 0.5 && fg >= 0.8 {
            Ok(detail)
        } else {
            Err(format!("{detail}; need AP50 >= 0.5 and fg accuracy >= 0.8"))
        }
    });

    let start = Instant::now();
    let determinism = first.and_then(|_| {
        cmd_train(&cfg, &data, &work.join("run_b"), false).map_err(|e| e.to_string())?;
        let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
        let a = read(&work.join("run_a").join(CHECKPOINT))?;
        let b = read(&work.join("run_b").join(CHECKPOINT))?;
        ensure(a == b, || "checkpoints of identical runs differ".into())?;
        for seed in 0..5u64 {
            let scene = cfg.scene_config().with_seed(seed);
            let png = || {
                generate_scene(&scene)
                    .and_then(|(img, _)| to_png_bytes(&img))
                    .map_err(|e| e.to_string())
            };
            ensure(png()? == png()?, || {
                format!("scene {seed}: PNG bytes differ")
            })?;
        }
        Ok(format!(
            "checkpoints identical ({} bytes), PNGs identical",
            a.len()
        ))
    });
    EndToEnd {
        quality,
        determinism,
        quality_time,
        determinism_time: quality_time + start.elapsed(),
    }
}

fn main() -> ExitCode {
    // libtest flags such as --list or a name filter arrive here too.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    // A name filter that does not match this target skips it.
    let names: Vec<&String> = args
        .iter()
        .filter(|a| !a.starts_with('-') && a.parse::<usize>().is_err())
        .collect();
    if !names.is_empty() && !names.iter().any(|n| "acceptance".contains(n.as_str())) {
        return ExitCode::SUCCESS;
    }
    // Numeric arguments restrict the run to those criteria.
    let only: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let want = |id: usize| only.is_empty() || only.contains(&id);
    let mut ok = true;
    let checks: [(usize, &str, u64, fn() -> Check); 8] = [
        (1, "scan equivalence", 30, scan_equivalence),
        (2, "linear vs quadratic trend", 600, scaling_trend),
        (3, "hungarian optimality", 60, hungarian_optimality),
        (4, "patch-label oracle", 60, patch_label_oracle),
        (5, "pruning contract", 60, pruning_contract),
        (6, "gradient checks", 300, gradient_checks),
        (7, "flop ordering", 1, flop_ordering),
        (9, "weighted-BCE arithmetic", 10, bce_arithmetic),
    ];
    for (id, name, limit, f) in checks {
        if want(id) {
            ok &= timed(id, name, limit, f);
        }
    }
    if want(8) || want(10) {
        let work = tempfile::tempdir().expect("temporary directory");
        let e2e = end_to_end(work.path());
        ok &= report(
            8,
            "desk-scale end-to-end",
            Duration::from_secs(20 * 60),
            e2e.quality_time,
            &e2e.quality,
        );
        ok &= report(
            10,
            "determinism",
            Duration::from_secs(25 * 60),
            e2e.determinism_time,
            &e2e.determinism,
        );
    }
    if ok {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: some criteria failed");
        ExitCode::FAILURE
    }
}
