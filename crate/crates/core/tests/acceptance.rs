//! Release acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; the process fails if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use autofocus::backend::http::{encode_png, probe, HttpConfig, HttpVisionModel};
use autofocus::backend::{draw_marker, MarkerStyle, PINK};
use autofocus::config::check_reference;
use autofocus::coord_parser::{axial_perplexity, CoordinateGrammar, PerplexityScope, TokenScore};
use autofocus::field::{grid_moments, mixture_moments, GaussianKernel};
use autofocus::geometry::{
    global_box, local_box, make_crop_transform, remap_to_global, shape_aware_zoom, BBox, ImageSize,
    Point, ResizePolicy,
};
use autofocus::harness::{evaluate, stats::mann_whitney_greater, viz, EvalCase, EvalReport};
use autofocus::mock_world::{
    benchmark_cases, generate_scene, mock_ground, BenchmarkSpec, MockServer, MockVisionModel,
    NoiseModel, SceneSpec, ServerOptions,
};
use autofocus::pipeline::{run, Backends, PipelineConfig, Variant};
use autofocus::proposals::nms;
use autofocus::uncertainty::{CoordinateSample, SampleSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_golden(name: &str, bytes: &[u8]) -> Result<(), String> {
    let got = sha256_hex(bytes);
    let want = std::fs::read_to_string(golden(name))
        .map_err(|e| format!("golden {name} unreadable ({e}); computed {got}"))?;
    ensure(want.trim() == got, || {
        format!("{name}: expected {}, got {got}", want.trim())
    })
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let extent = ImageSize::new(1000, 1000).unwrap();
    let mut worst = [0.0f64; 4];
    for m in 0..50 {
        let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let kernels: Vec<GaussianKernel> = raw
            .iter()
            .map(|w| GaussianKernel {
                mu: Point::new(
                    rng.random_range(350.0..650.0),
                    rng.random_range(350.0..650.0),
                ),
                sigma_x: rng.random_range(8.0..40.0),
                sigma_y: rng.random_range(8.0..40.0),
                weight: w / z,
            })
            .collect();
        let sigma_min = kernels
            .iter()
            .flat_map(|k| [k.sigma_x, k.sigma_y])
            .fold(f64::INFINITY, f64::min);
        let cell = sigma_min / 8.0;
        let closed = mixture_moments(&kernels).map_err(|e| e.to_string())?;
        let grid = grid_moments(&kernels, cell, extent).map_err(|e| e.to_string())?;
        ensure(!grid.truncated, || {
            format!("mixture {m} leaks off the grid")
        })?;
        let g = grid.moments;
        let errs = [
            rel(g.mean.x, closed.mean.x),
            rel(g.mean.y, closed.mean.y),
            rel(g.var_x, closed.var_x),
            rel(g.var_y, closed.var_y),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
        // The mean is also checked on the scale of the spread, which is far
        // stricter than relative to its absolute position.
        let shift = (g.mean.x - closed.mean.x)
            .abs()
            .max((g.mean.y - closed.mean.y).abs());
        ensure(shift < 1e-3 * sigma_min, || {
            format!("mixture {m}: mean off by {shift} px")
        })?;
    }
    let elapsed = started.elapsed().as_secs_f64();
    let max_err = worst.iter().cloned().fold(0.0, f64::max);
    ensure(max_err < 1e-3, || format!("max relative error {max_err:e}"))?;
    ensure(elapsed < 10.0, || format!("took {elapsed:.2}s"))?;
    Ok(format!(
        "50 mixtures, max relative error {max_err:.2e}, {elapsed:.2}s"
    ))
}

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min)
        + (b.x_max - b.x_min) * (b.y_max - b.y_min)
        - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Repeatedly take the best remaining box (lowest index among equal scores)
/// and strike every remaining box that overlaps it too much.
fn oracle_nms(boxes: &[BBox], scores: &[f64], thr: f64, keep: usize) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut out = Vec::new();
    while out.len() < keep {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        out.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && oracle_iou(&boxes[b], &boxes[i]) > thr {
                alive[i] = false;
            }
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..200 {
        let n = rng.random_range(1..=8);
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..120.0), rng.random_range(0.0..120.0));
                let (w, h) = (rng.random_range(5.0..90.0), rng.random_range(5.0..90.0));
                BBox::new(x, y, x + w, y + h).unwrap()
            })
            .collect();
        // coarse scores so that ties occur
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..4) as f64 * 0.25)
            .collect();
        let thr = [0.0, 0.3, 0.5, 0.7][rng.random_range(0..4)];
        let keep = rng.random_range(1..=n);
        let got = nms(&boxes, &scores, thr, keep).map_err(|e| e.to_string())?;
        let want = oracle_nms(&boxes, &scores, thr, keep);
        ensure(got == want, || {
            format!("instance {case}: {got:?} != {want:?}")
        })?;
    }
    Ok("200 instances match the brute-force oracle".into())
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let x0 = rng.random_range(0.0..1500.0);
        let y0 = rng.random_range(0.0..800.0);
        let b = BBox::new(
            x0,
            y0,
            x0 + rng.random_range(10.0..600.0),
            y0 + rng.random_range(10.0..600.0),
        )
        .unwrap();
        let target = if i % 2 == 0 {
            ResizePolicy::default().target_for(b.width().ceil() as u32, b.height().ceil() as u32)
        } else {
            ImageSize::new(rng.random_range(64..2000), rng.random_range(64..2000)).unwrap()
        };
        let t = make_crop_transform(b, target).map_err(|e| e.to_string())?;
        let p = Point::new(
            rng.random_range(b.x_min..b.x_max),
            rng.random_range(b.y_min..b.y_max),
        );
        let back = remap_to_global(t.to_local(p), &t);
        let q = Point::new(
            rng.random_range(0.0..target.width as f64),
            rng.random_range(0.0..target.height as f64),
        );
        let fwd = t.to_local(remap_to_global(q, &t));
        worst = worst.max(back.distance(&p)).max(fwd.distance(&q));
    }
    ensure(worst < 1e-6, || format!("round trip error {worst:e}"))?;

    for _ in 0..1000 {
        let x0 = rng.random_range(-50.0..500.0);
        let y0 = rng.random_range(-50.0..500.0);
        let b = BBox::new(
            x0,
            y0,
            x0 + rng.random_range(1.0..700.0),
            y0 + rng.random_range(1.0..700.0),
        )
        .unwrap();
        let same = shape_aware_zoom(b, 0.0).map_err(|e| e.to_string())?;
        ensure(same == b, || {
            format!("lambda 0 changed {b:?} into {same:?}")
        })?;
        let sq = shape_aware_zoom(b, 1.0).map_err(|e| e.to_string())?;
        let side = b.width().max(b.height());
        // equal up to the rounding of recentering
        ensure((sq.width() - sq.height()).abs() <= 1e-12 * side, || {
            format!("lambda 1 gave {}x{}", sq.width(), sq.height())
        })?;
        ensure((sq.width() - side).abs() <= 1e-9 * side, || {
            format!("lambda 1 side {} vs {side}", sq.width())
        })?;
    }
    Ok(format!(
        "1000 remaps, worst error {worst:.1e} px; zoom endpoints exact"
    ))
}

fn criterion_4() -> Outcome {
    let l = local_box(Point::new(100.0, 50.0), 20.0, 10.0).map_err(|e| e.to_string())?;
    ensure(l.width() == 120.0 && l.height() == 60.0, || {
        format!("3-sigma box {}x{}", l.width(), l.height())
    })?;
    let g = global_box(Point::new(100.0, 100.0), 20.0, 10.0, 5.0).map_err(|e| e.to_string())?;
    ensure(g.width() == 100.0 && g.height() == 50.0, || {
        format!("global box {}x{}", g.width(), g.height())
    })?;
    let b = BBox::new(0.0, 0.0, 100.0, 300.0).unwrap();
    let z = shape_aware_zoom(b, 0.5).map_err(|e| e.to_string())?;
    ensure(z.width() == 200.0 && z.height() == 300.0, || {
        format!("zoomed {}x{}", z.width(), z.height())
    })?;
    let t = vec![
        TokenScore::new("1", 0.5f64.ln()),
        TokenScore::new("2", 0.5f64.ln()),
    ];
    let ppl = axial_perplexity(&t, 0..2).map_err(|e| e.to_string())?;
    ensure(ppl == 2.0, || format!("perplexity {ppl:?}"))?;
    Ok("120x60, 100x50, 200x300, ppl 2".into())
}

fn criterion_5() -> Outcome {
    let spec = SceneSpec::default();
    let noise = NoiseModel::default();
    let grammar = CoordinateGrammar::default();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut hit, mut miss) = (Vec::new(), Vec::new());
    let area = (spec.size.width * spec.size.height) as f64;
    for trial in 0..1000u64 {
        let scene = generate_scene(50_000 + trial, &spec).map_err(|e| e.to_string())?;
        let target = &scene.elements[rng.random_range(0..scene.elements.len())];
        ensure(target.bbox.area() <= 0.01 * area, || {
            "target larger than 1% of the image".into()
        })?;
        let r = mock_ground(&scene, &target.instruction(), noise, 0.0, trial, &grammar)
            .map_err(|e| e.to_string())?;
        let s = CoordinateSample::from_tokens(
            r.point,
            &r.tokens,
            &r.spans,
            PerplexityScope::Coordinate,
            SampleSource::Initial,
        )
        .map_err(|e| e.to_string())?;
        if target.bbox.contains(&r.point) {
            hit.push(s.ppl_total);
        } else {
            miss.push(s.ppl_total);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let test = mann_whitney_greater(&miss, &hit).ok_or("degenerate samples")?;
    let (mh, mm) = (mean(&hit), mean(&miss));
    ensure(mm > mh, || format!("mean ppl miss {mm:.4} <= hit {mh:.4}"))?;
    ensure(test.p_greater < 0.01, || {
        format!("p = {:.3e}", test.p_greater)
    })?;
    Ok(format!(
        "{} hits (mean ppl {mh:.3}), {} misses (mean ppl {mm:.3}), one-sided p = {:.2e}",
        hit.len(),
        miss.len(),
        test.p_greater
    ))
}

struct BenchRuns {
    cases: Vec<EvalCase>,
    reports: Vec<(Variant, EvalReport, f64)>,
}

fn bench_runs() -> Result<BenchRuns, String> {
    let cases = benchmark_cases(&BenchmarkSpec::default()).map_err(|e| e.to_string())?;
    let model = MockVisionModel::default();
    let mut reports = Vec::new();
    for variant in [
        Variant::Baseline,
        Variant::MultiSampleOnly,
        Variant::GlobalOnly,
        Variant::Full,
    ] {
        let cfg = PipelineConfig {
            variant,
            refinement_enabled: variant != Variant::Baseline,
            ..Default::default()
        };
        let out = evaluate(&cases, &cfg, Backends::single(&model), 4).map_err(|e| e.to_string())?;
        reports.push((variant, out.report, out.wall_clock.as_secs_f64()));
    }
    Ok(BenchRuns { cases, reports })
}

fn accuracy(runs: &BenchRuns, v: Variant) -> f64 {
    runs.reports
        .iter()
        .find(|r| r.0 == v)
        .and_then(|r| r.1.accuracy)
        .expect("variant was evaluated")
}

fn criterion_6(runs: &BenchRuns) -> Outcome {
    let base = accuracy(runs, Variant::Baseline);
    let full = accuracy(runs, Variant::Full);
    let secs = runs
        .reports
        .iter()
        .find(|r| r.0 == Variant::Full)
        .map(|r| r.2)
        .unwrap_or(0.0);
    ensure(runs.cases.len() == 200, || {
        format!("{} scenes", runs.cases.len())
    })?;
    ensure(full - base >= 0.10, || {
        format!("refined {full:.3} vs baseline {base:.3}")
    })?;
    ensure(secs < 300.0, || format!("full run took {secs:.0}s"))?;
    Ok(format!(
        "200 scenes: no-refine {:.1}%, refine {:.1}% (+{:.1} points), {secs:.1}s",
        100.0 * base,
        100.0 * full,
        100.0 * (full - base)
    ))
}

fn criterion_7(runs: &BenchRuns) -> Outcome {
    let a = [
        Variant::Full,
        Variant::GlobalOnly,
        Variant::MultiSampleOnly,
        Variant::Baseline,
    ]
    .map(|v| accuracy(runs, v));
    ensure(a[0] >= a[1] && a[1] >= a[2] && a[2] >= a[3], || {
        format!("{a:?}")
    })?;
    Ok(format!(
        "full {:.1}% >= global-only {:.1}% >= multi-sample {:.1}% >= baseline {:.1}%",
        100.0 * a[0],
        100.0 * a[1],
        100.0 * a[2],
        100.0 * a[3]
    ))
}

fn criterion_8(runs: &BenchRuns) -> Outcome {
    let model = MockVisionModel::default();
    let cfg = PipelineConfig::default();
    let again =
        evaluate(&runs.cases, &cfg, Backends::single(&model), 2).map_err(|e| e.to_string())?;
    let first = runs
        .reports
        .iter()
        .find(|r| r.0 == Variant::Full)
        .map(|r| r.1.to_json())
        .unwrap();
    ensure(first == again.report.to_json(), || {
        "two identical runs produced different reports".into()
    })?;

    let canvas = image::RgbImage::from_pixel(64, 64, image::Rgb([255, 255, 255]));
    let marker = draw_marker(&canvas, Point::new(32.0, 32.0), &MarkerStyle::default());
    ensure(marker.pixels().any(|p| p.0 == PINK), || {
        "marker not drawn".into()
    })?;
    check_golden("marker_64.sha256", &encode_png(&marker))?;

    // heatmap of the first benchmark case that went through refinement
    let trace = again
        .traces
        .iter()
        .flatten()
        .find(|t| !t.kernels.is_empty())
        .ok_or("no refined case")?;
    let heat = viz::render_heatmap(trace, 8).map_err(|e| e.to_string())?;
    check_golden("heatmap_first_refined.sha256", &viz::gray_png(&heat))?;
    Ok("reports byte-identical; marker and heatmap PNG hashes match".into())
}

fn criterion_9() -> Outcome {
    let cases = benchmark_cases(&BenchmarkSpec {
        n_scenes: 6,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let mock = Arc::new(MockVisionModel::default());
    let server =
        MockServer::start(mock.clone(), ServerOptions::default(), 0).map_err(|e| e.to_string())?;
    let client = HttpVisionModel::new(HttpConfig::new(server.base_url(), "mock"))
        .map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::default();
    let local =
        evaluate(&cases, &cfg, Backends::single(mock.as_ref()), 2).map_err(|e| e.to_string())?;
    let remote = evaluate(&cases, &cfg, Backends::single(&client), 2).map_err(|e| e.to_string())?;
    ensure(local.report.to_json() == remote.report.to_json(), || {
        "HTTP and in-process reports differ".into()
    })?;
    let to_json =
        |t: &[Option<autofocus::Trace>]| serde_json::to_string(t).expect("traces serialize");
    let (lt, rt) = (to_json(&local.traces), to_json(&remote.traces));
    ensure(lt == rt, || {
        let at = lt
            .bytes()
            .zip(rt.bytes())
            .position(|(a, b)| a != b)
            .unwrap_or(lt.len().min(rt.len()));
        format!(
            "traces differ near: {}",
            &lt[at.saturating_sub(80)..(at + 40).min(lt.len())]
        )
    })?;
    let refined = local
        .report
        .cases
        .iter()
        .filter(|c| c.n_proposals > 0)
        .count();
    ensure(refined > 0, || {
        "no case exercised the refinement path".into()
    })?;

    // a single query with the full trace, for good measure
    let img = match &cases[0].image {
        autofocus::harness::ImageSource::Memory(i) => i.clone(),
        _ => unreachable!(),
    };
    let a = run(
        img.clone(),
        &cases[0].instruction,
        &cfg,
        Backends::single(mock.as_ref()),
    )
    .map_err(|e| e.to_string())?;
    let b = run(img, &cases[0].instruction, &cfg, Backends::single(&client))
        .map_err(|e| e.to_string())?;
    ensure(
        serde_json::to_string(&a.1).unwrap() == serde_json::to_string(&b.1).unwrap(),
        || "single-query traces differ".into(),
    )?;

    let stub =
        MockServer::start(mock, ServerOptions { logprobs: false }, 0).map_err(|e| e.to_string())?;
    let stub_client = HttpVisionModel::new(HttpConfig::new(stub.base_url(), "mock"))
        .map_err(|e| e.to_string())?;
    let report = probe(&stub_client, &CoordinateGrammar::default());
    ensure(!report.ok, || {
        "probe passed against a stub without logprobs".into()
    })?;
    ensure(report.message.contains("log-probabilities"), || {
        format!("unclear diagnostic: {}", report.message)
    })?;
    let good = probe(&client, &CoordinateGrammar::default());
    ensure(good.ok && good.n_tokens > 0, || {
        format!("probe failed on the real mock: {}", good.message)
    })?;
    Ok(format!(
        "6 cases ({refined} refined) identical over HTTP; stub probe: \"{}\"",
        report.message
    ))
}

fn criterion_10() -> Outcome {
    let cfg = PipelineConfig::default();
    let u = &cfg.uncertainty;
    let p = &cfg.proposals;
    ensure(
        u.temperature == 0.75 && u.top_p == 1.0 && u.n_samples == 5 && u.beta == 50.0,
        || format!("{u:?}"),
    )?;
    ensure(
        p.k_local == 3 && p.k_global() == 2 && p.alphas == vec![5.0, 8.0],
        || format!("{p:?}"),
    )?;
    ensure(p.lambda == 0.5 && p.min_crop == 336.0, || format!("{p:?}"))?;
    let mismatches = check_reference(&cfg);
    ensure(mismatches.is_empty(), || mismatches.join("; "))?;
    Ok(
        "tau 0.75, top_p 1, N 5, beta 50, K_local 3, K_global 2 (5, 8), lambda 0.5, min crop 336"
            .into(),
    )
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let secs = started.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
        Err(why) => println!("criterion {n:>2} {name}: FAIL ({why}) [{secs:.1}s]"),
    }
    result.is_ok()
}

fn main() {
    // `cargo test` passes harness flags such as --list; only run on a plain
    // invocation or an explicit filter of "acceptance".
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    println!("running acceptance criteria");
    let mut ok = true;
    ok &= report(1, "moment matching vs grid oracle", criterion_1);
    ok &= report(2, "NMS vs brute-force oracle", criterion_2);
    ok &= report(3, "geometry round trips", criterion_3);
    ok &= report(4, "spot values", criterion_4);
    ok &= report(5, "perplexity separates misses from hits", criterion_5);
    let runs = bench_runs();
    let runs = &runs;
    let with_runs = |f: fn(&BenchRuns) -> Outcome| {
        move || match runs {
            Ok(r) => f(r),
            Err(e) => Err(format!("benchmark evaluation failed: {e}")),
        }
    };
    ok &= report(
        6,
        "refinement gain on mock benchmark",
        with_runs(criterion_6),
    );
    ok &= report(7, "ablation ordering", with_runs(criterion_7));
    ok &= report(8, "determinism and golden files", with_runs(criterion_8));
    ok &= report(9, "wire protocol conformance", criterion_9);
    ok &= report(10, "default configuration", criterion_10);
    if ok {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
}
