//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

use std::io::Write;
use std::process::ExitCode;

use cpu_time::ProcessTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use r2d2::autodiff::Tape;
use r2d2::datagen::{build_correspondences, make_scene, Homography, SceneKind, SceneSpec};
use r2d2::eval::{matching_score, mma, repeatability_score, Match};
use r2d2::extractor::{nms_local_maxima, pyramid_sizes};
use r2d2::losses::{ap_kappa_loss, cosim_loss, exact_ap, exact_ap_from_distances, peakiness_loss, soft_ap, warp_heatmap};
use r2d2::selfcheck::{composite_checks, primitive_checks, rank_instance, CheckKind, GradCheckConfig};
use r2d2::trainer::{run_toy_ablation, ToyAblationConfig};
use r2d2::{
    extract_keypoints, mutual_nn_match, AblationMode, DenseModel, ExtractConfig, Keypoint, KeypointSet, MatchSet,
    Network, NetworkOutputs, PairGeometry, Result, Tensor, TrainConfig, DESCRIPTOR_DIM,
};

// Criterion 1.
const PRIMITIVE_TOLERANCE: f64 = 1e-4;
const COMPOSITE_TOLERANCE: f64 = 1e-3;
const GRAD_TRIALS: usize = 20;
const GRAD_STEP: f64 = 1e-3;
const GRAD_CPU_SECONDS: f64 = 120.0;
const REQUIRED_LOSSES: [&str; 6] =
    ["cosim_loss", "peakiness_loss", "repeatability_loss", "ap_kappa_loss", "soft_ap", "total_loss"];

// Criterion 2.
const AP_INSTANCES: usize = 1000;
const AP_DATABASE: usize = 20;
const AP_BINS: usize = 25;
const AP_MEAN_ERROR: f64 = 0.05;
const AP_MAX_ERROR: f64 = 0.15;

// Criterion 3.
const LIMIT_TOLERANCE: f64 = 1e-6;
const KAPPA: f64 = 0.5;

// Criterion 4.
const TOY_ITERATIONS: usize = 2000;
const TOY_CPU_SECONDS: f64 = 15.0 * 60.0;
const CORNER_OVER_BACKGROUND: f64 = 1.5;
const BOARD_OVER_TRIANGLE: f64 = 0.8;
const FIG_SCENES: u64 = 8;
const FIG_SIDE: usize = 128;
/// S is pooled over this radius before sampling, matching the repeatability tolerance.
const CORNER_RADIUS: usize = 3;
/// Background pixels keep this distance from both objects.
const BACKGROUND_MARGIN: usize = 6;
const TRIANGLE_MARGIN: usize = 4;

// Criterion 6.
const TOP_K: usize = 200;
const SCORE_THRESHOLD: f64 = 0.0;
const PIXEL_TOLERANCE: f64 = 3.0;
const HELD_OUT_PAIRS: usize = 20;
const MIN_REPEATABILITY: f64 = 0.5;

// Criterion 9.
const DETERMINISM_ITERATIONS: usize = 12;

type Verdict = std::result::Result<String, String>;

fn report(id: usize, title: &str, verdict: Verdict) -> bool {
    let (tag, detail, ok) = match verdict {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id} {tag}: {title}: {detail}");
    let _ = out.flush();
    ok
}

fn require(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Verdict {
    let cfg = GradCheckConfig::default();
    if cfg.trials < GRAD_TRIALS || cfg.step != GRAD_STEP {
        return Err(format!("default config has {} trials, step {}", cfg.trials, cfg.step));
    }
    let clock = ProcessTime::now();
    let mut checks = primitive_checks(&cfg);
    checks.extend(composite_checks(&cfg));
    let cpu = clock.elapsed().as_secs_f64();
    let mut problems = Vec::new();
    for c in &checks {
        let limit = match c.kind {
            CheckKind::Primitive => PRIMITIVE_TOLERANCE,
            _ => COMPOSITE_TOLERANCE,
        };
        if !(c.value <= limit) || c.trials < GRAD_TRIALS {
            problems.push(format!("{} error {:.2e} over {} trials", c.name, c.value, c.trials));
        }
    }
    for name in REQUIRED_LOSSES {
        if !checks.iter().any(|c| c.name == name) {
            problems.push(format!("{name} not checked"));
        }
    }
    if cpu >= GRAD_CPU_SECONDS {
        problems.push(format!("{cpu:.0}s CPU"));
    }
    let worst = |kind: CheckKind| checks.iter().filter(|c| c.kind == kind).map(|c| c.value).fold(0.0, f64::max);
    let summary = format!(
        "{} checks, worst primitive {:.2e}, worst composite {:.2e}, {cpu:.1}s CPU",
        checks.len(),
        worst(CheckKind::Primitive),
        worst(CheckKind::Composite)
    );
    require(problems.is_empty(), if problems.is_empty() { summary } else { problems.join("; ") })
}

fn ap_oracle() -> Result<Verdict> {
    let hand: [(&[bool], f64); 3] = [
        (&[true, false, false], 1.0),
        (&[false, true], 0.5),
        (&[true, false, true], (1.0 + 2.0 / 3.0) / 2.0),
    ];
    for (ranked, expected) in hand {
        let got = exact_ap(ranked)?;
        if (got - expected).abs() > 1e-12 {
            return Ok(Err(format!("exact AP of {ranked:?} is {got}, expected {expected}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut sum, mut worst) = (0.0f64, 0.0f64);
    for _ in 0..AP_INSTANCES {
        let positives = rng.random_range(2..=5);
        let (distances, labels) = rank_instance(&mut rng, AP_DATABASE, positives);
        let err = (soft_ap(&distances, &labels, AP_BINS)? - exact_ap_from_distances(&distances, &labels)?).abs();
        sum += err;
        worst = worst.max(err);
    }
    let mean = sum / AP_INSTANCES as f64;
    Ok(require(
        mean <= AP_MEAN_ERROR && worst <= AP_MAX_ERROR,
        format!("mean |soft - exact| {mean:.4}, max {worst:.4} over {AP_INSTANCES} instances"),
    ))
}

fn loss_limits() -> Result<Verdict> {
    let n = 16;
    let mut tape = Tape::<f64>::new();
    let texture: Vec<f64> = (0..n * n).map(|i| 0.1 + ((i * 11) % 17) as f64 / 20.0).collect();
    let s = tape.leaf(Tensor::from_f64([n, n], &texture)?, false);
    let field = build_correspondences(&Homography::identity(), (n, n), (n, n));
    let (warped, mask) = warp_heatmap(&mut tape, s, &field)?;
    let cosim = cosim_loss(&mut tape, s, warped, &mask, n, 1)?;
    let constant = tape.leaf(Tensor::full([n, n], 0.42), false);
    let flat = peakiness_loss(&mut tape, constant, n, 1)?;
    let mut spike = vec![0.0; n * n];
    spike[3 * n + 12] = 1.0;
    let spike = tape.leaf(Tensor::from_f64([n, n], &spike)?, false);
    let peaky = peakiness_loss(&mut tape, spike, n, 1)?;
    let mut gate: f64 = 0.0;
    for ap in [0.0, 0.25, 0.5, 0.8, 1.0] {
        gate = gate.max((ap_kappa_loss(ap, 0.0, KAPPA)? - 0.5).abs());
    }
    let errors = [
        ("cosim(S, S)", tape.value(cosim).item().abs()),
        ("peaky(constant)", (tape.value(flat).item() - 1.0).abs()),
        ("peaky(spike)", (tape.value(peaky).item() - 1.0 / 256.0).abs()),
        ("AP gate at R = 0", gate),
    ];
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors.iter().map(|(k, e)| format!("{k} off by {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok(require(worst <= LIMIT_TOLERANCE, detail))
}

/// Max of `map` over a `(2r+1)²` window, clipped at the border.
fn max_pool(map: &Tensor<f32>, r: usize) -> Vec<f32> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let d = map.data();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut m = f32::MIN;
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    m = m.max(d[yy * w + xx]);
                }
            }
            out[y * w + x] = m;
        }
    }
    out
}

/// (corner S / background S, board-interior R / triangle-neighborhood R),
/// pooled over held-out scenes.
fn gate_statistics(net: &Network<f32>) -> Result<(f64, f64)> {
    let (mut corner, mut background, mut board, mut triangle) = ([0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]);
    let add = |acc: &mut [f64; 2], v: f32| {
        acc[0] += v as f64;
        acc[1] += 1.0;
    };
    for k in 0..FIG_SCENES {
        let scene = make_scene(&SceneSpec::new(SceneKind::CheckerboardTriangle, FIG_SIDE, FIG_SIDE, 9000 + k))?;
        let toy = scene.annotations.as_ref().expect("checkerboard scenes are annotated");
        let out = net.infer(&scene.image)?;
        let w = FIG_SIDE;
        let pooled = max_pool(&out.repeatability, CORNER_RADIUS);
        for &(cx, cy) in &toy.checker_corners {
            add(&mut corner, pooled[cy.round() as usize * w + cx.round() as usize]);
        }
        let near_board = toy.checkerboard.dilate(BACKGROUND_MARGIN, w, w);
        let near_triangle = toy.triangle.dilate(BACKGROUND_MARGIN, w, w);
        let inner = BACKGROUND_MARGIN..w - BACKGROUND_MARGIN;
        for y in inner.clone() {
            for x in inner.clone() {
                if !near_board.contains(x, y) && !near_triangle.contains(x, y) {
                    add(&mut background, pooled[y * w + x]);
                }
            }
        }
        let r = out.reliability.data();
        for (x, y) in toy.checkerboard.erode(toy.square_size).pixels() {
            add(&mut board, r[y * w + x]);
        }
        for (x, y) in toy.triangle.dilate(TRIANGLE_MARGIN, w, w).pixels() {
            add(&mut triangle, r[y * w + x]);
        }
    }
    let mean = |a: [f64; 2]| a[0] / a[1];
    Ok((mean(corner) / mean(background), mean(board) / mean(triangle)))
}

fn toy_runs() -> Result<[Verdict; 3]> {
    let cfg = ToyAblationConfig::default();
    let setup_ok = cfg.train.iterations == TOY_ITERATIONS
        && cfg.extract.top_k == TOP_K
        && cfg.extract.repeatability_threshold == SCORE_THRESHOLD
        && cfg.extract.reliability_threshold == SCORE_THRESHOLD
        && cfg.eval.repeatability_tolerance == PIXEL_TOLERANCE
        && cfg.eval_pairs == HELD_OUT_PAIRS;
    if !setup_ok {
        let e = Err("toy ablation defaults drifted from the pinned setup".to_string());
        return Ok([e.clone(), e.clone(), e]);
    }
    let outcome = run_toy_ablation(&cfg)?;
    let report = &outcome.report;
    for line in report.to_table().lines() {
        let _ = writeln!(std::io::stdout().lock(), "    {line}");
    }
    let full = report.row(AblationMode::Full).expect("full row");
    let reliability_only = report.row(AblationMode::ReliabilityOnly).expect("reliability-only row");
    let net = outcome.network(AblationMode::Full).expect("full network");

    let (corner_ratio, board_ratio) = gate_statistics(net)?;
    let fig = require(
        corner_ratio >= CORNER_OVER_BACKGROUND
            && board_ratio <= BOARD_OVER_TRIANGLE
            && full.train_cpu_seconds <= TOY_CPU_SECONDS,
        format!(
            "corner/background S {corner_ratio:.2} (>= {CORNER_OVER_BACKGROUND}), board/triangle R {board_ratio:.2} (<= {BOARD_OVER_TRIANGLE}), {:.0}s CPU",
            full.train_cpu_seconds
        ),
    );
    let table = require(
        report.rows.len() == 3 && full.mma_at_3 >= reliability_only.mma_at_3,
        format!(
            "{} rows, MMA@3 full {:.3} vs reliability only {:.3}",
            report.rows.len(),
            full.mma_at_3,
            reliability_only.mma_at_3
        ),
    );
    let rep = require(
        full.repeatability_score >= MIN_REPEATABILITY,
        format!(
            "mean repeatability {:.3} (>= {MIN_REPEATABILITY}) over {HELD_OUT_PAIRS} pairs, K = {TOP_K}, {PIXEL_TOLERANCE} px",
            full.repeatability_score
        ),
    );
    Ok([fig, table, rep])
}

/// S, R and descriptors read straight from the image channels.
struct ChannelModel;

impl DenseModel for ChannelModel {
    fn infer(&self, image: &Tensor<f32>) -> Result<NetworkOutputs<f32>> {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let px = image.data().chunks_exact(3);
        let mut d = Vec::with_capacity(h * w * DESCRIPTOR_DIM);
        for p in px.clone() {
            let mut v = vec![0.0f32; DESCRIPTOR_DIM];
            v[0] = p[2];
            v[1] = 1.0 - p[2];
            d.extend(v);
        }
        Ok(NetworkOutputs {
            descriptors: Tensor::new([h, w, DESCRIPTOR_DIM], d)?,
            repeatability: Tensor::new([h, w], px.clone().map(|p| p[0]).collect())?,
            reliability: Tensor::new([h, w], px.map(|p| p[1]).collect())?,
        })
    }
}

fn extraction_invariants() -> Result<Verdict> {
    let factor = 2f64.powf(-0.25);
    let mins: Vec<usize> = pyramid_sizes(256, 256, factor, 128).iter().map(|l| l.1.min(l.2)).collect();
    if mins != [256, 215, 181, 152, 128] || pyramid_sizes(128, 128, factor, 128).len() != 1 {
        return Ok(Err(format!("pyramid schedule {mins:?}")));
    }
    let mut plateau = Tensor::<f32>::zeros([7, 7]);
    plateau.data_mut()[3 * 7 + 3] = 1.0;
    plateau.data_mut()[3 * 7 + 4] = 1.0;
    let ones = Tensor::full([7, 7], 1.0f32);
    if !nms_local_maxima(&plateau, &ones, &ones, 0.0, 0.0)?.is_empty() {
        return Ok(Err("a two-pixel plateau survived NMS".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let side = 160;
    let image = Tensor::new([side, side, 3], (0..side * side * 3).map(|_| rng.random::<f32>()).collect())?;
    let cfg = |top_k| ExtractConfig {
        top_k,
        repeatability_threshold: 0.1,
        reliability_threshold: 0.1,
        ..ExtractConfig::default()
    };
    let all = extract_keypoints(&image, &ChannelModel, &cfg(100_000))?;
    let sorted = all.keypoints.windows(2).all(|w| w[0].score >= w[1].score);
    let monotone = [1, 7, 50, 400].iter().all(|&k| {
        extract_keypoints(&image, &ChannelModel, &cfg(k)).is_ok_and(|s| s.keypoints[..] == all.keypoints[..k.min(all.len())])
    });
    let (mut strict, mut product) = (true, true);
    let px = |x: usize, y: usize, c: usize| image.data()[(y * side + x) * 3 + c];
    for k in all.keypoints.iter().filter(|k| k.scale == 1.0) {
        let (x, y) = (k.x as usize, k.y as usize);
        for (dx, dy) in [(-1i64, -1i64), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
            strict &= px(x, y, 0) > px((x as i64 + dx) as usize, (y as i64 + dy) as usize, 0);
        }
        product &= k.score == px(x, y, 0) * px(x, y, 1);
    }
    Ok(require(
        sorted && monotone && strict && product && !all.is_empty(),
        format!(
            "pyramid exact, {} keypoints, sorted {sorted}, prefix-monotone {monotone}, strict maxima {strict}, score = S*R {product}",
            all.len()
        ),
    ))
}

fn axis(i: usize, dim: usize) -> Vec<f32> {
    let mut d = vec![0.0; dim];
    d[i] = 1.0;
    d
}

fn keypoints(points: &[(f32, f32)], descriptors: impl Fn(usize) -> Vec<f32>) -> KeypointSet {
    KeypointSet {
        keypoints: points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Keypoint {
                x,
                y,
                scale: 1.0,
                score: 1.0,
                descriptor: descriptors(i),
            })
            .collect(),
        width: 100,
        height: 100,
    }
}

fn metric_oracles() -> Result<Verdict> {
    let identity = PairGeometry::identity(100, 100);
    let mut failures = Vec::new();

    // Two B points compete for a0; b2 pairs with a1; a2 and b3 are alone.
    let a = keypoints(&[(10.0, 10.0), (30.0, 30.0), (60.0, 60.0)], |i| axis(i, 4));
    let b = keypoints(&[(11.0, 10.0), (10.0, 12.0), (31.0, 31.0), (90.0, 5.0)], |i| axis(i, 4));
    if repeatability_score(&a, &b, &identity, 3.0)?.value != 2.0 / 3.0 {
        failures.push("repeatability 2/3");
    }

    // Reprojection errors 0.5, 1.5, 2.5 and 9 px.
    let a = keypoints(&[(10.0, 10.0), (20.0, 20.0), (30.0, 30.0), (40.0, 40.0)], |i| axis(i, 4));
    let b = keypoints(&[(10.5, 10.0), (20.0, 21.5), (32.5, 30.0), (40.0, 49.0)], |i| axis(i, 4));
    let four = MatchSet {
        matches: (0..4).map(|i| Match { a: i, b: i, distance: 0.0 }).collect(),
        mutual: true,
    };
    if mma(&four, &a, &b, &Homography::identity(), &[3.0])?.ratios[0].value != 0.75 {
        failures.push("MMA 3/4");
    }

    // Ten features per side; descriptors pair a_i with b_i for i < 6 but B
    // swaps the positions of 4 and 5, leaving 4 correct mutual matches.
    let spots: Vec<(f32, f32)> = (0..10).map(|i| (5.0 + 9.0 * i as f32, 50.0)).collect();
    let mut swapped = spots.clone();
    swapped.swap(4, 5);
    let a = keypoints(&spots, |i| axis(if i < 6 { i } else { i + 6 }, 16));
    let b = keypoints(&swapped, |i| axis(i, 16));
    if matching_score(&a, &b, &identity, 3.0)?.value != Some(0.4) {
        failures.push("M-score 0.4");
    }

    // a0 at angle 0, a1 at 0.5 rad, b0 at 0.3 rad: a0's nearest is b0 but
    // b0's nearest is a1.
    let planar = |t: f64| {
        let mut d = vec![0.0f32; 4];
        d[0] = t.cos() as f32;
        d[1] = t.sin() as f32;
        d
    };
    let a = keypoints(&[(0.0, 0.0), (0.0, 0.0)], |i| planar([0.0, 0.5][i]));
    let b = keypoints(&[(0.0, 0.0)], |_| planar(0.3));
    let pairs: Vec<(usize, usize)> = mutual_nn_match(&a, &b)?.matches.iter().map(|m| (m.a, m.b)).collect();
    if pairs != [(1, 0)] {
        failures.push("mutual-NN exclusion");
    }

    Ok(require(
        failures.is_empty(),
        if failures.is_empty() {
            "repeatability 2/3, MMA 3/4, M-score 0.4 and mutual-NN exclusion exact".into()
        } else {
            format!("wrong: {}", failures.join(", "))
        },
    ))
}

fn determinism() -> Result<Verdict> {
    let cfg = TrainConfig {
        iterations: DETERMINISM_ITERATIONS,
        ..TrainConfig::toy()
    };
    let first = r2d2::train(&cfg)?.checkpoint.to_bytes();
    let trained = r2d2::train(&cfg)?;
    let second = trained.checkpoint.to_bytes();
    let scene = make_scene(&SceneSpec::new(SceneKind::CheckerboardTriangle, 160, 160, 4242))?;
    let extract = ExtractConfig {
        repeatability_threshold: 0.0,
        reliability_threshold: 0.0,
        ..ExtractConfig::default()
    };
    let once = extract_keypoints(&scene.image, trained.network(), &extract)?.to_bytes();
    let twice = extract_keypoints(&scene.image, trained.network(), &extract)?.to_bytes();
    Ok(require(
        first == second && once == twice,
        format!(
            "checkpoints of two {DETERMINISM_ITERATIONS}-iteration runs identical: {}, extract repeated identical: {} ({} bytes)",
            first == second,
            once == twice,
            once.len()
        ),
    ))
}

fn flatten(r: Result<Verdict>) -> Verdict {
    r.unwrap_or_else(|e| Err(format!("error: {e}")))
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "gradient suite", gradient_suite());
    ok &= report(2, "AP oracle", flatten(ap_oracle()));
    ok &= report(3, "loss limit identities", flatten(loss_limits()));
    let [fig, table, rep] = match toy_runs() {
        Ok(v) => v,
        Err(e) => [Err(format!("error: {e}")), Err(format!("error: {e}")), Err(format!("error: {e}"))],
    };
    ok &= report(4, "checkerboard/triangle heatmaps", fig);
    ok &= report(5, "ablation ordering", table);
    ok &= report(6, "repeatability under known homography", rep);
    ok &= report(7, "pyramid and extraction invariants", flatten(extraction_invariants()));
    ok &= report(8, "metric oracles", flatten(metric_oracles()));
    ok &= report(9, "determinism", flatten(determinism()));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
