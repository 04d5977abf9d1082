//! Acceptance criteria, one pass/fail line each.
//!
//! Runs without the test harness: `cargo test -p s2dloc-cli --test acceptance`.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix2x6, Rotation3, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use s2dloc::geometry::{pose_error, Pose};
use s2dloc::matching::{correlate, correlate_batch, quantile_value, CorrelationMap};
use s2dloc::pipeline::{
    evaluate_recall, localize_all, match_neighbor, LocalizationResult, LocalizerConfig, ReferenceDatabase,
    DEFAULT_THRESHOLDS,
};
use s2dloc::pose::{
    perturb, ransac_pnp, refine_pose, reprojection_error, reprojection_jacobian, reprojection_residual, solve_p3p,
    Correspondence2D3D, RansacConfig,
};
use s2dloc::retrieval::{rank, DescriptorDatabase, GlobalDescriptor};
use s2dloc::synth::{
    drop_detections, gen_feature_tensors, gen_pnp_problem, gen_scene_with, mutual_nearest_neighbors, oracle_correlate,
    oracle_quantile, random_unit_descriptors, random_unit_grid, NoiseSpec, SceneParams, SyntheticTensors,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(elapsed: Duration, budget_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < budget_s, format!("{s:.2}s of {budget_s}s"))
}

fn default_tensors(seed: u64, noise: &NoiseSpec) -> SyntheticTensors {
    let scene = gen_scene_with(seed, &SceneParams::default()).unwrap();
    gen_feature_tensors(&scene, 4, 64, noise).unwrap()
}

fn recalls(t: &SyntheticTensors) -> (Vec<f64>, usize) {
    let db = ReferenceDatabase::new(t.reference_entries()).unwrap();
    let queries = t.query_inputs();
    let results = localize_all(&queries, &db, &LocalizerConfig::default()).unwrap();
    let gt: HashMap<String, Pose> = queries
        .iter()
        .zip(&t.queries)
        .map(|(q, c)| (q.id.clone(), c.camera.pose))
        .collect();
    let report = evaluate_recall(&results, &gt, &DEFAULT_THRESHOLDS).unwrap();
    (report.recalls, report.total)
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let (w, h, c) = if i == 0 {
            (64, 64, 256)
        } else {
            (
                rng.random_range(1..=64),
                rng.random_range(1..=64),
                rng.random_range(1..=256),
            )
        };
        let grid = random_unit_grid(i, w, h, c).unwrap();
        let descs = random_unit_descriptors(i, 1 + (i as usize % 9), c);
        let batch = correlate_batch(&grid, &descs).unwrap();
        for (d, fast) in descs.iter().zip(&batch) {
            let oracle = oracle_correlate(&grid, d).unwrap();
            let single = correlate(&grid, d).unwrap();
            for ((a, b), s) in fast.values().iter().zip(oracle.values()).zip(single.values()) {
                worst = worst.max((a - b).abs() as f64).max((s - b).abs() as f64);
            }
        }
    }
    let mut quantile_mismatches = 0;
    for i in 0..1000u64 {
        let n = match i % 4 {
            0 => rng.random_range(1..64),
            1 => rng.random_range(64..2048),
            _ => rng.random_range(2048..20_000),
        };
        let values: Vec<f32> = (0..n)
            .map(|_| {
                let v: f32 = rng.sample(StandardNormal);
                // coarse values force ties
                if i % 5 == 0 {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect();
        let map = CorrelationMap::new(n, 1, values.clone()).unwrap();
        let fraction = [0.006, 0.0, 0.01, 0.5, 0.999][i as usize % 5];
        if quantile_value(&map, fraction).to_bits() != oracle_quantile(&values, fraction).to_bits() {
            quantile_mismatches += 1;
        }
    }
    let (fast, time) = within(t.elapsed(), 10.0);
    Outcome {
        pass: worst <= 1e-6 && quantile_mismatches == 0 && fast,
        detail: format!("max |diff| {worst:.2e}, quantile mismatches {quantile_mismatches}/1000, {time}"),
    }
}

fn p3p_exactness() -> Outcome {
    let t = Instant::now();
    let (mut worst_c, mut worst_r, mut worst_px) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0;
    for seed in 0..1000u64 {
        let p = gen_pnp_problem(seed, 3, 0.0, 0.0).unwrap();
        let c = &p.correspondences;
        let Ok(candidates) = solve_p3p(&c[0], &c[1], &c[2], &p.intrinsics) else {
            failures += 1;
            continue;
        };
        let best = candidates
            .iter()
            .map(|cand| pose_error(cand, &p.pose))
            .min_by(|a, b| a.position_m.total_cmp(&b.position_m))
            .unwrap();
        worst_c = worst_c.max(best.position_m);
        worst_r = worst_r.max(best.rotation_deg);
        for cand in &candidates {
            for corr in c {
                worst_px = worst_px.max(reprojection_error(cand, &p.intrinsics, corr));
            }
        }
    }
    let (fast, time) = within(t.elapsed(), 5.0);
    Outcome {
        pass: failures == 0 && worst_c < 1e-9 && worst_r < 1e-8 && worst_px <= 1e-6 && fast,
        detail: format!(
            "worst center {worst_c:.2e} m, rotation {worst_r:.2e} deg, self-reprojection {worst_px:.2e} px, {failures} unsolved, {time}"
        ),
    }
}

fn ransac_robustness() -> Outcome {
    let t = Instant::now();
    let cfg = RansacConfig {
        inlier_threshold_px: 12.0,
        ..RansacConfig::default()
    };
    let mut good = 0;
    for seed in 0..100u64 {
        let p = gen_pnp_problem(seed, 100, 0.4, 1.0).unwrap();
        let res = ransac_pnp(&p.correspondences, &p.intrinsics, &RansacConfig { seed, ..cfg }).unwrap();
        if let Some(e) = res.estimate() {
            let err = pose_error(&e.pose, &p.pose);
            if err.position_m < 0.05 && err.rotation_deg < 0.5 {
                good += 1;
            }
        }
    }
    let mut false_accepts = 0;
    for seed in 0..100u64 {
        let p = gen_pnp_problem(10_000 + seed, 100, 1.0, 0.0).unwrap();
        let res = ransac_pnp(&p.correspondences, &p.intrinsics, &RansacConfig { seed, ..cfg }).unwrap();
        if res.estimate().is_some() {
            false_accepts += 1;
        }
    }
    let (fast, time) = within(t.elapsed(), 30.0);
    Outcome {
        pass: good >= 95 && false_accepts == 0 && fast,
        detail: format!("{good}/100 within 0.05 m and 0.5 deg, {false_accepts}/100 false accepts, {time}"),
    }
}

fn numeric_jacobian(pose: &Pose, c: &Correspondence2D3D, p: &s2dloc::synth::PnpProblem) -> Matrix2x6<f64> {
    let h = 1e-6;
    let mut j = Matrix2x6::zeros();
    for k in 0..6 {
        let mut d = Vector6::zeros();
        d[k] = h;
        let plus = reprojection_residual(&perturb(pose, &d), &p.intrinsics, c).unwrap();
        let minus = reprojection_residual(&perturb(pose, &-d), &p.intrinsics, c).unwrap();
        j.set_column(k, &((plus - minus) / (2.0 * h)));
    }
    j
}

fn refinement_gradient() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut cost_increases = 0;
    for seed in 0..100u64 {
        let p = gen_pnp_problem(seed, 30, 0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta = Vector6::from_fn(|i, _| rng.sample::<f64, _>(StandardNormal) * if i < 3 { 0.02 } else { 0.1 });
        let start = perturb(&p.pose, &delta);
        for c in &p.correspondences[..5] {
            let Some(analytic) = reprojection_jacobian(&start, &p.intrinsics, &c.landmark) else {
                continue;
            };
            let numeric = numeric_jacobian(&start, c, &p);
            worst = worst.max((analytic - numeric).norm() / analytic.norm());
        }
        let r = refine_pose(&start, &p.correspondences, &p.intrinsics).unwrap();
        if r.final_cost > r.initial_cost {
            cost_increases += 1;
        }
    }
    let (fast, time) = within(t.elapsed(), 5.0);
    Outcome {
        pass: worst <= 1e-5 && cost_increases == 0 && fast,
        detail: format!("worst relative Jacobian error {worst:.2e}, {cost_increases} cost increases, {time}"),
    }
}

fn end_to_end() -> Outcome {
    let t = Instant::now();
    let (clean, _) = recalls(&default_tensors(0, &NoiseSpec::default()));
    let noise = NoiseSpec {
        descriptor_noise_sigma: 0.3,
        outlier_fraction: 0.3,
        ..NoiseSpec::default()
    };
    let mut hits = [0.0f64; 3];
    let mut total = 0usize;
    for seed in 0..20u64 {
        let (r, n) = recalls(&default_tensors(seed, &noise));
        for (h, v) in hits.iter_mut().zip(&r) {
            *h += v / 100.0 * n as f64;
        }
        total += n;
    }
    let noisy: Vec<f64> = hits.iter().map(|h| 100.0 * h / total as f64).collect();
    let clean_ok = clean.iter().all(|&r| r == 100.0);
    let (fast, time) = within(t.elapsed(), 120.0);
    Outcome {
        pass: clean_ok && noisy[2] == 100.0 && noisy[1] >= 90.0 && fast,
        detail: format!(
            "clean {:.1}/{:.1}/{:.1}, noisy over 20 seeds {:.1}/{:.1}/{:.1}, {time}",
            clean[0], clean[1], clean[2], noisy[0], noisy[1], noisy[2]
        ),
    }
}

fn ablation() -> Outcome {
    let t = Instant::now();
    let params = SceneParams {
        num_refs: 3,
        num_queries: 1,
        ..SceneParams::default()
    };
    let cfg = LocalizerConfig::default();
    let mut wins = 0;
    let (mut s2d_total, mut s2s_total) = (0usize, 0usize);
    for seed in 0..50u64 {
        let scene = gen_scene_with(seed, &params).unwrap();
        let tensors = gen_feature_tensors(&scene, 4, 64, &NoiseSpec::default()).unwrap();
        let refs = tensors.reference_entries();
        let query_in = &tensors.query_inputs()[0];
        let db = ReferenceDatabase::new(refs.clone()).unwrap();
        let top = rank(&query_in.global, db.globals(), 1).unwrap()[0].index;
        let reference = &refs[top];

        let (_, dense) = match_neighbor(query_in, reference, &cfg).unwrap();
        let s2d = dense.map_or(0, |r| r.inlier_count());

        let query = drop_detections(&tensors.queries[0], 0.5, seed);
        let corrs: Vec<Correspondence2D3D> = mutual_nearest_neighbors(&query.descriptors, &reference.descriptors)
            .into_iter()
            .map(|(q, r)| Correspondence2D3D::new(query.keypoints[q], reference.landmarks[r]))
            .collect();
        let s2s = if corrs.len() >= cfg.ransac.min_inliers.max(4) {
            ransac_pnp(&corrs, &query_in.intrinsics, &cfg.ransac)
                .unwrap()
                .inlier_count()
        } else {
            0
        };
        s2d_total += s2d;
        s2s_total += s2s;
        if s2d > s2s {
            wins += 1;
        }
    }
    Outcome {
        pass: wins >= 45,
        detail: format!(
            "sparse-to-dense ahead in {wins}/50 trials, mean inliers {:.1} vs {:.1}, {:.2}s",
            s2d_total as f64 / 50.0,
            s2s_total as f64 / 50.0,
            t.elapsed().as_secs_f64()
        ),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn performance() -> Outcome {
    let grid = random_unit_grid(0, 128, 128, 2304).unwrap();
    let descs = random_unit_descriptors(0, 256, 2304);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let single_ms = one.install(|| {
        correlate(&grid, &descs[0]).unwrap();
        median(
            (0..5)
                .map(|i| {
                    let t = Instant::now();
                    correlate(&grid, &descs[i]).unwrap();
                    t.elapsed().as_secs_f64() * 1e3
                })
                .collect(),
        )
    });
    correlate_batch(&grid, &descs[..16]).unwrap();
    let t = Instant::now();
    correlate_batch(&grid, &descs).unwrap();
    let rate = descs.len() as f64 / t.elapsed().as_secs_f64();
    let threads = rayon::current_num_threads();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let values: Vec<f32> = (0..1_000_000).map(|_| rng.sample(StandardNormal)).collect();
    let map = CorrelationMap::new(1000, 1000, values.clone()).unwrap();
    let select_s = median(
        (0..5)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(quantile_value(&map, 0.006));
                t.elapsed().as_secs_f64()
            })
            .collect(),
    );
    let sort_s = median(
        (0..5)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(oracle_quantile(&values, 0.006));
                t.elapsed().as_secs_f64()
            })
            .collect(),
    );
    let speedup = sort_s / select_s;
    Outcome {
        pass: single_ms <= 100.0 && rate >= 500.0 && speedup >= 2.0,
        detail: format!(
            "single correlate {single_ms:.1} ms, batch {rate:.0} desc/s on {threads} thread(s) ({} hardware), quantile {speedup:.1}x faster than sort",
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    }
}

fn s2dloc(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_s2dloc")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "s2dloc {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).display().to_string();
    let noise = ["--noise-sigma", "0.3", "--outlier-fraction", "0.3", "--seed", "3"];
    let synth = |dir: &str, threads: &str| {
        let mut args = vec!["--threads", threads, "synth", "--out"];
        let out = p(dir);
        args.push(&out);
        args.extend(noise);
        s2dloc(&args);
    };
    synth("a", "1");
    synth("b", "1");
    synth("c", "8");
    let synth_same = tree(&tmp.path().join("a")) == tree(&tmp.path().join("b"))
        && tree(&tmp.path().join("a")) == tree(&tmp.path().join("c"));

    s2dloc(&["build-db", "--manifest", &p("a/references.txt"), "--out", &p("db")]);
    let localize = |out: &str, threads: &str| {
        s2dloc(&[
            "--threads",
            threads,
            "localize",
            "--db",
            &p("db/manifest.txt"),
            "--queries",
            &p("a/queries.txt"),
            "--out",
            &p(out),
        ]);
        std::fs::read(p(out)).unwrap()
    };
    let r1 = localize("r1/results.csv", "1");
    let r2 = localize("r2/results.csv", "1");
    let r8 = localize("r8/results.csv", "8");
    let localize_same = r1 == r2 && r1 == r8;
    Outcome {
        pass: synth_same && localize_same,
        detail: format!(
            "synth identical: {synth_same}, localize identical: {localize_same} (two runs, --threads 1 vs 8)"
        ),
    }
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let axis = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let t = Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0));
    Pose::from_rotation(Rotation3::new(axis.normalize() * rng.random_range(0.0..3.0)), t)
}

fn metric_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut non_monotone = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let mut gt = HashMap::new();
        let mut results = Vec::new();
        for i in 0..n {
            let id = format!("q{i}");
            let truth = random_pose(&mut rng);
            gt.insert(id.clone(), truth);
            let scale = 10f64.powf(rng.random_range(-3.0..1.5));
            let delta = Vector6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * scale);
            let pose = (rng.random::<f64>() > 0.1).then(|| perturb(&truth, &delta));
            results.push(LocalizationResult {
                query_id: id,
                pose,
                inlier_count: 0,
                best_reference_id: None,
                accepted_match_count: 0,
                neighbors_tried: 0,
                fallback: false,
            });
        }
        let r = evaluate_recall(&results, &gt, &DEFAULT_THRESHOLDS).unwrap().recalls;
        if !(r[0] <= r[1] && r[1] <= r[2]) {
            non_monotone += 1;
        }
    }
    let mut ranking_mismatches = 0;
    for _ in 0..1000 {
        let (n, dim) = (rng.random_range(2..60), rng.random_range(2..64));
        let mut unit =
            || GlobalDescriptor::from_raw((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap();
        let query = unit();
        let entries: Vec<(String, GlobalDescriptor)> = (0..n).map(|i| (format!("r{i:03}"), unit())).collect();
        let dist = |d: &GlobalDescriptor| -> f64 {
            d.values()
                .iter()
                .zip(query.values())
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum()
        };
        let mut by_distance: Vec<usize> = (0..n).collect();
        by_distance.sort_by(|&a, &b| dist(&entries[a].1).total_cmp(&dist(&entries[b].1)).then(a.cmp(&b)));
        let db = DescriptorDatabase::new(entries).unwrap();
        let by_dot: Vec<usize> = rank(&query, &db, n).unwrap().iter().map(|r| r.index).collect();
        if by_dot != by_distance {
            ranking_mismatches += 1;
        }
    }
    Outcome {
        pass: non_monotone == 0 && ranking_mismatches == 0,
        detail: format!(
            "{non_monotone}/1000 non-monotone recall sets, {ranking_mismatches}/1000 dot vs Euclidean ranking mismatches"
        ),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("P3P exactness", p3p_exactness),
        ("RANSAC robustness", ransac_robustness),
        ("refinement gradient check", refinement_gradient),
        ("end-to-end synthetic localization", end_to_end),
        ("sparse-to-dense vs sparse-to-sparse", ablation),
        ("performance", performance),
        ("determinism", determinism),
        ("metric invariants", metric_invariants),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        println!(
            "[{}] {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
