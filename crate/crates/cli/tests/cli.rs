use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2dloc")).args(args).output().unwrap()
}

fn path(dir: &Path, rel: &str) -> String {
    dir.join(rel).display().to_string()
}

fn small_scene(dir: &Path) {
    let out = run(&[
        "synth",
        "--out",
        &path(dir, "scene"),
        "--refs",
        "6",
        "--queries",
        "3",
        "--width",
        "256",
        "--height",
        "256",
        "--focal",
        "200",
        "--channels",
        "32",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_build_localize_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_scene(d);
    for f in ["references.txt", "queries.txt", "gt_poses.txt", "run_config.txt"] {
        assert!(d.join("scene").join(f).is_file(), "{f}");
    }
    let out = run(&[
        "build-db",
        "--manifest",
        &path(d, "scene/references.txt"),
        "--out",
        &path(d, "db"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("db/pca.pcam").is_file());

    let out = run(&[
        "localize",
        "--db",
        &path(d, "db/manifest.txt"),
        "--queries",
        &path(d, "scene/queries.txt"),
        "--out",
        &path(d, "out/results.csv"),
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echoed = std::fs::read_to_string(d.join("out/run_config.txt")).unwrap();
    assert!(echoed.contains("seed = 5"));
    assert!(echoed.contains("n_neighbors = 15"));

    let out = run(&[
        "evaluate",
        "--results",
        &path(d, "out/results.csv"),
        "--gt",
        &path(d, "scene/gt_poses.txt"),
        "--json",
        &path(d, "out/recall.json"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/recall.json")).unwrap()).unwrap();
    assert_eq!(json["total"], 3);
    assert_eq!(json["thresholds"].as_array().unwrap().len(), 3);
    for t in json["thresholds"].as_array().unwrap() {
        assert_eq!(t["recall_percent"], 100.0);
    }
}

#[test]
fn ground_truth_results_score_full_recall() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let gt = "q1 1 0 0 0 0 0 0\nq2 0.7071067811865476 0 0.7071067811865476 0 1 2 3\n";
    std::fs::write(d.join("gt.txt"), gt).unwrap();
    let csv = "query_id,localized,qw,qx,qy,qz,tx,ty,tz,inliers,best_ref,neighbors_tried\n\
               q1,1,1,0,0,0,0,0,0,20,r,1\n\
               q2,1,0.7071067811865476,0,0.7071067811865476,0,1,2,3,20,r,1\n";
    std::fs::write(d.join("results.csv"), csv).unwrap();
    let out = run(&[
        "evaluate",
        "--results",
        &path(d, "results.csv"),
        "--gt",
        &path(d, "gt.txt"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.matches("100.0").count(), 3, "{table}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(
        run(&[
            "build-db",
            "--manifest",
            &path(d, "missing.txt"),
            "--out",
            &path(d, "db")
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        run(&[
            "build-db",
            "--manifest",
            &path(d, "m.txt"),
            "--out",
            &path(d, "db"),
            "--alpha",
            "-1"
        ])
        .status
        .code(),
        Some(1)
    );
    std::fs::write(d.join("bad.cfg"), "alpha = 1\nnot_a_key = 2\n").unwrap();
    assert_eq!(
        run(&[
            "--config",
            &path(d, "bad.cfg"),
            "build-db",
            "--manifest",
            &path(d, "m.txt"),
            "--out",
            &path(d, "db")
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(run(&["--threads", "0", "bench"]).status.code(), Some(1));

    // an unreachable inlier count leaves every query unlocalized
    small_scene(d);
    let out = run(&[
        "localize",
        "--db",
        &path(d, "scene/references.txt"),
        "--queries",
        &path(d, "scene/queries.txt"),
        "--out",
        &path(d, "r.csv"),
        "--min-inliers",
        "100000",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("r.csv").is_file());
}
