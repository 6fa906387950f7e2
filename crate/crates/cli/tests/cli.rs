use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pcgroup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcgroup"))
        .args(args)
        .env_remove("PCGROUP_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn json(file: &str) -> Value {
    serde_json::from_slice(&std::fs::read(file).unwrap()).unwrap()
}

fn synth_small(dir: &Path, name: &str, seed: &str) -> String {
    let scene = path(dir, name);
    let out = pcgroup(&[
        "synth", "--seed", seed, "--instances", "4", "--points", "300,500", "--background", "100",
        "-o", &scene,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    scene
}

#[test]
fn selftest_passes() {
    let out = pcgroup(&["selftest", "--cases", "24"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 3);
}

#[test]
fn run_echoes_preset_and_eval_scores() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth_small(dir.path(), "s.sgpc", "4");
    let report = path(dir.path(), "r.json");
    let props = path(dir.path(), "p.sgpr");
    let out = pcgroup(&["run", "--scene", &scene, "--preset", "s3dis", "-o", &report, "--proposals", &props]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&report);
    assert_eq!(r["config"]["voxel_size"], 0.02);
    assert_eq!(r["config"]["grouping"]["radius"], 0.04);
    assert_eq!(r["version"], 1);
    assert!(r["timings"]["total"].as_f64().unwrap() >= 0.0);

    let metrics = path(dir.path(), "m.json");
    let out = pcgroup(&["eval", "--scene", &scene, "--proposals", &props, "-o", &metrics]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = json(&metrics);
    assert_eq!(m["num_proposals"], r["proposal_count"]);
    let ap50 = m["ap50"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ap50));
}

#[test]
fn presets_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth_small(dir.path(), "s.sgpc", "5");
    let report = path(dir.path(), "r.json");
    let out = pcgroup(&[
        "run", "--scene", &scene, "--preset", "stpls3d", "--tau", "0.3", "--octree", "off", "--caps", "off",
        "--late-devox", "off", "-o", &report,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&report);
    assert_eq!(r["config"]["voxel_size"], 0.33);
    assert_eq!(r["config"]["grouping"]["radius"], 0.9);
    assert_eq!(r["config"]["grouping"]["tau"], 0.3);
    assert_eq!(r["backend"], "vanilla");
    assert_eq!(r["config"]["scaling"]["kind"], "off");
}

#[test]
fn outputs_are_deterministic_apart_from_timings() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth_small(dir.path(), "a.sgpc", "9");
    let b = synth_small(dir.path(), "b.sgpc", "9");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let mut reports = Vec::new();
    for name in ["r1.json", "r2.json"] {
        let report = path(dir.path(), name);
        assert_eq!(code(&pcgroup(&["run", "--scene", &a, "-o", &report])), 0);
        let mut r = json(&report);
        r.as_object_mut().unwrap().remove("timings");
        reports.push(r);
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn text_scenes_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let scene = path(dir.path(), "s.txt");
    std::fs::write(
        &scene,
        "sgpc 1 3 2 gt scores offsets\n\
         0 0 0 0.9 0.1 0 0 0 0 0\n\
         0.01 0 0 0.9 0.1 -0.01 0 0 0 0\n\
         5 5 5 0.1 0.9 0 0 0 1 1\n",
    )
    .unwrap();
    let report = path(dir.path(), "r.json");
    let out = pcgroup(&["run", "--scene", &scene, "--min-points", "1", "-o", &report]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&report);
    assert_eq!(r["num_points"], 3);
    assert_eq!(r["proposal_count"], 2);
}

#[test]
fn bench_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let csv = path(dir.path(), "b.csv");
    let out = pcgroup(&["bench", "--sizes", "4e3,2000", "--backend", "both", "--reps", "1", "-o", &csv]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "workload,size,points,backend,reps,point_wise_s,knn_s,grouping_s,top_down_s,total_s,proposals,edges"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let sizes: Vec<usize> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "{sizes:?}");
    let backends: Vec<&str> = rows.iter().map(|r| r[3]).collect();
    assert_eq!(backends, ["vanilla", "octree:auto", "vanilla", "octree:auto"]);
    for r in &rows {
        for col in 5..10 {
            assert!(r[col].parse::<f64>().unwrap() >= 0.0);
        }
    }

    let out = pcgroup(&["bench", "--sizes", "3000", "--workload", "knn", "--backend", "octree", "--reps", "1"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("knn,3000,3000,octree:auto,1,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&pcgroup(&["run", "--no-such-flag"])), 2);
    assert_eq!(code(&pcgroup(&["bench", "--sizes", "1.5"])), 2);

    let bad = path(dir.path(), "bad.sgpc");
    std::fs::write(&bad, b"SGPC\x02\x00\x00\x00").unwrap();
    let out = pcgroup(&["run", "--scene", &bad]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 4"));

    let scene = synth_small(dir.path(), "s.sgpc", "1");
    let mut bytes = std::fs::read(&scene).unwrap();
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&bad, &bytes).unwrap();
    let out = pcgroup(&["run", "--scene", &bad]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("gt_instance"));

    assert_eq!(code(&pcgroup(&["run", "--scene", &scene, "--radius", "-1"])), 2);
    assert_eq!(code(&pcgroup(&["run", "--scene", &scene, "--preset", "nuscenes"])), 2);
    assert_eq!(code(&pcgroup(&["synth", "--confusion", "2", "-o", &path(dir.path(), "x.sgpc")])), 2);
}

#[test]
fn thread_override() {
    let out = Command::new(env!("CARGO_BIN_EXE_pcgroup"))
        .args(["selftest", "--cases", "3"])
        .env("PCGROUP_THREADS", "two")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_pcgroup"))
        .args(["--threads", "2", "selftest", "--cases", "3"])
        .env("PCGROUP_THREADS", "two")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
}
