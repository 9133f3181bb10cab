//! The `fwd` binary end to end: files in, files and exit codes out.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fwd_core::io::codec::decode_png;
use fwd_core::io::{load_scene, Checkpoint};
use fwd_core::pipeline::{FwdModel, ModelConfig, ModelVariant};

fn fwd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fwd")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fwd(args);
    assert!(
        out.status.success(),
        "fwd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small checker scene and returns its manifest.
fn scene(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let printed = ok(&["synthetic", "--geometry", "two-planes", "--texture", "checker", "--views", "4", "--res", "16x16", "--seed", "2", "--out", s(&out)]);
    PathBuf::from(printed.trim())
}

fn train(manifest: &Path, ck: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--scenes", s(manifest), "--out", s(ck), "--width", "0.0625", "--log-every", "0"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synthetic_writes_a_loadable_scene() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), "a");
    let loaded = load_scene(&m).unwrap();
    assert_eq!(loaded.len(), 4);
    assert!(loaded.has_depth());
    let intr = loaded.intrinsics().unwrap();
    assert_eq!((intr.width, intr.height), (16, 16));
}

#[test]
fn zero_steps_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), "a");
    let ck = dir.path().join("init.fwdc");
    train(&m, &ck, &["--steps", "0", "--seed", "11"]);
    let loaded = Checkpoint::load(&ck).unwrap();
    let fresh = FwdModel::new(ModelConfig::new(ModelVariant::FwdD, 0.0625), 11).unwrap();
    for (_, p) in fresh.store.iter() {
        assert_eq!(loaded.get(&format!("param/{}", p.name)), Some(&p.value), "{}", p.name);
    }
    let curve = std::fs::read_to_string(ck.with_extension("loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1, "header only");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), "a");
    let (a, b, c) = (dir.path().join("a.fwdc"), dir.path().join("b.fwdc"), dir.path().join("c.fwdc"));
    train(&m, &a, &["--steps", "2", "--seed", "4"]);
    train(&m, &b, &["--steps", "2", "--seed", "4", "--threads", "1"]);
    train(&m, &c, &["--steps", "2", "--seed", "5"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    let curve = std::fs::read_to_string(a.with_extension("loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
}

#[test]
fn two_stage_run_records_the_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), "a");
    let ck = dir.path().join("u.fwdc");
    train(&m, &ck, &["--variant", "fwd-u", "--two-stage", "--stage1-steps", "1", "--steps", "2"]);
    let meta = Checkpoint::load(&ck).unwrap().meta;
    assert_eq!(meta["stage_boundaries"], serde_json::json!([1]));

    let bad = fwd(&["train", "--scenes", s(&m), "--out", s(&ck), "--width", "0.0625", "--steps", "1", "--two-stage", "--stage1-steps", "1"]);
    assert_eq!(bad.status.code(), Some(2), "two-stage needs FWD-U");
}

#[test]
fn synth_renders_each_pose_and_scores_view_entries() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), "a");
    let ck = dir.path().join("m.fwdc");
    train(&m, &ck, &["--steps", "0"]);
    let poses = dir.path().join("poses.json");
    std::fs::write(
        &poses,
        r#"{"poses":[{"R":[1,0,0,0,1,0,0,0,1],"T":[0,0,0]},{"view":2,"inputs":[1,3]}]}"#,
    )
    .unwrap();
    let out = dir.path().join("frames");
    let printed = ok(&["synth", "--scene", s(&m), "--checkpoint", s(&ck), "--pose-file", s(&poses), "--out", s(&out)]);
    assert_eq!(printed.lines().count(), 2);
    for i in 0..2 {
        let png = std::fs::read(out.join(format!("pose_{i:04}.png"))).unwrap();
        assert_eq!(decode_png(&png, "frame").unwrap().shape(), &[16, 16, 3]);
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows.len(), 2, "{metrics}");
    assert!(rows[1].contains(",2,"), "{metrics}");
}

#[test]
fn non_orthonormal_pose_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), "a");
    let ck = dir.path().join("m.fwdc");
    train(&m, &ck, &["--steps", "0"]);
    let poses = dir.path().join("skew.json");
    std::fs::write(&poses, r#"[{"R":[1,0.2,0,0,1,0,0,0,1],"T":[0,0,0]}]"#).unwrap();
    let out = fwd(&["synth", "--scene", s(&m), "--checkpoint", s(&ck), "--pose-file", s(&poses), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rotation not orthonormal"), "{err}");
    assert!(err.contains("skew.json") && err.contains("[0].R"), "{err}");
}

#[test]
fn eval_prints_a_table_and_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let m = scene(dir.path(), "a");
    scene(dir.path(), "b");
    let ck = dir.path().join("m.fwdc");
    train(&m, &ck, &["--steps", "0"]);
    let csv = dir.path().join("eval.csv");
    let pattern = format!("{}/*/manifest.json", s(dir.path()));
    let table = ok(&["eval", "--scenes", &pattern, "--checkpoint", s(&ck), "--renders", "1", "--out", s(&csv)]);
    assert!(table.lines().next().unwrap().contains("psnr_db"));
    assert_eq!(table.lines().count(), 4, "header, two scenes, aggregate:\n{table}");
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 8);
}

fn bench(points: usize) -> [f64; 4] {
    let out = ok(&["bench", "--points", &points.to_string(), "--res", "32x32", "--iters", "3", "--width", "0.0625", "--threads", "1"]);
    let get = |name: &str| -> f64 {
        let line = out.lines().find(|l| l.starts_with(name)).unwrap_or_else(|| panic!("{name} in {out}"));
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    [get("rasterize"), get("fuse"), get("refine"), get("total")]
}

#[test]
fn bench_components_add_up() {
    let [r, f, g, total] = bench(2000);
    assert!(r > 0.0 && f > 0.0 && g > 0.0);
    let sum = r + f + g;
    assert!((sum - total).abs() <= 0.1 * total, "components {sum} vs total {total}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fwd(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(fwd(&["--help"]).status.code(), Some(0));
    let missing = dir.path().join("nope.fwdc");
    let m = scene(dir.path(), "a");
    let out = fwd(&["eval", "--scenes", s(&m), "--checkpoint", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.fwdc"));
    let none = format!("{}/*.json", s(&dir.path().join("empty")));
    assert_eq!(fwd(&["train", "--scenes", &none, "--steps", "1", "--out", s(&missing)]).status.code(), Some(2));
    assert_eq!(fwd(&["bench", "--res", "30x30", "--iters", "1"]).status.code(), Some(2));
}
