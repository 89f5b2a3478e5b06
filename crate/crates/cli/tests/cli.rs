use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ha2ha::io::urfc::{load_urfc, Urfc};

fn tiny_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg")
}

fn ha2ha(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ha2ha")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ha2ha(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        vec!["frobnicate"],
        vec!["simulate", "--out", "x.urfc", "--no-such-flag"],
        vec!["doppler", "sideways", "--in", "a", "--out", "b"],
        vec![],
    ] {
        let out = ha2ha(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn missing_or_bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = ha2ha(&["simulate", "--config", "/definitely/not/here.cfg", "--out", s(&dir.path().join("c.urfc"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "one-line diagnostic: {stderr}");

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[phantom]\nn_frame = 3\n").unwrap();
    let out = ha2ha(&["simulate", "--config", s(&bad), "--out", s(&dir.path().join("c.urfc"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_frame"));
}

#[test]
fn simulate_is_seeded_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let path = |n: &str| dir.path().join(n);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&path("a.urfc")), "--truth", s(&path("roi"))]);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&path("b.urfc"))]);
    ok(&["simulate", "--config", s(&cfg), "--seed", "8", "--out", s(&path("c.urfc"))]);
    let a = fs::read(path("a.urfc")).unwrap();
    assert_eq!(a, fs::read(path("b.urfc")).unwrap());
    assert_ne!(a, fs::read(path("c.urfc")).unwrap());
    match load_urfc(path("a.urfc")).unwrap() {
        Urfc::Cube(c) => assert_eq!((c.n_angle(), c.n_time(), c.n_axial(), c.n_lateral()), (10, 16, 48, 48)),
        other => panic!("expected a cube, got {}", other.kind()),
    }
    for f in ["blood.pgm", "background.pgm", "noise.pgm"] {
        assert!(path("roi").join(f).is_file());
    }
}

#[test]
fn chain_matches_conventional_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let p = |n: &str| dir.path().join(n);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&p("cube.urfc")), "--truth", s(&p("roi"))]);
    ok(&["pipeline", "--config", s(&cfg), "--in", s(&p("cube.urfc")), "--out", s(&p("ens.urfc"))]);
    ok(&["doppler", "power", "--in", s(&p("ens.urfc")), "--out", s(&p("pd.urfc")), "--image", s(&p("pd.pgm"))]);
    ok(&["baseline", "conventional", "--config", s(&cfg), "--in", s(&p("cube.urfc")), "--out", s(&p("conv.urfc"))]);
    // the staged chain and the one-shot baseline are the same computation;
    // only the f32 storage of the intermediate ensemble separates them
    let staged = load_urfc(p("pd.urfc")).unwrap().into_rf().unwrap();
    let direct = load_urfc(p("conv.urfc")).unwrap().into_rf().unwrap();
    let peak = direct.data().iter().copied().fold(0.0, f64::max);
    for (a, b) in staged.data().iter().zip(direct.data()) {
        assert!((a - b).abs() <= 1e-5 * peak, "{a} vs {b}");
    }
    assert!(fs::read(p("pd.pgm")).unwrap().starts_with(b"P5\n48 48\n255\n"));

    let out = ok(&["metrics", "--map", s(&p("pd.urfc")), "--rois", s(&p("roi")), "--method", "conventional"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("conventional"));

    ok(&["doppler", "color", "--in", s(&p("ens.urfc")), "--out", s(&p("v.urfc")), "--image", s(&p("v.ppm")), "--gate-db", "-20"]);
    assert!(fs::read(p("v.ppm")).unwrap().starts_with(b"P6\n48 48\n255\n"));
    ok(&["baseline", "ap", "--config", s(&cfg), "--in", s(&p("cube.urfc")), "--out", s(&p("ap.urfc"))]);
    ok(&["baseline", "stnlm", "--config", s(&cfg), "--in", s(&p("ens.urfc")), "--out", s(&p("nlm.urfc"))]);
    ok(&["pipeline", "--config", s(&cfg), "--in", s(&p("cube.urfc")), "--out", s(&p("odd.urfc")), "--subset", "odd"]);

    // a cube is not a map
    let out = ha2ha(&["metrics", "--map", s(&p("cube.urfc")), "--rois", s(&p("roi"))]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn train_then_denoise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let p = |n: &str| dir.path().join(n);
    ok(&["simulate", "--config", s(&cfg), "--training", "--out", s(&p("train.urfc"))]);
    ok(&[
        "train", "--config", s(&cfg), "--in", s(&p("train.urfc")), "--out", s(&p("m.ckpt")), "--log", s(&p("loss.log")), "--epochs", "1",
    ]);
    let log = fs::read_to_string(p("loss.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&p("cube.urfc"))]);
    ok(&["pipeline", "--config", s(&cfg), "--in", s(&p("cube.urfc")), "--out", s(&p("ens.urfc"))]);
    ok(&["denoise", "--in", s(&p("ens.urfc")), "--model", s(&p("m.ckpt")), "--out", s(&p("den.urfc"))]);
    let den = load_urfc(p("den.urfc")).unwrap().into_rf().unwrap();
    assert_eq!((den.n_time(), den.n_axial(), den.n_lateral()), (16, 48, 48));
    assert!(den.data().iter().all(|v| v.is_finite()));
}

#[test]
fn experiment_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["experiment", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["experiment", "--config", s(&cfg), "--out", s(&b)]);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "metrics.txt"));
    for n in names {
        let pa = a.join(&n);
        if pa.is_file() {
            assert_eq!(fs::read(&pa).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?} differs");
        }
    }
    assert!(!a.join("FAILED").exists());

    // one method in, one method out
    let c = dir.path().join("c");
    ok(&["experiment", "--config", s(&cfg), "--out", s(&c), "--methods", "conventional"]);
    let table = fs::read_to_string(c.join("metrics.txt")).unwrap();
    let methods: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(methods, vec!["conventional", "conventional"]);
    assert!(!c.join("model.ckpt").exists());
}

#[test]
fn failed_experiment_leaves_marker() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("x");
    // a 16-frame phantom cannot host a 23-frame ST-NLM search window
    let out = ha2ha(&[
        "experiment", "--config", s(&tiny_cfg()), "--out", s(&out_dir), "--methods", "conventional,stnlm", "--set", "stnlm.search=23,23",
        "--set", "stnlm.similarity=11,11",
    ]);
    assert!(!out.status.success());
    assert!(out_dir.join("FAILED").is_file());
}
