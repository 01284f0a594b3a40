use std::path::Path;
use std::process::{Command, Output};

fn ernf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ernf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ernf")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_every_flag() {
    let cases: &[(&str, &[&str])] = &[
        ("gen-data", &["--out", "--frames", "--size", "--focal", "--motion", "--seed"]),
        (
            "train-head",
            &["--data", "--config", "--out", "--iters-coarse", "--iters-fine", "--backbone", "--attention", "--seed", "--deterministic"],
        ),
        ("train-torso", &["--data", "--config", "--ckpt", "--out", "--iters", "--seed", "--deterministic"]),
        ("render", &["--ckpt", "--data", "--out", "--samples", "--val-only", "--seed", "--deterministic"]),
        ("collisions", &["--R", "--N", "--level-res", "--table-log2", "--out", "--seed", "--deterministic"]),
        ("gradcheck", &["--module", "--instances", "--seed", "--deterministic"]),
        ("eval", &["--ckpt", "--data", "--out", "--samples", "--seed", "--deterministic"]),
    ];
    for (cmd, flags) in cases {
        let o = ernf(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd} --help failed");
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help does not mention {f}:\n{text}");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    let o = ernf(&["render", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    let o = ernf(&["train-head", "--backbone", "octree"]);
    assert_eq!(o.status.code(), Some(1));
    let o = ernf(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn render_without_checkpoint_is_a_validation_error() {
    let o = ernf(&["render"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint required"), "{}", stderr(&o));
    let o = ernf(&["eval", "--ckpt", "none"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = ernf(&["train-head", "--data", path(&dir.path().join("absent"))]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("error:"));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "coarse_itres = 5\n").unwrap();
    let o = ernf(&["train-head", "--config", path(&cfg), "--data", path(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("coarse_itres"), "{}", stderr(&o));
}

#[test]
fn gradcheck_single_module() {
    let o = ernf(&["gradcheck", "--module", "triplane", "--instances", "10", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("triplane") && text.contains("ok"), "{text}");
    assert!(!text.contains("hash3d"));

    let o = ernf(&["gradcheck", "--module", "nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn collisions_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = ernf(&["collisions", "--R", "32", "--N", "4", "--level-res", "64", "--table-log2", "10", "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("collision ratio"));
    let csv = std::fs::read_to_string(out.join("collisions.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "encoder,R,N,level_res,table_size,distinct_vertices,collisions,plane");
    assert!(lines.any(|l| l.starts_with("hash3d,32,4,64,1024,")));

    let o = ernf(&["collisions", "--R", "2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = ernf(&["gen-data", "--frames", "6", "--size", "24", "--focal", "30", "--out", path(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("manifest.json").exists());

    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, "rays_per_batch = 64\npatch_size = 8\nval_every = 10\n").unwrap();
    let head = dir.path().join("head");
    let o = ernf(&[
        "train-head", "--data", path(&data), "--config", path(&cfg), "--out", path(&head),
        "--iters-coarse", "10", "--iters-fine", "2", "--seed", "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = head.join("head.ckpt");
    let metrics = std::fs::read_to_string(head.join("metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        serde_json::from_str::<serde_json::Value>(line).expect("metrics line is JSON");
    }

    let torso = dir.path().join("torso");
    let o = ernf(&[
        "train-torso", "--data", path(&data), "--config", path(&cfg), "--ckpt", path(&ckpt),
        "--out", path(&torso), "--iters", "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let renders = dir.path().join("renders");
    let o = ernf(&[
        "render", "--ckpt", path(&torso.join("torso.ckpt")), "--data", path(&data), "--out", path(&renders),
        "--samples", "8", "--val-only",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let frames: Vec<_> = std::fs::read_dir(&renders).unwrap().collect();
    assert!(!frames.is_empty());
    for f in frames {
        let fb = ernf::ppm::read(&f.unwrap().path()).unwrap();
        assert_eq!((fb.width, fb.height), (24, 24));
    }

    let report = dir.path().join("eval");
    let o = ernf(&["eval", "--ckpt", path(&ckpt), "--data", path(&data), "--out", path(&report), "--samples", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(report.join("report.json")).unwrap()).unwrap();
    assert!(v.is_object());
}
