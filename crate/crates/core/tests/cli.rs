use std::path::Path;
use std::process::{Command, Output};

fn irfsod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irfsod"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
backbone.channels = 4,6
backbone.strides = 2,2
rpn.anchor_scales = 8,12
rpn.head_channels = 4
heads.comparison_hidden = 4
heads.regressor_hidden = 4
train.iterations = 4
train.shots = 2
train.warmup = 0
train.pseudo_label_start = 2
";

fn make_shapes(dir: &Path, n: usize, seed: u64, extra: &[&str]) {
    let n = format!("shapes.num_images={n}");
    let seed = seed.to_string();
    let mut args = vec![
        "make-shapes",
        "--out",
        p(dir),
        "--seed",
        &seed,
        "--set",
        &n,
        "--set",
        "shapes.image_size=32",
        "--set",
        "shapes.min_size=8",
        "--set",
        "shapes.max_size=14",
    ];
    args.extend_from_slice(extra);
    let out = irfsod(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_detect_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = tmp.path().join("train");
    let test_dir = tmp.path().join("test");
    make_shapes(&train_dir, 12, 1, &["--set", "shapes.drawn=circle,square,triangle"]);
    make_shapes(&test_dir, 24, 2, &["--set", "shapes.first_image_id=1001", "--support-shots", "2"]);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, format!("{TINY}data.train = {}\n", train_dir.display())).unwrap();
    let ckpt = tmp.path().join("model.ckpt");
    let log = tmp.path().join("log.ndjson");

    let out = irfsod(&[
        "train",
        "--config",
        p(&cfg),
        "--set",
        "heads.alpha=0.4",
        "--checkpoint",
        p(&ckpt),
        "--log",
        p(&log),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo = String::from_utf8(out.stdout).unwrap();
    assert!(echo.contains("heads.alpha = 0.4\n"), "{echo}");
    assert!(echo.contains("rpn.tau = 0.25\n"));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 4);
    assert!(ckpt.exists());

    let coco: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(test_dir.join("annotations.json")).unwrap()).unwrap();
    let image = test_dir.join(coco["images"][0]["file_name"].as_str().unwrap());
    let dets = tmp.path().join("dets.json");
    let out = irfsod(&[
        "detect",
        "--checkpoint",
        p(&ckpt),
        "--support-dir",
        p(&test_dir.join("supports")),
        "--output",
        p(&dets),
        p(&image),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&dets).unwrap()).unwrap();
    for d in parsed.as_array().unwrap() {
        assert!([4, 5].contains(&d["category_id"].as_u64().unwrap()));
        assert_eq!(d["bbox"].as_array().unwrap().len(), 4);
    }

    for protocol in ["onetime", "meta"] {
        let report = tmp.path().join(format!("{protocol}.json"));
        let out = irfsod(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&test_dir),
            "--protocol",
            protocol,
            "--shots",
            "2",
            "--episodes",
            "3",
            "--queries",
            "2",
            "--json",
            p(&report),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("AP50"), "{text}");
        let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(r["protocol"], protocol);
    }
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "heads.alpah = 0.5\n").unwrap();
    let out = irfsod(&["train", "--config", p(&cfg), "--checkpoint", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("heads.alpah"));

    std::fs::write(&cfg, "heads.alpha = 0.5\nheads.alpha = 0.6\n").unwrap();
    let out = irfsod(&["train", "--config", p(&cfg), "--checkpoint", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));

    let out = irfsod(&[
        "train",
        "--set",
        "ablation.pixel_contrast=off",
        "--set",
        "heads.alpha=0.5",
        "--checkpoint",
        p(&ckpt),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = irfsod(&["eval", "--checkpoint", p(&ckpt), "--data", ".", "--protocol", "weekly"]);
    assert_eq!(out.status.code(), Some(2));
    let out = irfsod(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    let missing = tmp.path().join("nowhere");
    let set = format!("data.train={}", missing.display());
    let out = irfsod(&["train", "--set", &set, "--checkpoint", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = irfsod(&["eval", "--checkpoint", p(&ckpt), "--data", p(tmp.path()), "--protocol", "meta"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn make_shapes_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    make_shapes(&a, 3, 5, &[]);
    make_shapes(&b, 3, 5, &[]);
    let read = |d: &Path| std::fs::read_to_string(d.join("annotations.json")).unwrap();
    assert_eq!(read(&a), read(&b));
}
