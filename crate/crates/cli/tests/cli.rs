use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vpa_core::io::{read_labels, read_volume, write_nifti, NiftiDatatype};

fn vpa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpa"))
        .args(args)
        .env_remove("VPA_THREADS")
        .output()
        .expect("spawn vpa")
}

fn ok(args: &[&str]) -> Output {
    let out = vpa(args);
    assert!(
        out.status.success(),
        "vpa {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn nifti_count(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "nii"))
        .count()
}

fn phantom(dir: &Path, extra: &[&str]) {
    let mut args = vec!["--out", s(dir), "phantom", "--dims", "16"];
    args.extend_from_slice(extra);
    ok(&args);
}

/// A run config for a tiny, fast model on the phantom in `dir`.
fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "template": {{"image": "template.nii", "label": "template_label.nii"}},
  "eval": {{"image": "subject.nii", "label": "subject_label.nii"}},
  "unet": {{"levels": 2, "base_features": 2}},
  "schedule": {{"rounds": [
    {{"learning_rate": 0.001, "epochs": 2, "samples_per_epoch": 1}},
    {{"learning_rate": 0.0005, "epochs": 1, "samples_per_epoch": 2}}
  ]}},
  "ablation": {{"schedule": {{"rounds": [{{"learning_rate": 0.001, "epochs": 3, "samples_per_epoch": 1}}]}}}},
  "seed": 7{extra}
}}"#
    );
    let path = dir.join("tiny.json");
    fs::write(&path, text).unwrap();
    path
}

/// The tiny config trained long enough that segmentation finds a brain.
fn trained_config(dir: &Path) -> PathBuf {
    let path = tiny_config(dir, r#", "augment": {"mode": "standard", "enable_lighting": false}"#);
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace(r#""base_features": 2"#, r#""base_features": 4"#)
        .replace(
            r#"{"learning_rate": 0.001, "epochs": 2, "samples_per_epoch": 1}"#,
            r#"{"learning_rate": 0.01, "epochs": 200, "samples_per_epoch": 1}"#,
        )
        .replace(
            r#"{"learning_rate": 0.0005, "epochs": 1, "samples_per_epoch": 2}"#,
            r#"{"learning_rate": 0.005, "epochs": 20, "samples_per_epoch": 2}"#,
        );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn phantom_writes_four_volumes_reproducibly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    phantom(a.path(), &[]);
    phantom(b.path(), &[]);
    assert_eq!(nifti_count(a.path()), 4);
    for name in ["template.nii", "template_label.nii", "subject.nii", "subject_label.nii"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    phantom(c.path(), &["--variant", "b"]);
    assert_ne!(
        fs::read(a.path().join("template.nii")).unwrap(),
        fs::read(c.path().join("template.nii")).unwrap()
    );
}

#[test]
fn phantom_respects_custom_dims() {
    let d = tempfile::tempdir().unwrap();
    ok(&["--out", s(d.path()), "phantom", "--dims", "48"]);
    let (v, _) = read_volume(d.path().join("template.nii")).unwrap();
    assert_eq!(v.dims(), [48; 3]);
    let (l, _) = read_labels(d.path().join("subject_label.nii")).unwrap();
    assert_eq!(l.dims(), [48; 3]);
    let out = vpa(&["--out", s(d.path()), "phantom", "--dims", "4"]);
    assert!(!out.status.success());
}

#[test]
fn augment_writes_pairs_and_montage() {
    let d = tempfile::tempdir().unwrap();
    phantom(d.path(), &[]);
    let cfg = tiny_config(d.path(), "");
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&[
        "--out",
        s(&a),
        "--threads",
        "1",
        "augment",
        "--config",
        s(&cfg),
        "--count",
        "5",
    ]);
    ok(&[
        "--out",
        s(&b),
        "--threads",
        "2",
        "augment",
        "--config",
        s(&cfg),
        "--count",
        "5",
    ]);
    assert_eq!(nifti_count(&a), 10);
    assert!(a.join("montage.png").exists());
    for i in 0..5 {
        for kind in ["image", "label"] {
            let name = format!("aug_{i:04}_{kind}.nii");
            assert_eq!(
                fs::read(a.join(&name)).unwrap(),
                fs::read(b.join(&name)).unwrap(),
                "{name}"
            );
        }
    }
    assert_eq!(
        fs::read(a.join("montage.png")).unwrap(),
        fs::read(b.join("montage.png")).unwrap()
    );
    let img = image::open(a.join("montage.png")).unwrap();
    assert!(img.width() > img.height());

    let other = d.path().join("other");
    ok(&[
        "--out",
        s(&other),
        "--seed",
        "8",
        "augment",
        "--config",
        s(&cfg),
        "--count",
        "1",
    ]);
    assert_ne!(
        fs::read(a.join("aug_0000_image.nii")).unwrap(),
        fs::read(other.join("aug_0000_image.nii")).unwrap()
    );
}

#[test]
fn augment_zero_count_omits_montage() {
    let d = tempfile::tempdir().unwrap();
    phantom(d.path(), &[]);
    let cfg = tiny_config(d.path(), "");
    let out = d.path().join("aug");
    ok(&["--out", s(&out), "augment", "--config", s(&cfg), "--count", "0"]);
    assert_eq!(nifti_count(&out), 0);
    assert!(!out.join("montage.png").exists());
}

#[test]
fn train_is_reproducible_and_segment_evaluate_work() {
    let d = tempfile::tempdir().unwrap();
    phantom(d.path(), &[]);
    let cfg = trained_config(d.path());
    let (r1, r2) = (d.path().join("r1"), d.path().join("r2"));
    ok(&["--out", s(&r1), "train", "--config", s(&cfg)]);
    ok(&["--out", s(&r2), "train", "--config", s(&cfg)]);
    for name in ["model.ckpt", "round1_epoch200.ckpt", "round2_epoch220.ckpt"] {
        assert_eq!(
            fs::read(r1.join(name)).unwrap(),
            fs::read(r2.join(name)).unwrap(),
            "{name}"
        );
    }
    let resolved = |dir: &Path| {
        fs::read_to_string(dir.join("config.resolved.json"))
            .unwrap()
            .replace(s(dir), "OUT")
    };
    assert_eq!(resolved(&r1), resolved(&r2));
    let csv = fs::read_to_string(r1.join("log.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 221);
    assert!(lines[0].starts_with("round,epoch,"));
    assert!(lines[220].starts_with("2,220,"));
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(r1.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["augment"]["enable_textures"], true);
    assert_eq!(resolved["seed"], 7);

    let ckpt = r1.join("model.ckpt");
    let seg = d.path().join("seg");
    let out = ok(&[
        "--out",
        s(&seg),
        "segment",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&d.path().join("subject.nii")),
        "--label",
        s(&d.path().join("subject_label.nii")),
    ]);
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["dice"].as_object().unwrap().len(), 5);
    for name in ["skull_stripped.nii", "label.nii", "prob_1.nii", "prob_5.nii"] {
        let (v, _) = read_volume(seg.join(name)).unwrap();
        assert_eq!(v.dims(), [16; 3], "{name}");
    }

    let out = ok(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&d.path().join("template.nii")),
        "--label",
        s(&d.path().join("template_label.nii")),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in [
        "foreground_mse",
        "background_mse",
        "total_mse",
        "dice",
        "foreground_dice",
    ] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert_eq!(
        v["foreground_voxels"].as_u64().unwrap() + v["background_voxels"].as_u64().unwrap(),
        4096
    );

    // a label on another grid is resampled with a warning
    let small = d.path().join("small");
    ok(&["--out", s(&small), "phantom", "--dims", "20"]);
    let out = ok(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&d.path().join("template.nii")),
        "--label",
        s(&small.join("template_label.nii")),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));

    let missing = d.path().join("no_such_label.nii");
    let out = vpa(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&d.path().join("template.nii")),
        "--label",
        s(&missing),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_label.nii"));

    // input dims the network cannot take directly
    let (v, _) = read_volume(d.path().join("template.nii")).unwrap();
    let mut odd = Vec::new();
    for z in 0..15 {
        for y in 0..13 {
            for x in 0..11 {
                odd.push(v.get(x, y, z));
            }
        }
    }
    let odd_path = d.path().join("odd.nii");
    write_nifti([11, 13, 15], [1.0; 3], &odd, &odd_path, NiftiDatatype::Float32).unwrap();
    let odd_out = d.path().join("odd_seg");
    ok(&[
        "--out",
        s(&odd_out),
        "segment",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&odd_path),
    ]);
    let (l, _) = read_labels(odd_out.join("label.nii")).unwrap();
    assert_eq!(l.dims(), [11, 13, 15]);

    let bad = d.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint at all").unwrap();
    let out = vpa(&[
        "--out",
        s(&seg),
        "segment",
        "--checkpoint",
        s(&bad),
        "--image",
        s(&odd_path),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn train_reports_missing_template() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path(), "");
    let out = vpa(&["--out", s(&d.path().join("r")), "train", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("template.nii"));
}

#[test]
fn config_errors_are_reported() {
    let d = tempfile::tempdir().unwrap();
    phantom(d.path(), &[]);
    let cfg = tiny_config(d.path(), r#", "epochs": 3"#);
    let out = vpa(&["train", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
    let out = vpa(&["train", "--config", s(&d.path().join("nothing.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing.json"));
}

fn without_seconds(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn ablation_writes_csvs_and_plot() {
    let d = tempfile::tempdir().unwrap();
    phantom(d.path(), &[]);
    let cfg = tiny_config(d.path(), "");
    let out = d.path().join("abl");
    ok(&[
        "--out",
        s(&out),
        "ablate",
        "--config",
        s(&cfg),
        "--arms",
        "rigid-only,all",
    ]);
    assert!(out.join("ablation_rigid-only.csv").exists());
    assert!(out.join("ablation_all.csv").exists());
    assert!(out.join("ablation.png").exists());
    let bad = vpa(&["--out", s(&out), "ablate", "--config", s(&cfg), "--arms", "sparkle"]);
    assert!(!bad.status.success());

    // a single arm is the same run as `train` with that arm's augmentation
    let rigid = tiny_config(
        d.path(),
        r#", "augment": {"mode": "standard", "enable_reduction": false, "enable_lighting": false, "enable_camera": false, "enable_textures": false},
  "schedule": {"rounds": [{"learning_rate": 0.001, "epochs": 3, "samples_per_epoch": 1}]}"#,
    );
    let text = fs::read_to_string(&rigid).unwrap();
    // the second "schedule" key would be a duplicate; drop the first
    let start = text.find(r#""schedule""#).unwrap();
    let end = text.find(r#""ablation""#).unwrap();
    fs::write(&rigid, format!("{}{}", &text[..start], &text[end..])).unwrap();
    let tr = d.path().join("tr");
    ok(&["--out", s(&tr), "train", "--config", s(&rigid)]);
    let a = fs::read_to_string(out.join("ablation_rigid-only.csv")).unwrap();
    let b = fs::read_to_string(tr.join("log.csv")).unwrap();
    assert_eq!(without_seconds(&a), without_seconds(&b));
}

#[test]
fn transfer_training_composes() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    phantom(&a, &[]);
    phantom(&b, &["--variant", "b"]);
    ok(&["--out", s(&a.join("run")), "train", "--config", s(&trained_config(&a))]);
    let seg = b.join("seg");
    ok(&[
        "--out",
        s(&seg),
        "segment",
        "--checkpoint",
        s(&a.join("run/model.ckpt")),
        "--image",
        s(&b.join("template.nii")),
    ]);
    let cfg = tiny_config(&b, "").to_string_lossy().into_owned();
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("template_label.nii", "seg/label.nii");
    fs::write(&cfg, text).unwrap();
    ok(&["--out", s(&b.join("run")), "train", "--config", &cfg]);
    assert!(b.join("run/model.ckpt").exists());
}
