use std::fs;
use std::path::{Path, PathBuf};

use dualtalker::cli::{run_from, RunManifest, RUN_MANIFEST};
use dualtalker::data::{load_features, load_motion, DatasetManifest, Split, SyntheticSpec};
use sha2::{Digest, Sha256};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        speakers: 2,
        sequences: 10,
        frames: 7,
        vertices: 8,
        bands: 4,
        latent_dim: 2,
        window: 3,
        ..SyntheticSpec::default()
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    fs::write(path, serde_json::to_string(value).unwrap()).unwrap();
}

fn small_config(dir: &Path, extra_train: serde_json::Value) -> PathBuf {
    let mut train = serde_json::json!({"learning_rate": 1e-3, "epochs": 2});
    train.as_object_mut().unwrap().extend(extra_train.as_object().unwrap().clone());
    let cfg = serde_json::json!({
        "model": {"d": 8, "heads": 2, "self_heads": 2, "squeeze_ratio": 4, "ff_dim": 16},
        "train": train,
    });
    let path = dir.join("config.json");
    write_json(&path, &cfg);
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, seed: Option<u64>) -> PathBuf {
    let spec = dir.join("spec.json");
    write_json(&spec, &small_spec());
    let out = dir.join(name);
    let mut args = vec!["dualtalker", "synth", "--spec", s(&spec), "--out", s(&out)];
    let seed_text = seed.map(|v| v.to_string());
    if let Some(v) = &seed_text {
        args.extend(["--seed", v]);
    }
    run_from(args).unwrap().primary.unwrap()
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn synth_is_reproducible_and_split_8_1_1() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", None);
    let b = synth(dir.path(), "b", None);
    assert_eq!(sha(&a), sha(&b));
    let manifest = DatasetManifest::load(&a).unwrap();
    let count = |split| manifest.entries.iter().filter(|e| e.split == split).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (8, 1, 1));
    let c = synth(dir.path(), "c", Some(99));
    let first = &manifest.entries[0].motion;
    assert_ne!(sha(&a.with_file_name(first)), sha(&c.with_file_name(first)));
    let run: RunManifest = serde_json::from_str(&fs::read_to_string(dir.path().join("a").join(RUN_MANIFEST)).unwrap()).unwrap();
    assert_eq!(run.command, "synth");
    assert!(run.files.iter().any(|f| f.path == "manifest.json"));
}

#[test]
fn train_eval_animate_lipread_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = synth(d, "data", None);
    let cfg = small_config(d, serde_json::json!({}));
    let run = d.join("run");
    let ckpt = run_from(["dualtalker", "train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&run)])
        .unwrap()
        .primary
        .unwrap();
    assert!(ckpt.ends_with("best.dtck"));

    let ev = d.join("eval");
    let report = run_from([
        "dualtalker", "eval", "--checkpoint", s(&ckpt), "--data", s(&manifest), "--split", "test", "--predict-gt",
        "--out", s(&ev),
    ])
    .unwrap()
    .primary
    .unwrap();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json["lve"], 0.0);
    assert_eq!(json["fdd"], 0.0);
    assert_eq!(json["per_sequence"].as_array().unwrap().len(), 1);
    assert!(ev.join("report.txt").exists());

    let data = manifest.parent().unwrap();
    let features = data.join("seq_009.dtft");
    let anim = d.join("anim");
    let motion_path = run_from([
        "dualtalker", "animate", "--checkpoint", s(&ckpt), "--features", s(&features), "--speaker", "1", "--out",
        s(&anim), "--obj-every", "3", "--template", s(&data.join("template.dtpl")),
    ])
    .unwrap()
    .primary
    .unwrap();
    let motion = load_motion(&motion_path).unwrap();
    assert_eq!(motion.frames(), 7);
    assert_eq!(fs::read_dir(anim.join("obj")).unwrap().count(), 3);
    let again = d.join("anim2");
    run_from([
        "dualtalker", "animate", "--checkpoint", s(&ckpt), "--features", s(&features), "--speaker", "1", "--out",
        s(&again),
    ])
    .unwrap();
    assert_eq!(sha(&motion_path), sha(&again.join("motion.dtmo")));
    let resampled = d.join("anim3");
    let p = run_from([
        "dualtalker", "animate", "--checkpoint", s(&ckpt), "--features", s(&features), "--speaker", "0", "--out",
        s(&resampled), "--frames", "11",
    ])
    .unwrap()
    .primary
    .unwrap();
    assert_eq!(load_motion(p).unwrap().frames(), 11);

    let feat = d.join("lip").join("features.dtft");
    run_from([
        "dualtalker", "lipread", "--checkpoint", s(&ckpt), "--motion", s(&motion_path), "--speaker", "1", "--out",
        s(&feat),
    ])
    .unwrap();
    let f = load_features(&feat).unwrap();
    assert_eq!((f.frames(), f.dim()), (7, 4));
    assert!(f.values().data().iter().all(|v| v.is_finite()));
}

#[test]
fn exit_codes_follow_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = synth(d, "data", None);
    let missing = d.join("missing.dtck");
    let err = run_from(["dualtalker", "eval", "--checkpoint", s(&missing), "--data", s(&manifest)]).unwrap_err();
    assert_eq!(err.exit_code(), 3);

    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"train": {"learnig_rate": 1}}"#).unwrap();
    let err = run_from(["dualtalker", "train", "--config", s(&bad), "--data", s(&manifest), "--out", s(d)]).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    let cfg = small_config(d, serde_json::json!({"learning_rate": 1e200}));
    let err = run_from(["dualtalker", "train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&d.join("blowup"))])
        .unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");

    let err = run_from(["dualtalker", "gradcheck", "--scope", "op", "--tolerance", "1e-300"]).unwrap_err();
    assert_eq!(err.exit_code(), 5);
    assert!(err.to_string().contains("op "));
    run_from(["dualtalker", "gradcheck", "--scope", "op"]).unwrap();
}

#[test]
fn ablate_emits_table_json_and_lip_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = synth(d, "data", None);
    let cfg = small_config(d, serde_json::json!({"epochs": 1}));
    let out = d.join("ablate");
    run_from([
        "dualtalker", "ablate", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&out), "--seeds", "2",
    ])
    .unwrap();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 8);
    let csv = fs::read_to_string(out.join("lip_distance.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "frame,ground_truth,full,nodual,noccrl,sharedcodec");
    assert!(fs::read_to_string(out.join("ablation.txt")).unwrap().contains("w/o dual training"));
}
