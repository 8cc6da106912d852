mod common;

use std::path::Path;
use std::process::{Command, Output};

use seal_core::benchmark::read_sft1;
use seal_core::events::VoxelGrid;

fn seal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seal"))
        .args(args)
        .env_remove("SEAL_CKPT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let out = seal(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn stage_two_without_init_names_the_stage_one_checkpoint() {
    let out = seal(&["train", "--stage", "2", "--manifest", "m.json", "--out", "x.ck"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage-1 checkpoint"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn validation_failures_exit_2_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["voxelize", "--events", "e.evt", "--out", "g.vox", "--window-ms", "0"],
        vec!["profile", "--resolutions", "0"],
        vec!["eval", "--manifest", "m.json"],
    ] {
        let out = seal(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);
    }
    // a missing file is a runtime failure, not a usage error
    let missing = dir.path().join("none.evt");
    let out = seal(&["voxelize", "--events", p(&missing), "--out", "g.vox"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&seal(&["synth", "--out", p(d), "--train", "6", "--held-out", "2"]));
    assert!(out.contains("6 training frames"));

    let vox = d.join("one.vox");
    ok(&seal(&[
        "voxelize", "--events", p(&d.join("train/train_0000.evt")), "--out", p(&vox), "--bins", "3", "--window-ms", "25",
    ]));
    let grid = VoxelGrid::load(&vox).unwrap();
    assert_eq!((grid.config.bins, grid.config.height, grid.config.width), (3, 32, 32));

    let gdir = d.join("rebuilt");
    ok(&seal(&[
        "build-guidance", "--world", p(&d.join("world.json")), "--image", p(&d.join("train/train_0000.png")),
        "--masks", p(&d.join("train/train_0000.masks.json")), "--frame-id", "train_0000", "--out", p(&gdir),
    ]));
    for f in ["masks_s.json", "vfeat_i.bin", "tfeat_p.bin", "captions_i.json"] {
        assert_eq!(
            std::fs::read(gdir.join(f)).unwrap(),
            std::fs::read(d.join("guidance/train_0000").join(f)).unwrap(),
            "{f}"
        );
    }

    let s1 = d.join("s1.ck");
    let s2 = d.join("s2.ck");
    let (manifest, world) = (d.join("train.json"), d.join("world.json"));
    let common = ["--manifest", p(&manifest), "--world", p(&world), "--iterations", "4", "--batch-size", "2", "--lr", "2e-3"];
    let mut a1 = vec!["train", "--stage", "1", "--out", p(&s1)];
    a1.extend(common);
    ok(&seal(&a1));
    let mut a2 = vec!["train", "--stage", "2", "--init", p(&s1), "--out", p(&s2), "--no-mfe", "--levels", "i,p"];
    a2.extend(common);
    ok(&seal(&a2));
    let log = std::fs::read_to_string(d.join("s2.ck.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["iter", "loss", "lr", "wall_ms"] {
        assert!(first.get(k).is_some(), "{k}");
    }

    let report = d.join("report.json");
    let out = ok(&seal(&["eval", "--ckpt", p(&s2), "--manifest", p(&d.join("bench.json")), "--prompt", "box", "--out", p(&report)]));
    assert!(out.contains("mean (box)"));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(doc["ap"].as_f64().unwrap() >= 0.0);

    // the environment variable wins over the flag
    let out = Command::new(env!("CARGO_BIN_EXE_seal"))
        .args(["eval", "--ckpt", "/does/not/exist", "--manifest", p(&d.join("bench.json")), "--prompt", "point"])
        .env("SEAL_CKPT", p(&s2))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(ok(&out).contains("mean (point)"));

    let frame = d.join("frames/test_0000.vox");
    let out = ok(&seal(&["infer", "--ckpt", p(&s2), "--voxel", p(&frame), "--point", "3,4", "--query", "car", "--query", "tree"]));
    let resp: seal_app::service::InferResponse = serde_json::from_str(&out).unwrap();
    assert_eq!(resp.results[0].masks.len(), 3);
    let out = seal(&["infer", "--ckpt", p(&s2), "--voxel", p(&frame), "--point", "3", "--query", "car"]);
    assert_eq!(out.status.code(), Some(2));

    let sft = d.join("feats.sft");
    ok(&seal(&["export-features", "--ckpt", p(&s2), "--manifest", p(&d.join("bench.json")), "--out", p(&sft)]));
    let bench = seal_core::benchmark::BenchmarkManifest::load(&d.join("bench.json")).unwrap();
    assert_eq!(read_sft1(&sft).unwrap().len(), bench.annotation_count());

    let out = ok(&seal(&["profile", "--resolutions", "16,32", "--masks", "2,4", "--channels", "4", "--repeats", "1", "--ckpt", p(&s2)]));
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("resolution,masks,ms"));
    assert_eq!(out.lines().filter(|l| l.contains(',')).count(), 5);
    assert!(out.contains("total"));
}
