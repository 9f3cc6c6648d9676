use std::fs;
use std::path::Path;
use std::process::Command;

use sketchclean::model::{save_checkpoint, NetConfig, Network, OutputMode};
use sketchclean::raster::SketchRaster;
use tempfile::tempdir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sketchclean"));
    c.env("SKETCHCLEAN_LOG", "error");
    c
}

fn code(c: &mut Command) -> i32 {
    c.output().expect("binary runs").status.code().expect("exit code")
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(code(bin().arg("frobnicate")), 2);
    assert_eq!(code(bin().args(["synth", "--n", "notanumber", "--out", "x"])), 2);
    assert_eq!(code(bin().arg("--help")), 0);
}

#[test]
fn eval_on_empty_dataset_is_usage_error() {
    let dir = tempdir().unwrap();
    let ckpt = dir.path().join("m.scn");
    save_checkpoint(&Network::build(&NetConfig::new(16, 2, OutputMode::Same), 0).unwrap(), &ckpt)
        .unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let c = code(bin().args(["eval", "--checkpoint"]).arg(&ckpt).arg("--dataset").arg(&empty));
    assert_eq!(c, 2);
}

#[test]
fn missing_checkpoint_is_runtime_or_usage_failure() {
    let dir = tempdir().unwrap();
    let c = code(
        bin()
            .args(["clean", "--checkpoint"])
            .arg(dir.path().join("nope.scn"))
            .arg("--input")
            .arg(dir.path().join("in.png"))
            .arg("--output")
            .arg(dir.path().join("out.png")),
    );
    assert_ne!(c, 0);
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempdir().unwrap();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let c = code(bin().args(["synth", "--n", "6", "--size", "24", "--seed", "9", "--out"]).arg(&out));
        assert_eq!(c, 0);
    }
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert!(a.iter().any(|(n, _)| n.ends_with("labels.csv")));
    assert_eq!(a, b);
}

#[test]
fn clean_blank_image_produces_output_sized_png() {
    let dir = tempdir().unwrap();
    let ckpt = dir.path().join("m.scn");
    save_checkpoint(&Network::build(&NetConfig::new(16, 2, OutputMode::Same), 3).unwrap(), &ckpt)
        .unwrap();
    let input = dir.path().join("in.png");
    fs::write(&input, SketchRaster::blank(20, 20).unwrap().to_png_bytes().unwrap()).unwrap();
    let output = dir.path().join("out.png");
    let c = code(
        bin()
            .args(["clean", "--checkpoint"])
            .arg(&ckpt)
            .arg("--input")
            .arg(&input)
            .arg("--output")
            .arg(&output),
    );
    assert_eq!(c, 0);
    let out = SketchRaster::from_image_bytes(&fs::read(&output).unwrap()).unwrap();
    assert_eq!((out.height(), out.width()), (16, 16));
}

#[test]
fn index_then_retrieve_finds_the_item_itself() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(bin().args(["synth", "--n", "12", "--size", "16", "--seed", "4", "--out"]).arg(&data)), 0);
    let index = dir.path().join("items.sci");
    assert_eq!(code(bin().args(["index", "--dataset"]).arg(&data).arg("--index").arg(&index)), 0);
    let first = fs::read_dir(data.join("clean"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .min()
        .unwrap();
    let out = bin()
        .args(["retrieve", "--k", "3", "--index"])
        .arg(&index)
        .arg("--input")
        .arg(&first)
        .output()
        .unwrap();
    assert!(out.status.success());
    let hits: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let hits = hits.as_array().unwrap();
    assert_eq!(hits.len(), 3);
    assert_eq!(hits[0]["id"], first.file_stem().unwrap().to_str().unwrap());
}

#[test]
fn train_then_eval_writes_artifacts() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(bin().args(["synth", "--n", "5", "--size", "16", "--out"]).arg(&data)), 0);
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"epochs": 2, "batch_size": 2, "net": {"input_size": 16, "base_width": 2, "output_mode": "same"}}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let c = code(bin().args(["train", "--config"]).arg(&cfg).arg("--dataset").arg(&data).arg("--out").arg(&run));
    assert_eq!(c, 0);
    for f in ["checkpoint.scn", "trainer.state", "history.jsonl", "split.json", "config.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);

    let csv = dir.path().join("m.csv");
    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(run.join("checkpoint.scn"))
        .arg("--dataset")
        .arg(&data)
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["n_pairs"], 5);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 6);
}
