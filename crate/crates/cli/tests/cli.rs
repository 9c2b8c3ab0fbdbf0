use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn lacovl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lacovl"))
        .args(args)
        .current_dir(dir)
        .env("LACOVL_LOG", "error")
        .output()
        .expect("spawn lacovl")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

/// Synthetic data plus a one-epoch training run in `dir/run`.
fn trained(dir: &Path, n_per_class: &str, extra: &[&str]) {
    ok(&lacovl(dir, &["synth-data", "--n-per-class", n_per_class, "--out", "data"]));
    let mut args = vec!["train", "--out", "run", "--override", "data.dataset_dir=\"data\"", "--override", "train.epochs=1"];
    for e in extra {
        args.extend(["--override", e]);
    }
    ok(&lacovl(dir, &args));
}

#[test]
fn synth_data_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    ok(&lacovl(dir.path(), &["synth-data", "--out", "a", "--seed", "3"]));
    ok(&lacovl(dir.path(), &["synth-data", "--out", "b", "--seed", "3"]));
    let labels = fs::read_to_string(dir.path().join("a/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 71);
    assert_eq!(fs::read_dir(dir.path().join("a/images")).unwrap().count(), 70);
    assert_eq!(labels, fs::read_to_string(dir.path().join("b/labels.csv")).unwrap());
    for entry in fs::read_dir(dir.path().join("a/images")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(dir.path().join("a/images").join(&name)).unwrap();
        let b = fs::read(dir.path().join("b/images").join(&name)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = lacovl(dir.path(), &["train", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.dataset_dir"));
    let bad = lacovl(dir.path(), &["train", "--override", "model.d_model=0"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, "2", &[]);
    for f in ["train.log", "best.ckpt", "final.ckpt", "config.toml"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(d.join("run/train.log")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch\tL_train\tce_sem_a\tce_vis_a\ttrain_acc\tval_acc");
    assert_eq!(log.lines().count(), 2);

    ok(&lacovl(d, &["eval", "--checkpoint", "run/final.ckpt", "--out", "e1"]));
    ok(&lacovl(d, &["eval", "--checkpoint", "run/final.ckpt", "--out", "e2"]));
    let csv = fs::read_to_string(d.join("e1/eval.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(d.join("e2/eval.csv")).unwrap());
    for line in csv.lines().skip(1).take(7) {
        let f: Vec<&str> = line.split(',').collect();
        let support: usize = f[1].parse().unwrap();
        let row: usize = f[3..].iter().map(|v| v.parse::<usize>().unwrap()).sum();
        assert_eq!(support, row);
    }

    ok(&lacovl(d, &["export-embeddings", "--checkpoint", "run/final.ckpt", "--out", "emb"]));
    let emb = fs::read_to_string(d.join("emb/embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 15);
    assert_eq!(emb.lines().next().unwrap().split(',').count(), 2 + 32 + 7);

    fs::write(d.join("data/labels.csv"), "id,label\nc0_0000,9\n").unwrap();
    let out = lacovl(d, &["eval", "--checkpoint", "run/final.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn visual_only_variant_trains() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), "1", &["ablation.vles=false"]);
    let cfg = fs::read_to_string(dir.path().join("run/config.toml")).unwrap();
    assert!(cfg.contains("vles = false"));
    let out = lacovl(dir.path(), &["export-embeddings", "--checkpoint", "run/final.ckpt", "--out", "emb"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dump_attn_writes_the_map_set() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d, "1", &[]);
    ok(&lacovl(d, &["dump-attn", "--checkpoint", "run/final.ckpt", "--image", "data/images/c3_0000.ppm", "--out", "maps"]));
    let mut names: Vec<String> = fs::read_dir(d.join("maps"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut expected = Vec::new();
    for i in 1..=3 {
        for k in ["dense", "gate", "mixed", "sparse"] {
            expected.push(format!("s{i}_{k}.csv"));
        }
        for k in ["alpha1", "alpha2", "dmat"] {
            expected.push(format!("csl_s{i}_{k}.csv"));
        }
    }
    expected.sort();
    assert_eq!(names, expected);
    for i in 1..=3 {
        for row in read_csv(&d.join(format!("maps/s{i}_dense.csv"))) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for row in read_csv(&d.join(format!("maps/s{i}_gate.csv"))) {
            assert!(row.iter().all(|&g| g > 0.0 && g < 1.0));
        }
    }
    let dense = read_csv(&d.join("maps/s1_dense.csv"));
    assert_eq!((dense.len(), dense[0].len()), (64, 64));
}

#[test]
fn gradcheck_passes_quickly_without_frozen_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = lacovl(dir.path(), &["gradcheck"]);
    let elapsed = start.elapsed();
    ok(&out);
    assert!(elapsed < Duration::from_secs(60), "{elapsed:?}");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("vles.prompt_bias.w"));
    assert!(!text.contains("teacher.") && !text.contains("backbone.geometry"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn end_to_end_runs_are_byte_identical() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        ok(&lacovl(d, &["synth-data", "--n-per-class", "2", "--out", "data", "--seed", "5"]));
        ok(&lacovl(
            d,
            &["train", "--seed", "5", "--out", "run", "--override", "data.dataset_dir=\"data\"", "--override", "train.epochs=2"],
        ));
        ok(&lacovl(d, &["eval", "--checkpoint", "run/final.ckpt", "--out", "ev"]));
        let read = |p: &str| fs::read(d.join(p)).unwrap();
        (read("run/best.ckpt"), read("run/final.ckpt"), read("run/train.log"), read("ev/eval.csv"))
    };
    assert!(run() == run());
}
