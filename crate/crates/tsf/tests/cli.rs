use std::path::Path;
use std::process::Command;

use tsf::cli::{main_with, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn tsf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tsf")).args(args).output().unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

const SMALL: &str = "images_per_class = 8\nimage_size = 8\nbackbone = 4,4\nsteps = 4\ntrain_q_per_class = 2\nq_per_class = 3\n";

#[test]
fn usage_errors_exit_one() {
    assert_eq!(main_with(["tsf"]), EXIT_USAGE);
    assert_eq!(main_with(["tsf", "frobnicate"]), EXIT_USAGE);
    assert_eq!(main_with(["tsf", "bench", "--bogus"]), EXIT_USAGE);
    assert_eq!(main_with(["tsf", "gen-data"]), EXIT_USAGE);
    assert_eq!(main_with(["tsf", "eval", "--data", "x"]), EXIT_USAGE);
    assert_eq!(main_with(["tsf", "bench", "--neck", "resnet"]), EXIT_USAGE);
    assert_eq!(main_with(["tsf", "bench", "--set", "nope=1"]), EXIT_USAGE);
    assert_eq!(main_with(["tsf", "--help"]), EXIT_OK);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = path(dir.path(), "missing.tsfds");
    let out = path(dir.path(), "m.ckpt");
    assert_eq!(main_with(["tsf", "train", "--data", &missing, "--out", &out]), EXIT_RUNTIME);
    assert_eq!(main_with(["tsf", "eval", "--ckpt", &missing, "--data", &missing]), EXIT_RUNTIME);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.tsfds"), path(dir.path(), "b.tsfds"));
    for p in [&a, &b] {
        assert!(tsf(&["gen-data", "--out", p, "--seed", "7", "--set", "image_size=8"]).status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(std::fs::read(&a).unwrap().starts_with(b"TSFDS1 "));
}

#[test]
fn end_to_end_runs_are_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "run.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = path(dir.path(), "d.tsfds");
    assert_eq!(main_with(["tsf", "gen-data", "--config", &cfg, "--seed", "3", "--out", &data]), EXIT_OK);

    let mut outputs = Vec::new();
    for (tag, threads) in [("a", "1"), ("b", "4"), ("c", "1")] {
        let ckpt = path(dir.path(), &format!("{tag}.ckpt"));
        let metrics = path(dir.path(), &format!("{tag}-metrics"));
        let train = tsf(&[
            "train", "--config", &cfg, "--data", &data, "--out", &ckpt, "--seed", "3", "--threads", threads, "--neck", "tsf",
            "--n-filter", "5", "--lambda", "0.5",
        ]);
        assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
        let eval = tsf(&[
            "eval", "--ckpt", &ckpt, "--data", &data, "--out", &metrics, "--episodes", "40", "--n-way", "5", "--k-shot", "1",
            "--threads", threads,
        ]);
        assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
        let json: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
        assert_eq!(json["episodes"], 40);
        outputs.push((
            std::fs::read(&ckpt).unwrap(),
            std::fs::read(format!("{metrics}.json")).unwrap(),
            std::fs::read(format!("{metrics}.csv")).unwrap(),
            std::fs::read(format!("{ckpt}.log.csv")).unwrap(),
        ));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn export_maps_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "run.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = path(dir.path(), "d.tsfds");
    let ckpt = path(dir.path(), "m.ckpt");
    assert_eq!(main_with(["tsf", "gen-data", "--config", &cfg, "--out", &data]), EXIT_OK);
    assert_eq!(main_with(["tsf", "train", "--config", &cfg, "--data", &data, "--out", &ckpt]), EXIT_OK);
    let maps = path(dir.path(), "maps");
    assert_eq!(main_with(["tsf", "export-maps", "--ckpt", &ckpt, "--data", &data, "--out", &maps, "--set", "map_images=2"]), EXIT_OK);
    assert_eq!(std::fs::read_dir(&maps).unwrap().count(), 14);

    let none = path(dir.path(), "none.ckpt");
    assert_eq!(main_with(["tsf", "train", "--config", &cfg, "--data", &data, "--out", &none, "--neck", "none"]), EXIT_OK);
    assert_eq!(main_with(["tsf", "export-maps", "--ckpt", &none, "--data", &data, "--out", &maps]), EXIT_RUNTIME);

    let report = path(dir.path(), "bench");
    assert_eq!(main_with(["tsf", "bench", "--out", &report, "--set", "bench_runs=2", "--set", "bench_warmup=0", "--set", "bench_heads=1"]), EXIT_OK);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(format!("{report}.json")).unwrap()).unwrap();
    assert_eq!(json["ratio"], 12.8);
}

#[test]
fn selftest_passes() {
    let out = tsf(&["selftest"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("0 failed"));
}
