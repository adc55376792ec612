use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pointcaps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointcaps"))
        .args(args)
        .env("POINTCAPS_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pointcaps(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1, "one summary line expected, got {stdout:?}");
    stdout
}

fn field<'a>(summary: &'a str, key: &str) -> &'a str {
    summary
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no `{key}` in {summary:?}"))
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(String::from)
        .collect()
}

fn gen_small(dir: &Path, seed: &str) {
    ok(&[
        "gen",
        "--per-class",
        "4",
        "--test-per-class",
        "2",
        "--points",
        "32",
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn train_small(data: &Path, out: &Path, epochs: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        epochs,
        "--batch-size",
        "8",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn gen_counts_files() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let s = ok(&["gen", "--per-class", "100", "--points", "256", "--out", out.to_str().unwrap()]);
    assert_eq!(field(&s, "files"), "500");
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 501);
    assert!(out.join("run.json").is_file());
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small(&a, "7");
    gen_small(&b, "7");
    for rel in ["manifest.csv", "train/cube/0001.xyz", "test/torus/0000.xyz"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn gen_honours_point_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    ok(&[
        "gen",
        "--shapes",
        "sphere,plane",
        "--per-class",
        "2",
        "--points",
        "2048",
        "--out",
        out.to_str().unwrap(),
    ]);
    for rel in ["train/sphere/0000.xyz", "train/sphere/0001.xyz", "train/plane/0000.xyz", "train/plane/0001.xyz"] {
        assert_eq!(data_rows(&out.join(rel)).len(), 2048);
    }
}

#[test]
fn train_then_analyse() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    gen_small(&data, "1");
    let s = train_small(&data, &run, "2", &[]);
    assert_eq!(field(&s, "split"), "test");
    for f in ["checkpoint.ckpt", "config.txt", "metrics.csv", "run.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let run_json: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(run_json["subcommand"], "train");
    assert!(run_json["config"].as_str().unwrap().contains("num_points = 32"));

    let ckpt = run.join("checkpoint.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let data_s = data.to_str().unwrap();

    let e = ok(&["eval", "--ckpt", ckpt, "--data", data_s, "--baseline"]);
    assert_eq!(field(&e, "clouds"), "10");
    assert_eq!(field(&e, "accuracy"), field(&s, "accuracy"));
    assert!(field(&e, "baseline_cd").parse::<f64>().unwrap() > 0.0);

    let sweep_dir = tmp.path().join("sweep");
    let w = ok(&[
        "sweep",
        "--ckpt",
        ckpt,
        "--data",
        data_s,
        "--mode",
        "outliers",
        "--levels",
        "0,4,8,16",
        "--out",
        sweep_dir.to_str().unwrap(),
    ]);
    assert_eq!(field(&w, "rows"), "4");
    let csv = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().all(|l| l.split(',').count() == 7));

    let perturb_dir = tmp.path().join("perturb");
    let input = data.join("test/cube/0000.xyz");
    let p = ok(&[
        "perturb",
        "--ckpt",
        ckpt,
        "--input",
        input.to_str().unwrap(),
        "--dim",
        "3",
        "--range",
        "-5",
        "5",
        "--steps",
        "5",
        "--out",
        perturb_dir.to_str().unwrap(),
    ]);
    assert_eq!(field(&p, "clouds"), "5");
    for i in 0..5 {
        assert_eq!(data_rows(&perturb_dir.join(format!("perturb_{i:02}.xyz"))).len(), 32);
    }

    let parts_dir = tmp.path().join("parts");
    ok(&[
        "parts",
        "--ckpt",
        ckpt,
        "--input",
        input.to_str().unwrap(),
        "--out",
        parts_dir.to_str().unwrap(),
    ]);
    let rows = data_rows(&parts_dir.join("0000.parts.xyz"));
    let width = data_rows(&input)[0].split_whitespace().count();
    assert_eq!(rows.len(), 32);
    for r in rows {
        let cols: Vec<&str> = r.split_whitespace().collect();
        assert_eq!(cols.len(), width);
        let part = cols.last().unwrap();
        assert!(part.parse::<usize>().is_ok(), "part column `{part}`");
    }
}

#[test]
fn training_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "3");
    let out = tmp.path().join("run");
    train_small(&data, &out, "1", &[]);
    let first = fs::read(out.join("checkpoint.ckpt")).unwrap();
    let first_run = fs::read(out.join("run.json")).unwrap();
    train_small(&data, &out, "1", &[]);
    assert_eq!(first, fs::read(out.join("checkpoint.ckpt")).unwrap());
    assert_eq!(first_run, fs::read(out.join("run.json")).unwrap());
}

#[test]
fn ablation_flags_reach_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "5");
    let out = tmp.path().join("run");
    train_small(&data, &out, "1", &["--routing", "all_er", "--no-skip"]);
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(cfg.contains("routing_mode = all_er"));
    assert!(cfg.contains("skip_connection = false"));
}

#[test]
fn mismatched_checkpoint_is_a_version_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "2");
    let out = tmp.path().join("run");
    train_small(&data, &out, "1", &[]);
    let other = tmp.path().join("other.txt");
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap().replace("digit = 4,", "digit = 6,");
    fs::write(&other, cfg).unwrap();
    let res = pointcaps(&[
        "eval",
        "--ckpt",
        out.join("checkpoint.ckpt").to_str().unwrap(),
        "--config",
        other.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("version error"));
}

#[test]
fn unknown_flags_are_rejected() {
    let res = pointcaps(&["gen", "--out", "x", "--colour", "red"]);
    assert!(!res.status.success());
}

#[test]
fn stats_reports_totals() {
    let s = ok(&["stats", "--preset", "tiny", "--points", "64", "--classes", "4"]);
    assert_eq!(field(&s, "params"), "129955");
    assert_eq!(field(&s, "flops"), "6894240");
}

#[test]
fn quick_verify_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("report.txt");
    let s = ok(&["verify", "--quick", "--out", report.to_str().unwrap()]);
    assert_eq!(field(&s, "failed"), "0");
    let text = fs::read_to_string(report).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    assert!(text.contains("routing_oracle_er"));
}
