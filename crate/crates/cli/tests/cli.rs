use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use resext::harness::random_inputs;
use resext::tensor_io::{encode, read_tensor};
use resext::{build_schedule, FrequencySchedule, RdfcLog, RopeConfig, Tensor};
use serde_json::Value;
use tempfile::TempDir;

fn resext(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resext"))
        .current_dir(dir)
        .env_remove("UITF_WORKERS")
        .args(args)
        .output()
        .expect("run resext")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn json_stdout(output: &Output) -> Value {
    assert_eq!(code(output), 0, "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let text = String::from_utf8_lossy(&output.stdout);
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("stdout is not one JSON document ({e}):\n{text}"))
}

fn schedule_file(dir: &Path, name: &str, periods: &[f64], axis_dim: usize) {
    let s = FrequencySchedule::from_freqs(RopeConfig::new(10000.0, axis_dim), periods.iter().map(|t| TAU / t).collect())
        .unwrap();
    fs::write(dir.join(name), s.to_json().unwrap()).unwrap();
}

fn read_schedule(path: &Path) -> FrequencySchedule {
    FrequencySchedule::from_json(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_inputs(dir: &Path, heads: usize, n: usize, d: usize, seed: u64) {
    let x = random_inputs::<f32>(heads, n, d, d, seed).unwrap();
    for (name, t) in [("q", x.q()), ("k", x.k()), ("v", x.v())] {
        fs::write(dir.join(format!("{name}.uitf")), encode(t).unwrap()).unwrap();
    }
}

const ATTEND: [&str; 9] = ["attend", "--q", "q.uitf", "--k", "k.uitf", "--v", "v.uitf", "--out", "o.uitf"];

#[test]
fn analyze_tiny_schedule() {
    let dir = TempDir::new().unwrap();
    let out = resext(
        dir.path(),
        &["analyze", "--base", "100", "--axis-dim", "4", "--train-len", "6", "--target-len", "12", "--json"],
    );
    let v = json_stdout(&out);
    let periods: Vec<f64> = v["periods"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).collect();
    let theta2 = 100f64.powf(-0.5);
    assert!((periods[0] - TAU).abs() < 1e-12);
    assert!((periods[1] - TAU / theta2).abs() < 1e-9);
    // |2pi - 6| < |20pi - 6|
    assert_eq!(v["dominant_index"]["zero_based"], 0);
    assert_eq!(v["dominant_index"]["one_based"], 1);
    assert_eq!(v["non_repetition"], false);
    assert!(!out.stderr.is_empty(), "human table should go to stderr");
}

#[test]
fn analyze_without_extrapolation() {
    let dir = TempDir::new().unwrap();
    for (train, expected) in [(6, true), (7, false), (30, false), (62, true), (63, false)] {
        let t = train.to_string();
        let v = json_stdout(&resext(
            dir.path(),
            &["analyze", "--base", "100", "--axis-dim", "4", "--train-len", &t, "--target-len", &t, "--json"],
        ));
        let k = v["dominant_index"]["zero_based"].as_u64().unwrap() as usize;
        let period = v["periods"][k].as_f64().unwrap();
        assert_eq!(v["non_repetition"], period >= train as f64, "train {train}");
        assert_eq!(v["non_repetition"], expected, "train {train}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&resext(dir.path(), &["analyze", "--base", "100"])), 2);
    assert_eq!(code(&resext(dir.path(), &["analyze", "--bogus"])), 2);
    assert_eq!(code(&resext(dir.path(), &["nonsense"])), 2);
    let odd = resext(
        dir.path(),
        &["analyze", "--base", "100", "--axis-dim", "5", "--train-len", "6", "--target-len", "12"],
    );
    assert_eq!(code(&odd), 2);
    assert_eq!(code(&resext(dir.path(), &["--help"])), 0);
}

#[test]
fn pi_halves_every_frequency() {
    let dir = TempDir::new().unwrap();
    let s = build_schedule(RopeConfig::new(10000.0, 16)).unwrap();
    fs::write(dir.path().join("s.json"), s.to_json().unwrap()).unwrap();
    let out = resext(
        dir.path(),
        &["correct", "--schedule", "s.json", "--mode", "pi", "--train-h", "64", "--target-h", "128", "--out", "o.json"],
    );
    assert_eq!(code(&out), 0);
    let o = read_schedule(&dir.path().join("o.json"));
    for (a, b) in s.freqs.iter().zip(&o.freqs) {
        assert_eq!(*b, a / 2.0);
    }
}

#[test]
fn dominant_records_one_correction_per_axis() {
    let dir = TempDir::new().unwrap();
    let s = build_schedule(RopeConfig::new(10000.0, 32)).unwrap();
    fs::write(dir.path().join("s.json"), s.to_json().unwrap()).unwrap();
    let v = json_stdout(&resext(
        dir.path(),
        &[
            "correct", "--schedule", "s.json", "--mode", "dominant", "--train-h", "64", "--train-w", "32",
            "--target-h", "256", "--target-w", "96", "--out", "h.json", "--out-w", "w.json", "--json",
        ],
    ));
    let h = read_schedule(&dir.path().join("h.json"));
    let w = read_schedule(&dir.path().join("w.json"));
    assert_eq!(h.corrections.len(), 1);
    assert_eq!(w.corrections.len(), 1);
    assert_eq!(h.corrections[0].index, 4);
    assert_eq!(h.freqs[4], 2.0 * PI / 256.0);
    assert_eq!(v["corrected_index"]["h"], 4);
    assert_eq!(v["corrected_index"]["w"], w.corrections[0].index);
}

#[test]
fn rdfc_writes_two_entry_log_per_axis() {
    let dir = TempDir::new().unwrap();
    schedule_file(dir.path(), "s.json", &[4.0, 16.0, 64.0, 80.0, 1024.0, 4096.0], 12);
    let out = resext(
        dir.path(),
        &["correct", "--schedule", "s.json", "--mode", "rdfc", "--train-h", "64", "--target-h", "256", "--out", "o.json"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = RdfcLog::from_json_lines(&fs::read_to_string(dir.path().join("o.rdfc.jsonl")).unwrap()).unwrap();
    assert_eq!(log.len(), 4);
    let h: Vec<usize> = log.iter().filter(|it| it.axis == resext::Axis::H).map(|it| it.chosen_index).collect();
    assert_eq!(h, vec![2, 3]);
    assert_eq!(read_schedule(&dir.path().join("o.json")).corrections.len(), 2);
}

#[test]
fn rdfc_stagnation_keeps_partial_log() {
    let dir = TempDir::new().unwrap();
    schedule_file(dir.path(), "s.json", &[30.0, 40.0, 64.0, 4096.0], 8);
    let out = resext(
        dir.path(),
        &[
            "correct", "--schedule", "s.json", "--mode", "rdfc", "--detector", "window", "--window", "0.5",
            "--train-h", "64", "--target-h", "256", "--out", "o.json", "--log", "partial.jsonl",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(!dir.path().join("o.json").exists());
    let log = RdfcLog::from_json_lines(&fs::read_to_string(dir.path().join("partial.jsonl")).unwrap()).unwrap();
    let n: Vec<usize> = log.iter().filter(|it| it.axis == resext::Axis::H).map(|it| it.observed_period).collect();
    assert_eq!(n, vec![64, 40]);
}

#[test]
fn malformed_schedule_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.json"), "{\"base\": 1").unwrap();
    let out = resext(dir.path(), &["correct", "--schedule", "bad.json", "--mode", "pi", "--scale", "2", "--out", "o.json"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("format"));
}

#[test]
fn attend_with_unit_focus_matches_oracle() {
    let dir = TempDir::new().unwrap();
    write_inputs(dir.path(), 3, 150, 16, 2);
    let mut args = ATTEND.to_vec();
    args.extend(["--lambda-min", "1.0", "--lambda-max", "1.0", "--check", "--json", "--bq", "32", "--bkv", "64"]);
    let v = json_stdout(&resext(dir.path(), &args));
    assert!(v["check"]["max_abs_diff"].as_f64().unwrap() < 1e-4);
    assert_eq!(v["check"]["passed"], true);
    assert!(v["lambda"].as_array().unwrap().iter().all(|l| l.as_f64() == Some(1.0)));
}

#[test]
fn attend_defaults_keep_lambda_in_bounds() {
    let dir = TempDir::new().unwrap();
    write_inputs(dir.path(), 6, 64, 8, 3);
    let mut args = ATTEND.to_vec();
    args.extend(["--report", "r.json"]);
    assert_eq!(code(&resext(dir.path(), &args)), 0);
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    let lambdas: Vec<f64> = v["lambda"].as_array().unwrap().iter().map(|l| l.as_f64().unwrap()).collect();
    assert_eq!(lambdas.len(), 6);
    assert!(lambdas.iter().all(|&l| (1.0..=1.3).contains(&l)));
    assert!(lambdas.contains(&1.0) && lambdas.contains(&1.3));
}

#[test]
fn attend_single_token_returns_values() {
    let dir = TempDir::new().unwrap();
    write_inputs(dir.path(), 2, 1, 4, 4);
    assert_eq!(code(&resext(dir.path(), &ATTEND)), 0);
    let out = read_tensor(dir.path().join("o.uitf")).unwrap().into_f32().unwrap();
    let v = read_tensor(dir.path().join("v.uitf")).unwrap().into_f32().unwrap();
    assert_eq!(out, v);
}

#[test]
fn attend_rejects_bad_shapes() {
    let dir = TempDir::new().unwrap();
    write_inputs(dir.path(), 2, 5, 4, 4);
    fs::write(dir.path().join("k.uitf"), encode(&Tensor::<f32>::zeros(vec![2, 6, 4])).unwrap()).unwrap();
    assert_eq!(code(&resext(dir.path(), &ATTEND)), 1);

    let big = Tensor::<f32>::zeros(vec![1, 4097, 1]);
    for name in ["q", "k", "v"] {
        fs::write(dir.path().join(format!("{name}.uitf")), encode(&big).unwrap()).unwrap();
    }
    let mut args = ATTEND.to_vec();
    args.push("--check");
    let out = resext(dir.path(), &args);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("size limit"));
}

#[test]
fn bench_reports_streaming_memory() {
    let dir = TempDir::new().unwrap();
    let report = |n: &str| json_stdout(&resext(dir.path(), &["bench", "--n", n, "--dry-run", "--json"]));
    let (a, b) = (report("8192"), report("16384"));
    assert_eq!(a["engine_bytes"], b["engine_bytes"]);
    let per_head: u128 = b["naive_bytes_per_head"].as_str().unwrap().parse().unwrap();
    assert_eq!(per_head, 1 << 30);
    let a_head: u128 = a["naive_bytes_per_head"].as_str().unwrap().parse().unwrap();
    assert_eq!(per_head, 4 * a_head);

    let wide = json_stdout(&resext(
        dir.path(),
        &["bench", "--n", "40960", "--heads", "24", "--dim", "128", "--naive-elem-bytes", "2", "--dry-run", "--json"],
    ));
    let naive: u128 = wide["naive_bytes"].as_str().unwrap().parse().unwrap();
    assert!(naive > 80_000_000_000 && naive < 100_000_000_000);
}

#[test]
fn bench_runs_at_sixteen_k_tokens() {
    let dir = TempDir::new().unwrap();
    let v = json_stdout(&resext(dir.path(), &["bench", "--n", "16384", "--json"]));
    let engine = v["engine_bytes"].as_u64().unwrap();
    let peak = v["measured"]["peak_scratch_per_worker_bytes"].as_u64().unwrap();
    assert!(peak > 0 && peak <= 2 * engine);
    let per_head: u128 = v["naive_bytes_per_head"].as_str().unwrap().parse().unwrap();
    assert_eq!(per_head, 1 << 30);
    assert!(v["measured"]["attention_forward_ms"].as_f64().unwrap() > 0.0);
}

#[test]
fn bench_respects_budget() {
    let dir = TempDir::new().unwrap();
    let out = resext(dir.path(), &["bench", "--n", "100000", "--heads", "8", "--budget-mb", "16"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn fixtures_are_deterministic() {
    let dir = TempDir::new().unwrap();
    for sub in ["a", "b"] {
        let out = resext(
            dir.path(),
            &["fixtures", "--seed", "11", "--out-dir", sub, "--sizes", "3,17", "--grids", "2x5", "--heads", "3", "--dim", "4"],
        );
        assert_eq!(code(&out), 0);
    }
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for name in &names {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
    let q = read_tensor(dir.path().join("a/n17.f32.q.uitf")).unwrap();
    assert_eq!(q.shape(), &[3, 17, 4]);
    let grid = read_tensor(dir.path().join("a/grid2x5.f32.uitf")).unwrap();
    assert_eq!(grid.shape(), &[10, 8]);
}
