use std::path::Path;
use std::process::{Command, Output};

fn streamvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamvit"))
        .args(args)
        .env_remove("OMNISTREAM_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Bench flags for a model small enough to time in milliseconds, with
/// enough tokens per frame that attention dominates.
const TOY: &[&str] = &["--grid", "6", "6", "--dim", "32", "--heads", "2", "--layers", "2", "--reps", "9"];

fn bench(extra: &[&str]) -> Output {
    let mut args = vec!["bench"];
    args.extend_from_slice(TOY);
    args.extend_from_slice(extra);
    streamvit(&args)
}

struct Row {
    mode: String,
    t: usize,
    median: f64,
    bytes: usize,
}

fn rows(csv: &str) -> Vec<Row> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("mode,T,median_s,iqr_s,bytes"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 5, "{l}");
            Row {
                mode: f[0].to_string(),
                t: f[1].parse().unwrap(),
                median: f[2].parse().unwrap(),
                bytes: f[4].parse().unwrap(),
            }
        })
        .collect()
}

#[test]
fn cache_bench_rows_are_monotone_in_context() {
    let out = bench(&["--frames", "8,16,32", "--mode", "cache"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = rows(&stdout(&out));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.mode == "cache"));
    assert_eq!(rows.iter().map(|r| r.t).collect::<Vec<_>>(), [8, 16, 32]);
    for w in rows.windows(2) {
        assert!(w[1].median >= w[0].median, "{} then {}", w[0].median, w[1].median);
        assert_eq!(w[1].bytes * w[0].t, w[0].bytes * w[1].t);
    }
}

#[test]
fn single_frame_costs_the_same_in_both_modes() {
    let out = bench(&["--frames", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = rows(&stdout(&out));
    assert_eq!(rows.len(), 2);
    let (a, b) = (rows[0].median, rows[1].median);
    assert!(a.max(b) / a.min(b) < 2.0, "cache {a}, recompute {b}");
}

#[test]
fn bench_writes_csv_file_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let out = bench(&["--frames", "3,5", "--verify-during-bench", "--csv", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let rows = rows(&std::fs::read_to_string(&path).unwrap());
    let modes: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    assert_eq!(modes, ["cache", "recompute", "cache", "recompute"]);
}

#[test]
fn bad_bench_flags_exit_with_usage_code() {
    for extra in [
        &["--reps", "2"][..],
        &["--frames", "0"],
        &["--frames", "a,b"],
        &["--mode", "sometimes"],
        &["--heads", "3"],
        &["--grid", "4"],
        &["--unknown"],
    ] {
        let out = bench(extra);
        assert_eq!(out.status.code(), Some(2), "{extra:?}");
        assert!(out.stdout.is_empty() || stdout(&out).lines().count() <= 1, "{extra:?}");
    }
}

#[test]
fn unknown_suite_is_a_usage_error() {
    assert_eq!(streamvit(&["verify", "vibes"]).status.code(), Some(2));
    assert_eq!(streamvit(&[]).status.code(), Some(2));
}

#[test]
fn verify_prints_one_line_per_property() {
    let out = streamvit(&["verify", "rope", "--trials", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.lines().count() >= 3);
    assert!(text.lines().all(|l| l.starts_with("rope/PASS ")), "{text}");
}

#[test]
fn injected_future_leak_fails_causality() {
    let clean = streamvit(&["verify", "causality", "--trials", "2"]);
    assert_eq!(clean.status.code(), Some(0), "{}", stdout(&clean));
    let leaky = streamvit(&["verify", "causality", "--trials", "2", "--inject-leak"]);
    assert_eq!(leaky.status.code(), Some(1));
    assert!(stdout(&leaky).contains("FAIL"));
}

fn train(dir: &Path, name: &str, extra: &[&str]) -> (Output, String) {
    let path = dir.join(name);
    let mut args = vec!["train-toy", "--csv", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = streamvit(&args);
    let csv = std::fs::read_to_string(&path).unwrap_or_default();
    (out, csv)
}

#[test]
fn one_training_step_gives_one_row() {
    let out = streamvit(&["train-toy", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,total,dino,ibot,koleo,gram,depth,ray,points,camera,caption");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,"));
    assert_eq!(lines[1].split(',').count(), 11);
}

#[test]
fn training_csv_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, first) = train(dir.path(), "a.csv", &["--steps", "3", "--seed", "5"]);
    let (b, second) = train(dir.path(), "b.csv", &["--steps", "3", "--seed", "5"]);
    assert_eq!((a.status.code(), b.status.code()), (Some(0), Some(0)));
    assert_eq!(first.lines().count(), 4);
    assert_eq!(first, second);
    let (_, other) = train(dir.path(), "c.csv", &["--steps", "3", "--seed", "6"]);
    assert_ne!(first, other);
}

#[test]
fn training_reads_a_json_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let mut config = streamvit::engine::EngineConfig::default();
    config.train.caption_batch = 1;
    std::fs::write(&cfg, config.to_json()).unwrap();
    let (out, csv) = train(dir.path(), "out.csv", &["--steps", "2", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(csv.lines().count(), 3);

    std::fs::write(&cfg, "{ not json").unwrap();
    let (out, _) = train(dir.path(), "bad.csv", &["--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let missing = dir.path().join("absent.json");
    let (out, _) = train(dir.path(), "bad.csv", &["--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_numeric_code_and_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let mut config = streamvit::engine::EngineConfig::default();
    config.train.learning_rate = 1e300;
    std::fs::write(&cfg, config.to_json()).unwrap();
    let (out, csv) = train(dir.path(), "out.csv", &["--steps", "20", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{csv}\n{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("step "), "{err}");
    // rows written before the failure stay well formed
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 11));
}

#[test]
fn thread_cap_must_be_positive() {
    let out = Command::new(env!("CARGO_BIN_EXE_streamvit"))
        .args(["verify", "rope", "--trials", "1"])
        .env("OMNISTREAM_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_streamvit"))
        .args(["verify", "rope", "--trials", "1", "--threads", "4"])
        .env("OMNISTREAM_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}
