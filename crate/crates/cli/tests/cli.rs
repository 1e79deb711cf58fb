use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn swq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swq"))
        .args(args)
        .env_remove("SWQ_SEED")
        .output()
        .expect("run swq")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, r#"{"duration_s": 4.0, "flow_start_window_s": 1.0}"#).unwrap();
    let (a, b, c) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("c.csv"));
    ok(&swq(&["simulate", "--config", p(&cfg), "--seed", "7", "--out", p(&a)]));
    ok(&swq(&["simulate", "--config", p(&cfg), "--seed", "7", "--out", p(&b)]));
    ok(&swq(&["simulate", "--config", p(&cfg), "--seed", "8", "--out", p(&c)]));
    let (a, b, c) = (fs::read(a).unwrap(), fs::read(b).unwrap(), fs::read(c).unwrap());
    assert!(a.len() > 1000);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn seed_env_var_is_a_fallback_for_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    fs::write(&cfg, "duration_s = 3.0\nflow_start_window_s = 1.0\n").unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    ok(&swq(&["simulate", "--config", p(&cfg), "--seed", "11", "--out", p(&a)]));
    let out = Command::new(env!("CARGO_BIN_EXE_swq"))
        .args(["simulate", "--config", p(&cfg), "--out", p(&b)])
        .env("SWQ_SEED", "11")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

fn constant_trace(path: &Path, n: usize) {
    let mut s = String::from("flow_id,receiver_id,seq,send_time_ms,packet_size_bytes,queue_mark,acked,latency_ms\n");
    for i in 0..n {
        s.push_str(&format!("0,0,{i},{}.0,1500,L4S,1,25.0\n", i));
    }
    fs::write(path, s).unwrap();
}

#[test]
fn evaluate_last_value_on_constant_trace_reports_degenerate_scores() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("flat.csv");
    constant_trace(&trace, 3000);
    let metrics = dir.path().join("m.csv");
    let out = swq(&[
        "evaluate", "--baseline", "last-value", "--trace", p(&trace), "--from-s", "0.5", "--to-s", "2.9", "--out",
        p(&metrics),
    ]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("N/A"), "{stdout}");
    assert!(stdout.contains("precision is 1.0"), "{stdout}");
    let csv = fs::read_to_string(metrics).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("precision"), "1.0");
    assert_eq!(col("recall"), "");
    assert_eq!(col("true_events"), "0");
    assert_eq!(col("mse_ms2"), "0.0");
}

#[test]
fn l4s_run_default_policy_matches_plain_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sel.json");
    fs::write(&cfg, r#"{"topology": "L4SSelection", "n_l4s_flows": 6, "n_classic_flows": 4, "duration_s": 4.0, "flow_start_window_s": 1.0}"#).unwrap();
    let (a, b) = (dir.path().join("sim.csv"), dir.path().join("loop.csv"));
    ok(&swq(&["simulate", "--config", p(&cfg), "--seed", "3", "--out", p(&a)]));
    ok(&swq(&["l4s-run", "--config", p(&cfg), "--seed", "3", "--policy", "default", "--out", p(&b)]));
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn errors_are_one_line_with_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = swq(&["evaluate", "--baseline", "ewma", "--trace", p(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: kind=io msg="), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = swq(&["simulate", "--config", p(&bad), "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(4));

    let invalid = dir.path().join("invalid.json");
    fs::write(&invalid, r#"{"bandwidth_mbps": -1.0}"#).unwrap();
    let out = swq(&["simulate", "--config", p(&invalid), "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: kind=invalid"));

    let out = swq(&["simulate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: kind=usage"));

    let ckpt = dir.path().join("bad.ckpt");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = swq(&["--describe", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn train_describe_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, r#"{"duration_s": 6.0, "flow_start_window_s": 1.0}"#).unwrap();
    let trace = dir.path().join("t.csv");
    ok(&swq(&["simulate", "--config", p(&cfg), "--seed", "2", "--out", p(&trace)]));
    let exp = dir.path().join("exp.json");
    fs::write(
        &exp,
        r#"{"train_span_s": [1.0, 4.0], "test_span_s": [4.0, 6.0], "model": {"d_model": 64, "heads": 4, "layers": 2, "ff_width": 256, "n_features": 7, "horizon": 8, "window": 32}}"#,
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    ok(&swq(&["train", "--trace", p(&trace), "--config", p(&exp), "--windows", "40", "--epochs", "1", "--out", p(&ckpt)]));
    let out = swq(&["--describe", p(&ckpt)]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    let count: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("trainable_parameters "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((80_000..=120_000).contains(&count), "{count}");
    assert!(text.contains("schema_version 1"));
    let same = swq(&["describe", p(&ckpt)]);
    assert_eq!(same.stdout, out.stdout);

    let out = swq(&["predict", "--checkpoint", p(&ckpt), "--trace", p(&trace), "--base", "500"]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["predicted_latency_ms"].as_array().unwrap().len(), 8);

    let tuned = dir.path().join("ft.ckpt");
    ok(&swq(&[
        "finetune", "--checkpoint", p(&ckpt), "--trace", p(&trace), "--config", p(&exp), "--at-s", "4.0", "--span-s",
        "2.0", "--steps", "5", "--out", p(&tuned),
    ]));
    let out = swq(&["evaluate", "--checkpoint", p(&tuned), "--trace", p(&trace), "--config", p(&exp)]);
    ok(&out);
}
