use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn navstack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_navstack"))
        .args(args)
        .output()
        .expect("spawn navstack")
}

fn ok(args: &[&str]) -> Output {
    let out = navstack(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Splits a binary PGM into (width, height, pixels).
fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(String::from_utf8(bytes[start..i].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    let (w, h) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    (w, h, bytes[i + 1..].to_vec())
}

#[test]
fn simulate_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "simulate", "--scenario", "training-dynamic", "--seed", "4", "--episodes", "3",
            "--timeout", "6", "--out", s(&out),
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["trace-000.jsonl", "trace-001.jsonl", "trace-002.jsonl", "metrics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 3);
}

#[test]
fn jobs_flag_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        ok(&[
            "--jobs", jobs, "simulate", "--scenario", "training-dynamic", "--seed", "9",
            "--episodes", "4", "--timeout", "4", "--out", s(&out),
        ]);
        fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(run("one", "1"), run("two", "2"));
}

#[test]
fn missing_bundle_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = navstack(&[
        "simulate", "--scenario", "empty-room", "--bundle", "/does/not/exist.json",
        "--out", s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = navstack(&["simulate", "--scenario", "no-such-scenario", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_writes_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "evaluate", "--scenario", "empty-room", "--episodes", "3", "--out", s(dir.path()),
    ]);
    let agg: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["episodes"], 3);
    assert_eq!(agg["success_rate"], 1.0);
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn trained_expert_checkpoint_loads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    fs::write(
        &cfg,
        r#"{"population":6,"generations":1,"episodes_per_eval":1,"hidden":[8,8],"episode_timeout":4.0,"seed":5}"#,
    )
    .unwrap();
    let out = dir.path().join("gs");
    ok(&["train", "expert-gs", "--config", s(&cfg), "--out", s(&out)]);
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let ckpt = out.join("checkpoint.json");
    ok(&[
        "simulate", "--scenario", "training-static", "--bundle", s(&ckpt), "--mode",
        "lower-only", "--timeout", "2", "--out", s(&dir.path().join("sim")),
    ]);
}

#[test]
fn fusion_without_experts_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = navstack(&["train", "fusion", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expert-gs"));
    assert!(!dir.path().join("checkpoint.json").exists());
}

#[test]
fn constant_critic_gives_uniform_heatmap() {
    // the scripted bundle's critic is identically zero
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "heatmap", "--scenario", "empty-room", "--region", "-1,-1,1,1", "--stride", "0.5",
        "--out", s(dir.path()),
    ]);
    let (w, h, px) = read_pgm(&dir.path().join("heatmap.pgm"));
    assert_eq!((w, h), (5, 5));
    assert_eq!(px.len(), 25);
    assert!(px.iter().all(|&p| p == 128), "{px:?}");
}

#[test]
fn degenerate_region_gives_single_pixel() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "heatmap", "--scenario", "empty-room", "--pose", "3,5,0.5", "--region", "1,1,1,1",
        "--out", s(dir.path()),
    ]);
    let (w, h, px) = read_pgm(&dir.path().join("heatmap.pgm"));
    assert_eq!((w, h, px.len()), (1, 1, 1));
}

#[test]
fn frontier_debug_with_zero_gamma_picks_shortest_heuristic() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "frontier-debug", "--scenario", "blind-alley", "--gamma", "0", "--steps", "240",
        "--seed", "2", "--out", s(dir.path()),
    ]);
    let csv = fs::read_to_string(dir.path().join("candidates.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (t, d_h, sel) = (col("t"), col("d_h"), col("selected"));

    let mut groups: Vec<(String, Vec<(f64, bool)>)> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let row = (f[d_h].parse::<f64>().unwrap(), f[sel] == "1");
        match groups.last_mut() {
            Some((key, rows)) if key == f[t] => rows.push(row),
            _ => groups.push((f[t].to_string(), vec![row])),
        }
    }
    assert!(!groups.is_empty());
    for (time, rows) in &groups {
        let chosen: Vec<f64> = rows.iter().filter(|r| r.1).map(|r| r.0).collect();
        assert_eq!(chosen.len(), 1, "t={time}");
        let min = rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
        assert_eq!(chosen[0], min, "t={time}");
    }
}

#[test]
fn scenario_generate_roundtrips_through_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("rooms.json");
    ok(&["scenario", "generate", "--name", "rooms", "--seed", "3", "--out", s(&spec)]);
    let text = fs::read_to_string(&spec).unwrap();
    assert!(text.contains("rooms"));
    ok(&[
        "simulate", "--scenario", s(&spec), "--timeout", "2", "--out", s(&dir.path().join("sim")),
    ]);
    let manifest = fs::read_to_string(dir.path().join("sim/manifest.json")).unwrap();
    assert!(manifest.contains("rooms.json"));
}
