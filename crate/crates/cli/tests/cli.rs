use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn stepstone(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stepstone"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn demo(state: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--demo", "--state", state.to_str().unwrap()];
    args.extend_from_slice(extra);
    ok(stepstone(&args))
}

fn analyze(state: &Path, metric: &str, out: &Path) {
    ok(stepstone(&[
        "analyze",
        "--state",
        state.to_str().unwrap(),
        "--metric",
        metric,
        "--out",
        out.to_str().unwrap(),
    ]));
}

#[test]
fn demo_run_is_quick_and_records_its_config() {
    let tmp = tempfile::tempdir().unwrap();
    let state = tmp.path().join("run");
    let start = Instant::now();
    let out = demo(&state, &[]);
    assert!(start.elapsed() < Duration::from_secs(60));
    assert!(String::from_utf8_lossy(&out.stdout).contains("archive size"));
    let config = std::fs::read_to_string(state.join("config.toml")).unwrap();
    assert!(config.contains("mode = \"full\""));
}

#[test]
fn bad_mode_exits_two_and_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stepstone(&["run", "--demo", "--mode", "sideways", "--state", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`mode`"));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "mode = \"sideways\"\niterations = 3\n").unwrap();
    let out = stepstone(&["run", "--config", cfg.to_str().unwrap(), "--state", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mode"));
}

#[test]
fn same_seed_gives_the_same_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    demo(&a, &["--seed", "7", "--iterations", "8"]);
    demo(&b, &["--seed", "7", "--iterations", "8"]);
    let manifest = |p: &Path| std::fs::read(p.join("archive").join("manifest.json")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
}

#[test]
fn missing_state_dir_is_a_config_error() {
    let out = stepstone(&["run", "--demo"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.state_dir"));
}

#[test]
fn dot_export_has_one_node_per_agent() {
    let tmp = tempfile::tempdir().unwrap();
    let state = tmp.path().join("run");
    demo(&state, &["--iterations", "4", "--seed", "1"]);
    let (dot, json) = (tmp.path().join("tree.dot"), tmp.path().join("archive.json"));
    analyze(&state, "tree", &dot);
    analyze(&state, "archive", &json);
    let nodes = read_nodes(&json);
    assert_eq!(nodes.len(), 5, "seed 1 compiles every child");
    let dot = std::fs::read_to_string(dot).unwrap();
    assert_eq!(dot.matches("[label=").count(), 5);
    assert_eq!(dot.matches(" -> ").count(), 4);
}

#[test]
fn progress_has_a_row_per_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let state = tmp.path().join("run");
    demo(&state, &["--iterations", "6"]);
    let csv = tmp.path().join("progress.csv");
    analyze(&state, "progress", &csv);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "iteration,best_so_far,avg_compiled,archive_size");
    assert_eq!(text.lines().count() - 1, 7);
    let lineage = std::fs::read_to_string(tmp.path().join("progress_lineage.csv")).unwrap();
    assert!(lineage.lines().nth(1).unwrap().starts_with("0,0"));
}

#[test]
fn resume_of_a_finished_run_is_a_notice() {
    let tmp = tempfile::tempdir().unwrap();
    let state = tmp.path().join("run");
    demo(&state, &["--iterations", "3"]);
    let out = ok(stepstone(&["resume", "--state", state.to_str().unwrap()]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("already complete"));

    let other = tmp.path().join("other.toml");
    let stored = std::fs::read_to_string(state.join("config.toml")).unwrap();
    std::fs::write(&other, stored.replacen("seed = 0", "seed = 99", 1)).unwrap();
    let out = stepstone(&["resume", "--state", state.to_str().unwrap(), "--config", other.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing to resume"));
}

#[test]
fn ci_spans_several_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["analyze".to_string()];
    for seed in 0..3 {
        let state = tmp.path().join(format!("r{seed}"));
        demo(&state, &["--iterations", "4", "--seed", &seed.to_string()]);
        args.extend(["--state".into(), state.to_str().unwrap().to_string()]);
    }
    let out = tmp.path().join("ci.csv");
    args.extend(["--metric", "ci", "--out", out.to_str().unwrap(), "--resamples", "200"].map(String::from));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(stepstone(&refs));
    let text = std::fs::read_to_string(out).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "best-score");
    assert_eq!(row[1], "3");
    let (median, lower, upper): (f64, f64, f64) = (row[5].parse().unwrap(), row[6].parse().unwrap(), row[7].parse().unwrap());
    assert!(lower <= median && median <= upper);
}

struct Node {
    parent: Option<u64>,
    alpha: f64,
}

fn read_nodes(path: &Path) -> BTreeMap<u64, Node> {
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    doc["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| {
            let domains = n["scores"].as_object().unwrap();
            let alpha = domains
                .values()
                .map(|d| d["validation"].as_f64().unwrap_or_else(|| d["train"].as_f64().unwrap()))
                .sum::<f64>()
                / domains.len() as f64;
            let node = Node {
                parent: n["parent_id"].as_u64(),
                alpha,
            };
            (n["id"].as_u64().unwrap(), node)
        })
        .collect()
}

#[test]
fn transfer_matches_recomputation_from_exported_archive() {
    let tmp = tempfile::tempdir().unwrap();
    let state = tmp.path().join("run");
    demo(&state, &["--iterations", "15", "--seed", "3"]);
    let json = tmp.path().join("archive.json");
    let csv = tmp.path().join("transfer.csv");
    analyze(&state, "archive", &json);
    analyze(&state, "transfer", &csv);

    let nodes = read_nodes(&json);
    let gamma: f64 = 0.6;
    let mut best: Option<(u64, f64, usize)> = None;
    for (&i, ni) in &nodes {
        let mut sum = 0.0;
        let mut count = 0;
        for (&j, nj) in &nodes {
            let (mut cur, mut d) = (nj.parent, 1);
            while let Some(p) = cur {
                if p == i {
                    sum += (nj.alpha - ni.alpha) * gamma.powi(d);
                    count += 1;
                    break;
                }
                cur = nodes[&p].parent;
                d += 1;
            }
            let _ = j;
        }
        if count >= 3 {
            let g = sum / count as f64;
            if best.is_none_or(|(_, b, _)| g > b) {
                best = Some((i, g, count));
            }
        }
    }
    let (id, g, count) = best.expect("an eligible node");

    let text = std::fs::read_to_string(csv).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[3].parse::<u64>().unwrap(), id);
    assert!((row[4].parse::<f64>().unwrap() - g).abs() < 1e-12);
    assert_eq!(row[5].parse::<usize>().unwrap(), count);
}
