use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use lift_core::image::LabelMap;
use lift_core::io::{write_pgm16, CHECKPOINT_MAGIC};
use serde_json::Value;

const SUBCOMMANDS: [&str; 8] = [
    "gen-scene",
    "train",
    "cluster",
    "render-labels",
    "eval",
    "track",
    "bench-loss",
    "dump-embeddings",
];

fn lift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lift"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = lift(args);
    assert!(
        o.status.success(),
        "lift {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path and bytes of every file under `root`, sorted.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_scene(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("scene{seed}"));
    ok(&[
        "gen-scene", "--objects", "3", "--seed", seed, "--views", "4", "--width", "20", "--height", "16",
        "--out", s(&out),
    ]);
    out
}

#[test]
fn help_lists_every_default() {
    for cmd in SUBCOMMANDS {
        let help = ok(&[cmd, "--help"]);
        let usage = help.lines().find(|l| l.starts_with("Usage:")).unwrap().to_string();
        let options = &help[help.find("Options:").unwrap()..];
        // one block per flag, including wrapped description lines
        let mut blocks: Vec<String> = Vec::new();
        for line in options.lines().skip(1) {
            let t = line.trim_start();
            if t.starts_with('-') {
                blocks.push(t.to_string());
            } else if let Some(b) = blocks.last_mut() {
                b.push(' ');
                b.push_str(t);
            }
        }
        for b in blocks.iter().filter(|b| !b.starts_with("-h, --help")) {
            let flag = b.split_whitespace().next().unwrap();
            let required = usage.contains(&format!("{flag} <"));
            assert!(
                required || b.contains("[default:"),
                "`{cmd} --help` gives no default for {flag}: {b}"
            );
        }
    }
}

#[test]
fn gen_scene_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = tree(&small_scene(dir.path(), "5"));
    let b = {
        let again = dir.path().join("again");
        ok(&[
            "gen-scene", "--objects", "3", "--seed", "5", "--views", "4", "--width", "20", "--height", "16",
            "--out", s(&again),
        ]);
        tree(&again)
    };
    assert!(a.len() > 10);
    assert_eq!(a, b);
    assert_ne!(a, tree(&small_scene(dir.path(), "6")));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path(), "1");
    let report = dir.path().join("r.json");
    ok(&["eval", "--pred", s(&scene), "--gt", s(&scene), "--report", s(&report)]);
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["pq_scene"]["pq"], 1.0);
    assert_eq!(r["pq_frame"], 1.0);
    assert_eq!(r["miou"], 1.0);
}

#[test]
fn bench_loss_assignment_cost_grows_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("bench.csv");
    ok(&["bench-loss", "--labels", "5,25,100,500", "--batch", "1024", "--repeats", "3", "--out", s(&csv_path)]);
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    let h = r.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|x| x == name).unwrap();
    let (k, la) = (col("k"), col("linassign_s"));
    let rows: Vec<(usize, f64)> = r
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[k].parse().unwrap(), rec[la].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [5, 25, 100, 500]);
    assert!(rows.windows(2).all(|w| w[1].1 > w[0].1), "not increasing: {rows:?}");
}

#[test]
fn unknown_config_key_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path(), "2");
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"iterations": 5, "iteratons": 7}"#).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = lift(&["train", "--data", s(&scene), "--config", s(&cfg), "--out", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("unknown config key `iteratons`"), "{err}");
    let left: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left.len(), 2, "{left:?}");
}

#[test]
fn failing_command_removes_what_it_wrote() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let map = LabelMap::from_vec(2, 2, vec![1, 1, 2, 2]).unwrap();
    write_pgm16(&pred.join("instance/0000.pgm"), &map).unwrap();
    // semantic classes above 255 cannot be written as 8-bit maps
    let classes = LabelMap::from_vec(2, 2, vec![300; 4]).unwrap();
    write_pgm16(&pred.join("semantic/0000.pgm"), &classes).unwrap();
    let out = dir.path().join("tracked");
    let o = lift(&["track", "--method", "iou", "--pred", s(&pred), "--data", s(&pred), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(String::from_utf8(o.stderr).unwrap().lines().count(), 1);
    assert!(!out.exists(), "partial output left behind");
}

#[test]
fn pipeline_smoke_runs_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let start = Instant::now();
    ok(&["gen-scene", "--objects", "4", "--seed", "0", "--out", s(&p("data"))]);
    let trained = ok(&["train", "--data", s(&p("data")), "--iterations", "500", "--out", s(&p("m.ckpt"))]);
    assert!(trained.contains("trained 500 iterations"), "{trained}");
    ok(&["cluster", "--ckpt", s(&p("m.ckpt")), "--data", s(&p("data")), "--out", s(&p("cache.json"))]);
    ok(&[
        "render-labels", "--ckpt", s(&p("m.ckpt")), "--cache", s(&p("cache.json")), "--data", s(&p("data")),
        "--out", s(&p("pred")),
    ]);
    ok(&["eval", "--pred", s(&p("pred")), "--gt", s(&p("data")), "--report", s(&p("r.json"))]);
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(300), "smoke pipeline took {elapsed:?}");
    let r: Value = serde_json::from_slice(&fs::read(p("r.json")).unwrap()).unwrap();
    let pq = r["pq_scene"]["pq"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pq));
    assert!(r["psnr"].as_f64().unwrap() > 10.0);
    assert_eq!(&fs::read(p("m.ckpt")).unwrap()[..8], CHECKPOINT_MAGIC);
    for side in [".config.json", ".train.json", ".log.csv"] {
        assert!(p(&format!("m.ckpt{side}")).is_file(), "missing {side}");
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene(dir.path(), "3");
    let run = |threads: &str| {
        let ckpt = dir.path().join(format!("t{threads}.ckpt"));
        let cache = dir.path().join(format!("t{threads}.json"));
        ok(&["--threads", threads, "train", "--data", s(&scene), "--iterations", "40", "--out", s(&ckpt)]);
        ok(&[
            "--threads", threads, "cluster", "--ckpt", s(&ckpt), "--data", s(&scene), "--min-cluster-size", "5",
            "--out", s(&cache),
        ]);
        (fs::read(&ckpt).unwrap(), fs::read(&cache).unwrap())
    };
    assert_eq!(run("1"), run("3"));
}
