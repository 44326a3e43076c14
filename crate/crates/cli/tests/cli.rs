use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use incepkit::graph::{count_flops, count_params, BatchNormSpec, GraphSpec, NodeKind};
use incepkit::train::{lr_at, ReportSidecar, RunConfig, RunReport};
use incepkit::zoo::{assemble, build_inception_block, ArchConfig, Grid, Variant};
use incepkit::{tbin, Tensor};
use tempfile::TempDir;

fn incepkit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incepkit"))
        .args(args)
        .current_dir(dir)
        .env_remove("INCEPKIT_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("not killed by a signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Desk-scale IR-v2 on a 20-image task; a few steps take well under a second.
const TINY_RUN: &str = r#"{
  "arch": {"variant": "inception_resnet_v2", "width_multiplier": 0.25, "input_size": [75, 75], "num_classes": 10},
  "train": {"epochs": 2, "batch_size": 8, "ema_decay": 0.5, "seed": 3},
  "data": {"samples_per_class": 2, "seed": 1}
}"#;

fn tiny_run(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, TINY_RUN).unwrap();
    path
}

#[test]
fn build_v4_reports_final_feature_grid() {
    let dir = TempDir::new().unwrap();
    let out = incepkit(&["build", "--arch", "v4", "--out", "v4.json", "--dot", "v4.dot"], dir.path());
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("features=8x8x1536"), "{}", stdout(&out));
    let text = fs::read_to_string(dir.path().join("v4.json")).unwrap();
    let graph = GraphSpec::from_json(&text).unwrap();
    assert_eq!(graph.to_json(), text);
    assert_eq!(graph, assemble(&ArchConfig::new(Variant::InceptionV4)).unwrap());
    assert!(fs::read_to_string(dir.path().join("v4.dot")).unwrap().starts_with("digraph"));
}

#[test]
fn build_scaled_and_infeasible_widths() {
    let dir = TempDir::new().unwrap();
    let out = incepkit(&["build", "--arch", "ir2", "--width", "0.25"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("violations=0"));
    assert_eq!(code(&incepkit(&["build", "--arch", "v4", "--width", "0.001"], dir.path())), 2);
    assert_eq!(code(&incepkit(&["build", "--arch", "v9"], dir.path())), 2);
}

#[test]
fn build_accepts_a_config_file() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("arch.json"), r#"{"variant": "inception_resnet_v1", "num_classes": 10}"#).unwrap();
    let out = incepkit(&["build", "--config", "arch.json", "--out", "g.json"], dir.path());
    assert_eq!(code(&out), 0, "{out:?}");
    let graph = GraphSpec::from_json(&fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(graph.node("logits").map(|n| n.kind.clone()), assemble(&{
        let mut c = ArchConfig::new(Variant::InceptionResNetV1);
        c.num_classes = 10;
        c
    })
    .unwrap()
    .node("logits")
    .map(|n| n.kind.clone()));
    fs::write(dir.path().join("bad.json"), r#"{"variant": "inception_resnet_v1", "colour": 1}"#).unwrap();
    assert_eq!(code(&incepkit(&["build", "--config", "bad.json"], dir.path())), 2);
}

#[test]
fn check_exit_codes() {
    let dir = TempDir::new().unwrap();
    let mut graph = assemble(&ArchConfig::new(Variant::InceptionResNetV1)).unwrap();
    fs::write(dir.path().join("ok.json"), graph.to_json()).unwrap();
    assert_eq!(code(&incepkit(&["check", "ok.json"], dir.path())), 0);

    let relu = graph.nodes.iter_mut().find(|n| n.id == "inception_a_1/relu").unwrap();
    relu.kind = NodeKind::BatchNorm(BatchNormSpec::default());
    fs::write(dir.path().join("bad.json"), graph.to_json()).unwrap();
    let out = incepkit(&["check", "bad.json"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("inception_a_1/relu"), "{}", stdout(&out));

    let text = fs::read_to_string(dir.path().join("ok.json")).unwrap();
    fs::write(dir.path().join("cut.json"), &text[..text.len() / 2]).unwrap();
    assert_eq!(code(&incepkit(&["check", "cut.json"], dir.path())), 2);
    assert_eq!(code(&incepkit(&["check", "missing.json"], dir.path())), 1);
}

#[test]
fn summarize_totals_match_counters() {
    let dir = TempDir::new().unwrap();
    let graph = assemble(&ArchConfig::new(Variant::InceptionV4)).unwrap();
    fs::write(dir.path().join("g.json"), graph.to_json()).unwrap();
    let params = count_params(&graph).unwrap();
    let flops = count_flops(&graph).unwrap();

    let totals = stdout(&incepkit(&["summarize", "g.json"], dir.path()));
    assert_eq!(totals.lines().count(), 1);
    assert!(totals.contains(&format!(" params={} ", params.total)), "{totals}");
    assert!(totals.contains(&format!(" macs={} ", flops.total_macs)), "{totals}");

    let table = stdout(&incepkit(&["summarize", "g.json", "--per-node"], dir.path()));
    assert_eq!(table.lines().last(), totals.lines().last());
    let shape_of = |id: &str| {
        table
            .lines()
            .find(|l| l.split_whitespace().next() == Some(id))
            .and_then(|l| l.split_whitespace().nth(2))
            .map(str::to_string)
    };
    assert_eq!(shape_of("inception_a_4/0_mixed/concat").as_deref(), Some("35x35x384"));
    assert_eq!(shape_of("reduction_a/0_mixed/concat").as_deref(), Some("17x17x1024"));
    assert_eq!(
        table.lines().filter(|l| l.starts_with("reduction_a/")).count(),
        graph.nodes.iter().filter(|n| n.id.starts_with("reduction_a/")).count()
    );
}

#[test]
fn summarize_rejects_uninferable_shapes() {
    let dir = TempDir::new().unwrap();
    let mut graph = assemble(&ArchConfig::new(Variant::InceptionV4)).unwrap();
    graph.input_shape = [1, 20, 20, 3];
    fs::write(dir.path().join("g.json"), graph.to_json()).unwrap();
    let out = incepkit(&["summarize", "g.json"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stem/"));
}

#[test]
fn train_is_reproducible_and_follows_the_schedule() {
    let dir = TempDir::new().unwrap();
    tiny_run(dir.path());
    for out in ["a", "b"] {
        let o = incepkit(&["train", "--config", "run.json", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{o:?}");
    }
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/report.csv"), read("b/report.csv"));
    assert_eq!(read("a/manifest.json"), read("b/manifest.json"));

    let config = RunConfig::from_json(&fs::read_to_string(dir.path().join("a/config.json")).unwrap()).unwrap();
    assert_eq!(config, RunConfig::from_json(TINY_RUN).unwrap());
    let rows = RunReport::parse_csv(&fs::read_to_string(dir.path().join("a/report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.lr, lr_at(r.epoch, &config.train));
    }
    let sidecar: ReportSidecar = serde_json::from_slice(&read("a/report.json")).unwrap();
    assert_eq!(sidecar.steps, 4);
    assert_eq!(sidecar.config, config);
}

#[test]
fn train_exit_codes() {
    let dir = TempDir::new().unwrap();
    let blowup = TINY_RUN.replace(r#""epochs": 2"#, r#""epochs": 2, "base_lr": 1e30"#);
    fs::write(dir.path().join("nan.json"), blowup).unwrap();
    let out = incepkit(&["train", "--config", "nan.json", "--out", "n"], dir.path());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));

    fs::write(dir.path().join("bad.json"), r#"{"arch": {"variant": "v5"}}"#).unwrap();
    assert_eq!(code(&incepkit(&["train", "--config", "bad.json", "--out", "x"], dir.path())), 2);
}

fn parse_top5(line: &str) -> Vec<(usize, f64)> {
    line.split_whitespace()
        .skip(2)
        .take(5)
        .map(|p| {
            let (c, v) = p.split_once(':').unwrap();
            (c.parse().unwrap(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn infer_is_deterministic_and_selects_the_average() {
    let dir = TempDir::new().unwrap();
    tiny_run(dir.path());
    assert_eq!(code(&incepkit(&["train", "--config", "run.json", "--out", "r"], dir.path())), 0);
    let x = Tensor::<f32>::from_fn(&[2, 75, 75, 3], |i| ((i % 17) as f32 - 8.0) / 8.0).unwrap();
    tbin::write_file(dir.path().join("x.tbin"), &x).unwrap();

    let args = ["infer", "r/graph.json", "--weights", "r/manifest.json", "--input", "x.tbin"];
    let raw = incepkit(&args, dir.path());
    assert_eq!(code(&raw), 0, "{raw:?}");
    assert_eq!(stdout(&raw), stdout(&incepkit(&args, dir.path())));
    for line in stdout(&raw).lines() {
        let sum: f64 = line.rsplit_once("sum ").unwrap().1.trim_end_matches(')').parse().unwrap();
        assert!((sum - 1.0).abs() <= 1e-6, "{line}");
        let top = parse_top5(line);
        assert_eq!(top.len(), 5);
        assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    let mut ema_args = args.to_vec();
    ema_args.push("--ema");
    let ema = incepkit(&ema_args, dir.path());
    assert_eq!(code(&ema), 0);
    assert_ne!(stdout(&ema), stdout(&raw));

    let small = Tensor::<f32>::zeros(&[1, 32, 32, 3]).unwrap();
    tbin::write_file(dir.path().join("small.tbin"), &small).unwrap();
    let bad = ["infer", "r/graph.json", "--weights", "r/manifest.json", "--input", "small.tbin"];
    assert_eq!(code(&incepkit(&bad, dir.path())), 2);
}

#[test]
fn gradcheck_exit_codes() {
    let dir = TempDir::new().unwrap();
    let ok = incepkit(&["gradcheck", "--all-ops", "--tolerance", "1e-4"], dir.path());
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("batch_norm"));
    assert_eq!(code(&incepkit(&["gradcheck", "--all-ops", "--inject-fault"], dir.path())), 1);
    let zero = incepkit(&["gradcheck", "--all-ops", "--tolerance", "0"], dir.path());
    assert_eq!(code(&zero), 1);
    assert!(stdout(&zero).contains("FAIL"));
}

#[test]
fn gradcheck_on_a_graph_file() {
    let dir = TempDir::new().unwrap();
    let config = ArchConfig::desk(Variant::InceptionResNetV1);
    let block = build_inception_block(&config, Grid::B17, [1, 3, 3, 224]).unwrap();
    fs::write(dir.path().join("block.json"), block.to_json()).unwrap();
    let args = ["gradcheck", "--graph", "block.json", "--max-coords", "6"];
    let out = incepkit(&args, dir.path());
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("ResidualAdd") || stdout(&out).contains("Conv"));
    let mut faulty = args.to_vec();
    faulty.push("--inject-fault");
    assert_eq!(code(&incepkit(&faulty, dir.path())), 1);
}

#[test]
fn experiments_emit_their_artifacts() {
    let dir = TempDir::new().unwrap();
    tiny_run(dir.path());
    let out = incepkit(
        &["experiment", "residual-vs-plain", "--config", "run.json", "--max-steps", "2", "--threshold", "0.5", "--out", "rvp"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{out:?}");
    let mut csvs: Vec<String> = fs::read_dir(dir.path().join("rvp"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csvs.sort();
    assert_eq!(csvs, ["plain.csv", "residual.csv"]);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("rvp/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["threshold"], 0.5);
    for side in ["plain", "residual"] {
        assert!(summary[side].get("steps_to_threshold").is_some());
    }

    let out = incepkit(
        &["experiment", "scaling-sweep", "--config", "run.json", "--max-steps", "1", "--out", "sweep"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{out:?}");
    let csv = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().split(',').any(|c| c == "dead_network"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn thread_variable_is_validated() {
    let dir = TempDir::new().unwrap();
    let run = |value: &str| {
        Command::new(env!("CARGO_BIN_EXE_incepkit"))
            .args(["build", "--arch", "ir1"])
            .current_dir(dir.path())
            .env("INCEPKIT_THREADS", value)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("1")), 0);
    assert_eq!(code(&run("0")), 0);
    assert_eq!(code(&run("many")), 2);
}
