//! `incepkit`: build, inspect, run and train Inception networks.
//!
//! Exit codes: 0 success, 1 violation or I/O failure, 2 bad input,
//! 3 numeric failure (non-finite loss).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use incepkit::gradcheck::{graph_suite, op_suite, worst_by_op, GradCheck};
use incepkit::graph::{
    count_flops, count_params, depth, export_dot, infer_shapes, validate, GraphSpec, Network, NodeKind, Ruleset,
};
use incepkit::ops::Mode;
use incepkit::params::{ema_manifest_path, load_checkpoint, param_manifest};
use incepkit::tbin;
use incepkit::train::experiment::{residual_vs_plain, scaling_sweep};
use incepkit::train::{run, write_run, RunConfig, TrainError};
use incepkit::zoo::{assemble, ArchConfig, Variant, ZooError};

#[derive(Debug, Parser)]
#[command(name = "incepkit", version, about = "Inception-v4 / Inception-ResNet toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assemble an architecture and write its graph JSON.
    Build(BuildArgs),
    /// Validate a graph JSON; exit 1 if any rule is violated.
    Check { graph: PathBuf },
    /// Print shapes, parameters and MACs.
    Summarize {
        graph: PathBuf,
        /// One row per node before the totals.
        #[arg(long)]
        per_node: bool,
    },
    /// Run a trained network on a TBIN input and print the top-5 classes.
    Infer(InferArgs),
    /// Train from a run config JSON.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks (float64).
    Gradcheck(GradcheckArgs),
    /// Desk-scale experiments.
    Experiment {
        #[command(subcommand)]
        which: Experiment,
    },
}

#[derive(Debug, Args)]
struct BuildArgs {
    /// v4, ir1 or ir2. Optional when --config names the variant.
    #[arg(long)]
    arch: Option<Variant>,
    /// Architecture config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    width: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dot: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    graph: PathBuf,
    /// Checkpoint manifest written by `train`.
    #[arg(long)]
    weights: PathBuf,
    /// `[N, H, W, C]` or `[H, W, C]` TBIN tensor.
    #[arg(long)]
    input: PathBuf,
    /// Use the parameter average instead of the raw weights.
    #[arg(long)]
    ema: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, conflicts_with = "all_ops", required_unless_present = "all_ops")]
    graph: Option<PathBuf>,
    #[arg(long)]
    all_ops: bool,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Sampled coordinates per tensor for --graph (all when omitted).
    #[arg(long)]
    max_coords: Option<usize>,
    /// Corrupts one analytic gradient coordinate; exercises the failure path.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    out: PathBuf,
    /// Run config JSON replacing the desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Caps every run at this many steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Experiment {
    /// Pure Inception-v4 layout versus its residualized twin.
    ResidualVsPlain {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Batch top-1 error that counts as "trained".
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
        /// Rows in the trailing mean compared against the threshold.
        #[arg(long, default_value_t = 10)]
        window: usize,
    },
    /// Residual variants at several residual scales and widths.
    ScalingSweep {
        #[command(flatten)]
        common: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.3, 0.1])]
        scales: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5])]
        widths: Vec<f64>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn violation(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn bad_input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFinite { .. } => 3,
            TrainError::Io(_) => 1,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::violation(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::violation(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::violation(format!("{}: {e}", path.display())))
}

fn read_graph(path: &Path) -> Result<GraphSpec, Failure> {
    GraphSpec::from_json(&read_text(path)?).map_err(|e| Failure::bad_input(format!("{}: {e}", path.display())))
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Shape of the tensor entering the global average pool, if there is one.
fn feature_shape(graph: &GraphSpec) -> Option<[usize; 4]> {
    let shapes = infer_shapes(graph).ok()?;
    let pool = graph
        .nodes
        .iter()
        .find(|n| matches!(n.kind, NodeKind::GlobalAvgPool))?;
    shapes.get(pool.inputs.first()?).copied()
}

fn cmd_build(args: BuildArgs) -> CmdResult {
    let mut config = match (&args.config, args.arch) {
        (Some(path), arch) => {
            let mut c = ArchConfig::from_json(&read_text(path)?).map_err(|e| Failure::bad_input(e.to_string()))?;
            if let Some(v) = arch {
                c.variant = v;
            }
            c
        }
        (None, Some(v)) => ArchConfig::new(v),
        (None, None) => return Err(Failure::bad_input("either --arch or --config is required")),
    };
    if let Some(w) = args.width {
        config.width_multiplier = w;
    }
    if let Some(k) = args.classes {
        config.num_classes = k;
    }
    let graph = assemble(&config).map_err(|e| match e {
        ZooError::Definition(_) => Failure::violation(e.to_string()),
        _ => Failure::bad_input(e.to_string()),
    })?;
    let params = count_params(&graph).map_err(|e| Failure::violation(e.to_string()))?;
    let flops = count_flops(&graph).map_err(|e| Failure::violation(e.to_string()))?;
    let d = depth(&graph).map_err(|e| Failure::violation(e.to_string()))?;
    let violations = validate(&graph, Ruleset::InceptionResNet);
    if let Some(out) = &args.out {
        write_text(out, &graph.to_json())?;
    }
    if let Some(dot) = &args.dot {
        let shapes = infer_shapes(&graph).map_err(|e| Failure::violation(e.to_string()))?;
        write_text(dot, &export_dot(&graph, Some(&shapes)))?;
    }
    println!(
        "{} width={} classes={}: params={} macs={} depth={} features={} violations={}",
        config.variant,
        config.width_multiplier,
        config.num_classes,
        params.total,
        flops.total_macs,
        d,
        feature_shape(&graph).map_or_else(|| "-".into(), |s| shape_str(&s[1..])),
        violations.len()
    );
    if violations.is_empty() {
        Ok(())
    } else {
        for v in &violations {
            println!("violation: {v}");
        }
        Err(Failure::violation(format!("{} violations", violations.len())))
    }
}

fn cmd_check(path: &Path) -> CmdResult {
    let graph = read_graph(path)?;
    let violations = validate(&graph, Ruleset::InceptionResNet);
    for v in &violations {
        println!("{v}");
    }
    if violations.is_empty() {
        println!("ok: {} nodes, no violations", graph.nodes.len());
        Ok(())
    } else {
        Err(Failure::violation(format!("{} violations", violations.len())))
    }
}

fn cmd_summarize(path: &Path, per_node: bool) -> CmdResult {
    let graph = read_graph(path)?;
    let bad = |e: incepkit::graph::ShapeError| Failure::bad_input(format!("shape inference failed: {e}"));
    let shapes = infer_shapes(&graph).map_err(bad)?;
    let params = count_params(&graph).map_err(bad)?;
    let flops = count_flops(&graph).map_err(bad)?;
    if per_node {
        let node_params: std::collections::HashMap<&str, u64> = params
            .per_node
            .iter()
            .map(|p| (p.id.as_str(), p.trainable + p.non_trainable))
            .collect();
        println!("{:<48} {:<16} {:<16} {:>12} {:>14}", "node", "kind", "shape", "params", "macs");
        for (n, f) in graph.nodes.iter().zip(&flops.per_node) {
            println!(
                "{:<48} {:<16} {:<16} {:>12} {:>14}",
                n.id,
                n.kind.name(),
                shape_str(&shapes[&n.id][1..]),
                node_params.get(n.id.as_str()).copied().unwrap_or(0),
                f.macs
            );
        }
    }
    println!(
        "total: nodes={} params={} non_trainable={} macs={} elementwise={} depth={}",
        graph.nodes.len(),
        params.total,
        params.non_trainable,
        flops.total_macs,
        flops.total_elementwise,
        depth(&graph).map_err(bad)?
    );
    Ok(())
}

fn cmd_infer(args: InferArgs) -> CmdResult {
    let graph = read_graph(&args.graph)?;
    let net = Network::new(graph.clone()).map_err(|e| Failure::bad_input(e.to_string()))?;
    let manifest = if args.ema { ema_manifest_path(&args.weights) } else { args.weights.clone() };
    let params = load_checkpoint::<f64>(&manifest).map_err(|e| Failure::bad_input(e.to_string()))?;
    params
        .check_manifest(&param_manifest(&graph, net.shapes()))
        .map_err(|e| Failure::bad_input(e.to_string()))?;
    let mut x: incepkit::Tensor<f64> = tbin::read_file(&args.input)
        .map_err(|e| Failure::bad_input(format!("{}: {e}", args.input.display())))?
        .into_tensor();
    if x.dims().len() == 3 {
        let d = x.dims().to_vec();
        x = x
            .reshape(&[1, d[0], d[1], d[2]])
            .map_err(|e| Failure::bad_input(e.to_string()))?;
    }
    let probs = net
        .forward(&params, &x, Mode::Infer, 0)
        .map_err(|e| Failure::bad_input(e.to_string()))?
        .into_output();
    let classes = probs.dims()[3];
    for (i, row) in probs.data().chunks(classes).enumerate() {
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let top: Vec<String> = order.iter().take(5).map(|&c| format!("{c}:{:.6}", row[c])).collect();
        println!("sample {i}: {} (sum {:.9})", top.join(" "), row.iter().sum::<f64>());
    }
    Ok(())
}

fn cmd_train(config: &Path, out: &Path) -> CmdResult {
    let config = RunConfig::from_json(&read_text(config)?)?;
    let (graph, output) = run(&config)?;
    write_run(out, &config, &graph, &output)?;
    let report = output.report();
    println!(
        "steps={} final_loss={} top1_error={} ema_top1_error={} dead_network={} -> {}",
        report.rows.len(),
        report.final_loss().map_or_else(|| "-".into(), |l| format!("{l:.6}")),
        report.final_eval.top1_error,
        report.ema_eval.top1_error,
        report.dead_network,
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    let checks: Vec<GradCheck> = match &args.graph {
        Some(path) => {
            let graph = read_graph(path)?;
            graph_suite(&graph, args.seed, args.batch, args.max_coords, args.inject_fault)
                .map_err(|e| Failure::bad_input(e.to_string()))?
        }
        None => op_suite(args.seed, args.inject_fault).map_err(|e| Failure::bad_input(e.to_string()))?,
    };
    for (op, c) in worst_by_op(&checks) {
        println!(
            "{op:<28} worst rel err {:.3e} ({} at {}: analytic {:.6e}, numeric {:.6e})",
            c.worst_rel_err, c.target, c.coord, c.analytic, c.numeric
        );
    }
    let failed: Vec<&GradCheck> = checks.iter().filter(|c| !c.passes(args.tolerance)).collect();
    for c in &failed {
        println!(
            "FAIL {} {} coord {}: rel err {:.3e} > {:.1e} (analytic {:.6e}, numeric {:.6e})",
            c.op, c.target, c.coord, c.worst_rel_err, args.tolerance, c.analytic, c.numeric
        );
    }
    if failed.is_empty() {
        println!("ok: {} checks within {:.1e}", checks.len(), args.tolerance);
        Ok(())
    } else {
        Err(Failure::violation(format!("{} of {} checks failed", failed.len(), checks.len())))
    }
}

fn experiment_base(common: &ExperimentArgs, variant: Variant) -> Result<RunConfig, Failure> {
    let mut base = match &common.config {
        Some(path) => RunConfig::from_json(&read_text(path)?)?,
        None => RunConfig::desk(variant),
    };
    if common.max_steps.is_some() {
        base.train.max_steps = common.max_steps;
    }
    Ok(base)
}

fn cmd_experiment(which: Experiment) -> CmdResult {
    match which {
        Experiment::ResidualVsPlain { common, threshold, window } => {
            let base = experiment_base(&common, Variant::InceptionV4)?;
            let s = residual_vs_plain(&base, threshold, window, &common.out)?;
            let fmt = |v: Option<usize>| v.map_or_else(|| "not reached".into(), |v| v.to_string());
            println!(
                "steps to {} top-1 error: plain {}, residual {}; faster: {}",
                threshold,
                fmt(s.plain.steps_to_threshold),
                fmt(s.residual.steps_to_threshold),
                s.faster
            );
        }
        Experiment::ScalingSweep { common, scales, widths } => {
            let base = experiment_base(&common, Variant::InceptionResNetV2)?;
            for r in scaling_sweep(&base, &scales, &widths, &common.out)? {
                println!(
                    "scale {} width {}: dead_network={} final_loss={} {}",
                    r.residual_scale,
                    r.width,
                    r.dead_network,
                    r.final_loss.map_or_else(|| "-".into(), |l| format!("{l:.6}")),
                    r.status
                );
            }
        }
    }
    Ok(())
}

fn configure_threads() -> CmdResult {
    let Ok(value) = std::env::var("INCEPKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Failure::bad_input(format!("INCEPKIT_THREADS must be a non-negative integer, got `{value}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::violation(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Build(args) => cmd_build(args),
        Command::Check { graph } => cmd_check(&graph),
        Command::Summarize { graph, per_node } => cmd_summarize(&graph, per_node),
        Command::Infer(args) => cmd_infer(args),
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Experiment { which } => cmd_experiment(which),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
