mod scene;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pvawb::blocks::{build_allcnn_variant, build_detection_heads, build_pvanet_feature_extractor};
use pvawb::cost::{graph_cost, Rounding};
use pvawb::detect::{gen_anchors, rpn_pipeline, ProposalConfig, PVANET_FEAT_STRIDE, PVANET_RATIOS, PVANET_SCALES};
use pvawb::engine::{Tensor, WeightStore};
use pvawb::graph::{infer_shapes, validate, NetworkGraph, TensorShape};
use pvawb::lowrank::{compress_fc, rewrite_fc_layers, Matrix};
use pvawb::rf::{empirical_rf, rf_distribution};
use pvawb::trainer::{evaluate, toy_dataset, toy_net, toy_weights, train, PlateauConfig, ToyBlock, TrainConfig};
use pvawb::verify::{verify, VerifyFixture};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pvawb", version, about = "PVANet workbench: build, verify, analyze, simulate, train and compress")]
struct Cli {
    /// Emit machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoundingArg {
    Table,
    Exact,
}

impl From<RoundingArg> for Rounding {
    fn from(r: RoundingArg) -> Self {
        match r {
            RoundingArg::Table => Rounding::Table,
            RoundingArg::Exact => Rounding::Exact,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a built-in network as graph JSON.
    Build {
        /// pvanet, rpn, classifier, classifier-compressed or allcnn:<original|half|half_crelu|half_mcrelu>
        #[arg(long, default_value = "pvanet")]
        net: String,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Diff the built network's cost table against the structure-table fixture.
    Verify {
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        rounding: RoundingArg,
    },
    /// Parameter and MAC counts per table row.
    Cost {
        graph: PathBuf,
        #[arg(long)]
        input: Option<TensorShape>,
        #[arg(long, value_enum, default_value = "table")]
        rounding: RoundingArg,
    },
    /// Inferred output shape of every node, plus validation diagnostics.
    Shapes {
        graph: PathBuf,
        #[arg(long)]
        input: Option<TensorShape>,
    },
    /// Receptive-field distribution over all input-to-node paths.
    Rf {
        graph: PathBuf,
        /// Defaults to the graph's last node.
        #[arg(long)]
        node: Option<String>,
        #[arg(long)]
        histogram: bool,
        /// Upper bound on the number of enumerated paths.
        #[arg(long, default_value_t = 1_000_000_000_000)]
        path_cap: u128,
        /// Also measure the impulse support at the map center on this input.
        #[arg(long)]
        empirical: Option<TensorShape>,
    },
    /// Train a toy conv net with the plateau scheduler.
    TrainToy {
        #[arg(long, default_value = "crelu")]
        block: ToyBlock,
        #[arg(long, default_value = "8x8x1")]
        input: TensorShape,
        #[arg(long, default_value_t = 4)]
        filters: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 100)]
        patience: usize,
        #[arg(long, default_value_t = 20)]
        window: usize,
        /// Write the per-iteration history as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Run the proposal layer on a synthetic scene or on stored score maps.
    DetectSim {
        #[arg(long, conflicts_with = "maps", required_unless_present = "maps")]
        scene: Option<PathBuf>,
        /// Weight-store file holding `rpn/scores` `[1, 2A, h, w]` and `rpn/deltas` `[1, 4A, h, w]`.
        #[arg(long, requires = "image")]
        maps: Option<PathBuf>,
        /// Image size `HxW` for `--maps`.
        #[arg(long)]
        image: Option<String>,
        #[arg(long, default_value_t = 200)]
        proposals: usize,
    },
    /// Replace fully-connected layers by rank-k factor pairs.
    Compress {
        graph: PathBuf,
        #[arg(long)]
        rank: usize,
        /// Comma-separated FC layer names.
        #[arg(long, default_value = "fc6,fc7", value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(long)]
        input: Option<TensorShape>,
        /// Write the rewritten graph here.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Dense weights to factorize.
        #[arg(long, requires = "weights_out")]
        weights: Option<PathBuf>,
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
}

enum Failure {
    Mismatch,
    BadInput(String),
    Module(pvawb::Error),
}

impl From<pvawb::Error> for Failure {
    fn from(e: pvawb::Error) -> Self {
        Failure::Module(e)
    }
}

type Outcome = Result<(), Failure>;

fn bad(msg: impl std::fmt::Display) -> Failure {
    Failure::BadInput(msg.to_string())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<NetworkGraph, Failure> {
    NetworkGraph::from_json(&read_text(path)?).map_err(|e| bad(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| bad(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn cmd_build(net: &str, out: Option<&Path>) -> Outcome {
    let g = match net {
        "pvanet" => build_pvanet_feature_extractor(),
        "rpn" => build_detection_heads(false).0,
        "classifier" => build_detection_heads(false).1,
        "classifier-compressed" => build_detection_heads(true).1,
        other => match other.strip_prefix("allcnn:") {
            Some(v) => build_allcnn_variant(v.parse().map_err(bad)?),
            None => return Err(bad(format!("unknown network `{other}`"))),
        },
    };
    let mut s = g.to_json()?;
    s.push('\n');
    emit(out, &s)
}

fn cmd_verify(cli: &Cli, fixture: Option<&Path>, rounding: Rounding) -> Outcome {
    let fx = match fixture {
        Some(p) => VerifyFixture::from_json(&read_text(p)?).map_err(|e| bad(format!("{}: {e}", p.display())))?,
        None => VerifyFixture::builtin(),
    };
    let report = verify(&fx, rounding)?;
    if cli.json {
        print_json(&report);
    } else {
        print!("{}", report.render());
    }
    if report.ok() {
        Ok(())
    } else {
        Err(Failure::Mismatch)
    }
}

fn cmd_cost(cli: &Cli, graph: &Path, input: Option<TensorShape>, rounding: Rounding) -> Outcome {
    let g = load_graph(graph)?;
    let r = graph_cost(&g, input.unwrap_or(g.input_shape), rounding)?;
    if cli.json {
        print_json(&r);
    } else {
        print!("{}", r.render_table());
    }
    Ok(())
}

fn cmd_shapes(cli: &Cli, graph: &Path, input: Option<TensorShape>) -> Outcome {
    let g = load_graph(graph)?;
    let diags = validate(&g);
    if !diags.is_empty() {
        if cli.json {
            print_json(&json!({ "diagnostics": diags }));
        } else {
            diags.iter().for_each(|d| println!("{d}"));
        }
        return Err(Failure::Module(pvawb::Error::InvalidGraph(format!("{} diagnostics", diags.len()))));
    }
    let shapes = infer_shapes(&g, input.unwrap_or(g.input_shape))?;
    if cli.json {
        print_json(&json!({ "shapes": shapes, "diagnostics": diags }));
    } else {
        let w = shapes.keys().map(String::len).max().unwrap_or(0);
        for (n, s) in &shapes {
            println!("{n:<w$}  {s}");
        }
    }
    Ok(())
}

fn cmd_rf(
    cli: &Cli,
    graph: &Path,
    node: Option<&str>,
    histogram: bool,
    cap: u128,
    empirical: Option<TensorShape>,
) -> Outcome {
    let g = load_graph(graph)?;
    let node = match node {
        Some(n) => n.to_string(),
        None => g.output().ok_or_else(|| bad("graph has no nodes"))?.to_string(),
    };
    let d = rf_distribution(&g, &node, cap)?;
    let emp = match empirical {
        Some(shape) => {
            let o = infer_shapes(&g, shape)?[node.as_str()];
            Some(empirical_rf(&g, &node, shape, (o.height / 2, o.width / 2))?)
        }
        None => None,
    };
    if cli.json {
        let entries: Vec<_> = d.entries.iter().map(|&(rf, n)| json!({ "rf": rf, "paths": n.to_string() })).collect();
        print_json(&json!({
            "node": node,
            "total_paths": d.total_paths().to_string(),
            "min": d.min(),
            "max": d.max(),
            "mean": d.mean(),
            "entries": entries,
            "empirical": emp,
        }));
        return Ok(());
    }
    println!(
        "{node}: {} paths, {} distinct rf values, min {} max {} mean {:.2}",
        d.total_paths(),
        d.entries.len(),
        d.min().unwrap_or(0),
        d.max().unwrap_or(0),
        d.mean()
    );
    if let Some(e) = emp {
        println!("empirical rf at map center: {e}");
    }
    if histogram {
        print!("{}", d.histogram(50));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_toy(
    cli: &Cli,
    block: ToyBlock,
    input: TensorShape,
    filters: usize,
    samples: usize,
    iterations: usize,
    batch: usize,
    lr: f64,
    patience: usize,
    window: usize,
    history: Option<&Path>,
) -> Outcome {
    let g = toy_net(block, input, filters, 2);
    let data = toy_dataset(samples, input, cli.seed);
    let mut w = toy_weights(&g, cli.seed)?;
    let cfg = TrainConfig {
        batch,
        iterations,
        seed: cli.seed,
        scheduler: PlateauConfig { base_lr: lr, patience, window, ..PlateauConfig::default() },
        ..TrainConfig::default()
    };
    let h = train(&g, &mut w, &data, &cfg)?;
    let (loss, acc) = evaluate(&g, &w, &data, &cfg.output, pvawb::engine::Mode::Inference)?;
    if let Some(p) = history {
        let mut out = csv::Writer::from_path(p).map_err(|e| bad(format!("{}: {e}", p.display())))?;
        for r in &h.records {
            out.serialize(r).map_err(|e| bad(format!("{}: {e}", p.display())))?;
        }
        out.flush().map_err(|e| bad(format!("{}: {e}", p.display())))?;
    }
    let decays = h.records.last().map(|r| r.decay_events).unwrap_or(0);
    if cli.json {
        print_json(&json!({
            "block": block,
            "iterations": h.records.len(),
            "terminated": h.terminated,
            "decay_events": decays,
            "first_loss": h.first_loss(),
            "last_loss": h.last_loss(),
            "train_loss": loss,
            "train_accuracy": acc,
        }));
    } else {
        println!(
            "{block:?}: {} iterations, {decays} lr decays{}, batch loss {:.4} -> {:.4}, train loss {loss:.4}, accuracy {acc:.3}",
            h.records.len(),
            if h.terminated { " (terminated)" } else { "" },
            h.first_loss().unwrap_or(f64::NAN),
            h.last_loss().unwrap_or(f64::NAN),
        );
    }
    Ok(())
}

fn parse_image(s: &str) -> Result<(f64, f64), Failure> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| bad(format!("expected HxW, got `{s}`")))?;
    let p = |v: &str| v.parse::<f64>().ok().filter(|x| *x > 0.0).ok_or_else(|| bad(format!("bad image size `{s}`")));
    Ok((p(h)?, p(w)?))
}

fn cmd_detect_sim(
    cli: &Cli,
    scene: Option<&Path>,
    maps: Option<&Path>,
    image: Option<&str>,
    proposals: usize,
) -> Outcome {
    let (scores, deltas, anchors, img) = match (scene, maps) {
        (Some(p), None) => {
            let s: scene::Scene =
                serde_json::from_str(&read_text(p)?).map_err(|e| bad(format!("{}: {e}", p.display())))?;
            let m = s.render(cli.seed)?;
            (m.scores, m.deltas, m.anchors, s.image)
        }
        (None, Some(p)) => {
            let store = WeightStore::load(p).map_err(|e| bad(format!("{}: {e}", p.display())))?;
            let get = |k: &str| -> Result<Tensor, Failure> {
                store.get("rpn", k).cloned().ok_or_else(|| bad(format!("{}: missing tensor rpn/{k}", p.display())))
            };
            let (scores, deltas) = (get("scores")?, get("deltas")?);
            let [_, _, h, w] = scores.shape();
            let anchors = gen_anchors(&PVANET_SCALES, &PVANET_RATIOS, PVANET_FEAT_STRIDE, (h, w));
            (scores, deltas, anchors, parse_image(image.unwrap_or_default())?)
        }
        _ => return Err(bad("give exactly one of --scene or --maps")),
    };
    let cfg = ProposalConfig { post_nms_top_n: proposals, ..ProposalConfig::default() };
    let dets = rpn_pipeline(&scores, &deltas, &anchors, img, &cfg)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for d in &dets {
        let _ = writeln!(out, "{}", d.to_json_line());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_compress(
    cli: &Cli,
    graph: &Path,
    rank: usize,
    layers: &[String],
    input: Option<TensorShape>,
    out: Option<&Path>,
    weights: Option<&Path>,
    weights_out: Option<&Path>,
) -> Outcome {
    let g = load_graph(graph)?;
    let targets: Vec<&str> = layers.iter().map(String::as_str).collect();
    let rw = rewrite_fc_layers(&g, &targets, rank)?;
    let shape = input.unwrap_or(g.input_shape);
    let before = graph_cost(&g, shape, Rounding::Exact)?.totals;
    let after = graph_cost(&rw.graph, shape, Rounding::Exact)?.totals;

    let mut errors = Vec::new();
    if let Some(src) = weights {
        let dense = WeightStore::load(src).map_err(|e| bad(format!("{}: {e}", src.display())))?;
        let mut store = WeightStore::new();
        for (node, param, t) in dense.iter() {
            if !targets.contains(&node) {
                store.insert(node, param, t.clone());
            }
        }
        for t in &targets {
            let wt = dense.require(t, "weight").map_err(bad)?;
            let [m, n, _, _] = wt.shape();
            let bias = dense.require(t, "bias").map_err(bad)?.data().to_vec();
            let mat = Matrix::from_vec(m, n, wt.data().to_vec())?;
            let f = compress_fc(&mat, &bias, rank)?;
            errors.push(json!({ "layer": t, "frobenius_error": f.dense().sub(&mat).frobenius() }));
            store.insert_factorized(t, &f);
        }
        let dst = weights_out.expect("clap enforces --weights-out");
        store.save(dst).map_err(|e| bad(format!("{}: {e}", dst.display())))?;
    }
    if let Some(p) = out {
        emit(Some(p), &(rw.graph.to_json()? + "\n"))?;
    }
    if cli.json {
        print_json(&json!({
            "rank": rank,
            "layers": targets,
            "macs_before": before.macs,
            "macs_after": after.macs,
            "params_before": before.params,
            "params_after": after.params,
            "warnings": rw.warnings,
            "reconstruction": errors,
        }));
    } else {
        println!(
            "rank {rank} on {}: MAC {} -> {}, params {} -> {}",
            targets.join(","),
            before.macs,
            after.macs,
            before.params,
            after.params
        );
        for w in &rw.warnings {
            println!("warning: {w}");
        }
        for e in &errors {
            println!(
                "{}: reconstruction error {:.6e}",
                e["layer"].as_str().unwrap_or(""),
                e["frobenius_error"].as_f64().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    match &cli.cmd {
        Cmd::Build { net, out } => cmd_build(net, out.as_deref()),
        Cmd::Verify { fixture, rounding } => cmd_verify(cli, fixture.as_deref(), (*rounding).into()),
        Cmd::Cost { graph, input, rounding } => cmd_cost(cli, graph, *input, (*rounding).into()),
        Cmd::Shapes { graph, input } => cmd_shapes(cli, graph, *input),
        Cmd::Rf { graph, node, histogram, path_cap, empirical } => {
            cmd_rf(cli, graph, node.as_deref(), *histogram, *path_cap, *empirical)
        }
        Cmd::TrainToy { block, input, filters, samples, iterations, batch, lr, patience, window, history } => {
            cmd_train_toy(
                cli,
                *block,
                *input,
                *filters,
                *samples,
                *iterations,
                *batch,
                *lr,
                *patience,
                *window,
                history.as_deref(),
            )
        }
        Cmd::DetectSim { scene, maps, image, proposals } => {
            cmd_detect_sim(cli, scene.as_deref(), maps.as_deref(), image.as_deref(), *proposals)
        }
        Cmd::Compress { graph, rank, layers, input, out, weights, weights_out } => {
            cmd_compress(cli, graph, *rank, layers, *input, out.as_deref(), weights.as_deref(), weights_out.as_deref())
        }
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("PVAWB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("PVAWB_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Mismatch) => ExitCode::from(1),
        Err(Failure::BadInput(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Module(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
