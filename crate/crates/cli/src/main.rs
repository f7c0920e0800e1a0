mod data;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bronchus_core::ahr::{optimize_logits_demo_with, LevelCoupling};
use bronchus_core::brongraph::{augment_copies, AugmentParams, BronchialGraph};
use bronchus_core::io::{self, read_mask};
use bronchus_core::metrics::classification_metrics;
use bronchus_core::pipeline::case_graph;
use bronchus_core::pvgnn::{history_jsonl, predict, train, GraphInput, PvgnnParams, TrainConfig};
use bronchus_core::skeleton::{
    classify_points, extract_segments_with, skeletonize, SegmentOptions,
};
use bronchus_core::synthgen::{
    generate_case, generate_dataset, read_case, write_case, SynthParams,
};
use bronchus_core::volgrid::{main_trachea, otsu_threshold};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use data::{Part, SplitManifest, MANIFEST};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl From<bronchus_core::Error> for CliError {
    fn from(e: bronchus_core::Error) -> Self {
        match e {
            bronchus_core::Error::Config(msg) => CliError::Usage(format!("config error: {msg}")),
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "bronchus",
    version,
    about = "Airway tree segmentation and branch classification toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Coupling {
    Independent,
    SharedPool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic cases and a train/test split manifest.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Edge length of each cubic volume.
        #[arg(long, default_value_t = 64)]
        volume: usize,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = 3.0)]
        root_radius: f64,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        /// Chain samples per node for graphs built from these cases.
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Fit free logits to a case mask under the hard-region-aware loss.
    Segdemo {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
        #[arg(long, value_enum, default_value = "independent")]
        coupling: Coupling,
        #[arg(long)]
        out: PathBuf,
    },
    /// Thin a mask and split the centerline into segments.
    Skeletonize {
        /// Mask header (`.json` next to its `.raw` payload).
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 0)]
        min_segment_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the labelled segment graph of a case.
    BuildGraph {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write spatially augmented copies of a graph.
    Augment {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 99)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training part of a dataset.
    Train {
        /// `synth` output directory, or a directory of graph JSON files.
        #[arg(long)]
        data: PathBuf,
        /// `key = value` training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch history (JSON lines); defaults to `<out>.history.jsonl`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a model on the test part of a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict node classes for one graph.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> CliResult {
    Ok(io::write_json(path, value)?)
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn synth(
    n: usize,
    seed: u64,
    out: &Path,
    params: SynthParams,
    train_fraction: f64,
    k: usize,
) -> CliResult {
    params
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let split =
        generate_dataset(n, seed, train_fraction).map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(out)?;
    let mut all: Vec<_> = split.train.iter().chain(&split.test).copied().collect();
    all.sort_by_key(|s| s.id);
    for spec in &all {
        let case = generate_case(spec.seed, &params)?;
        write_case(&case, &out.join(spec.name()))?;
    }
    let manifest = SplitManifest {
        master_seed: split.master_seed,
        k,
        params,
        train: split.train,
        test: split.test,
    };
    write_pretty(&out.join(MANIFEST), &manifest)?;
    eprintln!(
        "wrote {n} cases ({} train, {} test) to {}",
        manifest.train.len(),
        manifest.test.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DemoReport {
    levels: usize,
    steps: usize,
    lr: f64,
    coupling: LevelCoupling,
    final_dice: f64,
    total_loss: f64,
    dice_loss_full: f64,
    hr_terms: Vec<f64>,
    dice_trajectory: Vec<f64>,
}

fn segdemo(
    case_dir: &Path,
    levels: usize,
    steps: usize,
    lr: f64,
    coupling: Coupling,
    out: &Path,
) -> CliResult {
    let case = read_case(case_dir)?;
    let (_, air) = otsu_threshold(&case.ct)?;
    let trachea = main_trachea(&air)?;
    let coupling = match coupling {
        Coupling::Independent => LevelCoupling::Independent,
        Coupling::SharedPool => LevelCoupling::SharedPool,
    };
    let outcome = optimize_logits_demo_with(&case.gt_mask, &trachea, levels, steps, lr, coupling)?;
    let report = DemoReport {
        levels,
        steps,
        lr,
        coupling,
        final_dice: *outcome.dice_trajectory.last().expect("steps >= 1"),
        total_loss: outcome.final_report.total,
        dice_loss_full: outcome.final_report.dice_full,
        hr_terms: outcome.final_report.hr_terms,
        dice_trajectory: outcome.dice_trajectory,
    };
    write_pretty(out, &report)
}

fn skeleton_stage(mask_path: &Path, min_segment_len: usize, out: &Path) -> CliResult {
    let mask = read_mask(mask_path)?;
    let skel = skeletonize(&mask)?;
    let classes = classify_points(&skel);
    let segments = extract_segments_with(&skel, &classes, SegmentOptions { min_segment_len });
    let points: Vec<_> = classes
        .points
        .iter()
        .map(|c| json!({ "voxel": c.voxel, "kind": c.kind, "neighbors": c.neighbors }))
        .collect();
    let stage = json!({
        "dims": mask.dims().as_array(),
        "points": points,
        "degenerate": classes.degenerate(),
        "segments": segments.segments,
        "junctions": segments.junctions,
        "adjacency": segments.adjacency,
    });
    write_pretty(out, &stage)
}

fn load_model(path: &Path) -> Result<PvgnnParams, CliError> {
    Ok(PvgnnParams::load(path)?)
}

fn inputs(
    graphs: &[BronchialGraph],
    params_mode: bronchus_core::pvgnn::FeatureMode,
) -> Result<Vec<GraphInput>, CliError> {
    graphs
        .iter()
        .map(|g| GraphInput::from_graph(g, params_mode).map_err(CliError::from))
        .collect()
}

fn require_labels(ds: &data::Dataset) -> CliResult {
    for (name, g) in ds.names.iter().zip(&ds.graphs) {
        if g.labels().is_none() {
            return Err(CliError::Data(format!("graph {name} has unlabelled nodes")));
        }
    }
    Ok(())
}

fn train_cmd(
    data_dir: &Path,
    config: Option<&Path>,
    out: &Path,
    history: Option<&Path>,
) -> CliResult {
    let config = match config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    config.validate()?;
    let train_ds = data::load(data_dir, Part::Train)?;
    require_labels(&train_ds)?;
    let val_ds = if data_dir.join(MANIFEST).is_file() {
        Some(data::load(data_dir, Part::Test)?)
    } else {
        None
    };
    let train_set = inputs(&train_ds.graphs, config.feature_mode)?;
    let val_set = match &val_ds {
        Some(ds) => {
            require_labels(ds)?;
            inputs(&ds.graphs, config.feature_mode)?
        }
        None => Vec::new(),
    };
    let (params, hist) = train(&train_set, &val_set, &config)?;
    params.save(out)?;
    let history_path = history.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".history.jsonl");
        out.with_file_name(name)
    });
    write_text(&history_path, &history_jsonl(&hist)?)?;
    if let Some(last) = hist.last() {
        eprintln!(
            "epoch {} train loss {:.4} val acc {:?}",
            last.epoch, last.train_loss, last.val_acc
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    dice: Option<f64>,
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    n_nodes: usize,
    n_graphs: usize,
}

fn eval_cmd(model: &Path, data_dir: &Path, out: &Path) -> CliResult {
    let params = load_model(model)?;
    let ds = data::load(data_dir, Part::Test)?;
    require_labels(&ds)?;
    let graphs = inputs(&ds.graphs, params.shape.feature_mode)?;
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for g in &graphs {
        pred.extend(predict(g, &params)?.0);
        gt.extend_from_slice(g.labels.as_deref().expect("checked above"));
    }
    let scores = classification_metrics(&pred, &gt, params.shape.classes)?;
    let report = MetricsReport {
        dice: None,
        accuracy: scores.accuracy,
        precision: scores.precision,
        recall: scores.recall,
        f1: scores.f1,
        n_nodes: gt.len(),
        n_graphs: graphs.len(),
    };
    write_pretty(out, &report)
}

fn infer_cmd(model: &Path, graph: &Path, out: &Path) -> CliResult {
    let params = load_model(model)?;
    let g = BronchialGraph::read(graph)?;
    let input = GraphInput::from_graph(&g, params.shape.feature_mode)?;
    let (labels, _) = predict(&input, &params)?;
    write_pretty(out, &json!({ "labels": labels }))
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth {
            n,
            seed,
            out,
            volume,
            depth,
            root_radius,
            train_fraction,
            k,
        } => {
            let params = SynthParams {
                volume,
                depth,
                root_radius,
                ..Default::default()
            };
            synth(n, seed, &out, params, train_fraction, k)
        }
        Command::Segdemo {
            case,
            levels,
            steps,
            lr,
            coupling,
            out,
        } => segdemo(&case, levels, steps, lr, coupling, &out),
        Command::Skeletonize {
            mask,
            min_segment_len,
            out,
        } => skeleton_stage(&mask, min_segment_len, &out),
        Command::BuildGraph { case, k, out } => {
            let c = read_case(&case)?;
            Ok(case_graph(&c, k, SegmentOptions::default())?.write(&out)?)
        }
        Command::Augment {
            graph,
            n,
            seed,
            out,
        } => {
            let g = BronchialGraph::read(&graph)?;
            create_dir(&out)?;
            for (i, copy) in augment_copies(&g, n, seed, &AugmentParams::default())?
                .iter()
                .enumerate()
            {
                copy.write(&out.join(format!("aug_{i:04}.json")))?;
            }
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            history,
        } => train_cmd(&data, config.as_deref(), &out, history.as_deref()),
        Command::Eval { model, data, out } => eval_cmd(&model, &data, &out),
        Command::Infer { model, graph, out } => infer_cmd(&model, &graph, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
