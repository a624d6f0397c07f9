//! Command-line front end: phantom dataset generation, surface-graph
//! building, the staged training workflow, evaluation, edge ablation and
//! attention export.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 data error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use csnet::error::{Error, Result};
use csnet::graph::{load_graph, save_graph, CartilageGraph, EdgeKind, GraphBuildConfig};
use csnet::model::{self, ModelConfig, Vars};
use csnet::phantom::{generate_dataset, load_manifest, GroundTruth};
use csnet::pipeline::{
    ablate_edges, ablation_csv, batch_merge, build_labeled_graph, evaluate, fit_patch_head,
    mask_graph_edges, pretrain_patch_classifier, train_subject, EdgeMask, EvalLevel,
    MetricsReport, TrainConfig, TrainLog, TrainedModel,
};
use csnet::tensor::Tape;
use csnet::viz::export_attention_ply;
use csnet::volume::load_volume;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DatasetConfig {
    subjects: usize,
    seed: u64,
    /// Pin every subject's inter-slice spacing (cross-spacing studies).
    inter_slice_spacing_mm: Option<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            subjects: 120,
            seed: 0,
            inter_slice_spacing_mm: None,
        }
    }
}

/// One structured config file drives every subcommand; command-line flags
/// override individual fields.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    dataset: DatasetConfig,
    graph: GraphBuildConfig,
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Parser)]
#[command(name = "csnet", version, about = "Cartilage surface graph toolkit")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the dataset and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pin all randomness to the seed (single-threaded execution already
    /// is deterministic; recorded for provenance).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overwrite existing output directories.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom dataset with ground truth and a manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Override [dataset].subjects.
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Build one labeled surface-graph file per manifest subject.
    BuildGraph {
        /// Dataset directory containing manifest.json.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_surface: bool,
        #[arg(long)]
        no_cross: bool,
        #[arg(long)]
        no_adjacent: bool,
    },
    /// Pretrain the patch-convolution cascade on labeled patches.
    Pretrain {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full training: pretrain (unless --init), subject-level training,
    /// patch-head fitting, then evaluation at all three levels.
    Train {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from an existing (e.g. pretrained) checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Evaluate on these graphs instead of the training graphs.
        #[arg(long)]
        eval_graphs: Option<PathBuf>,
    },
    /// Fit only the patch head of an existing model.
    FitPatchHead {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model at subject, slice and patch level.
    Eval {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Write the JSON report here (stdout always gets a copy).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per edge mask and tabulate metrics as CSV.
    Ablate {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        eval_graphs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-vertex attention and predicted grades as ASCII PLY.
    ExportAttention {
        #[arg(long)]
        model: PathBuf,
        /// A single graph file.
        #[arg(long)]
        graph: PathBuf,
        /// Class whose evidence is visualized (0, 1 or 2).
        #[arg(long, default_value_t = 2)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
        /// Include surface edges as PLY edges.
        #[arg(long)]
        edges: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Treat help/version as success, everything else as usage error.
            use clap::error::ErrorKind::*;
            let _ = e.print();
            return if matches!(e.kind(), DisplayHelp | DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged(_) | Error::NonScalarLoss(_) => 3,
        Error::InvalidConfig(_) | Error::InvalidSpec(_) => 1,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    if cli.deterministic {
        cfg.train.deterministic = true;
    }
    cfg.graph.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Create `dir`, refusing to reuse a non-empty directory without --force,
/// and echo the resolved config into it for reproducibility.
fn prepare_out(dir: &Path, force: bool, cfg: &RunConfig) -> Result<()> {
    if dir.exists() && !force && std::fs::read_dir(dir)?.next().is_some() {
        return Err(Error::InvalidConfig(format!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::InvalidConfig(format!("config serialization: {e}")))?;
    std::fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

/// Manifest entries store the paths used at generation time; fall back to
/// the manifest's own directory when those do not resolve from here.
fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.exists() {
        p.to_path_buf()
    } else {
        dir.join(p.file_name().unwrap_or_default())
    }
}

fn load_graphs(dir: &Path) -> Result<Vec<CartilageGraph>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "graph"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no .graph files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_graph(p)).collect()
}

fn write_logs(dir: &Path, name: &str, logs: &[&TrainLog]) -> Result<()> {
    let mut text = String::new();
    for log in logs {
        text.push_str(&log.to_jsonl());
    }
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn eval_all_levels(
    model_: &TrainedModel,
    graphs: &[CartilageGraph],
    mask: EdgeMask,
) -> Result<Vec<MetricsReport>> {
    [EvalLevel::Subject, EvalLevel::Slice, EvalLevel::Patch]
        .iter()
        .map(|&level| evaluate(model_, graphs, level, mask))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::Gen { out, subjects } => {
            prepare_out(out, cli.force, &cfg)?;
            let n = subjects.unwrap_or(cfg.dataset.subjects);
            let manifest = generate_dataset(
                n,
                cfg.dataset.seed,
                out,
                cfg.dataset.inter_slice_spacing_mm,
            )?;
            println!("generated {} subjects into {}", manifest.len(), out.display());
        }
        Cmd::BuildGraph {
            manifest,
            out,
            no_surface,
            no_cross,
            no_adjacent,
        } => {
            prepare_out(out, cli.force, &cfg)?;
            let mask = EdgeMask {
                surface: !no_surface,
                cross: !no_cross,
                adjacent: !no_adjacent,
            };
            let entries = load_manifest(manifest)?;
            let mut built = 0usize;
            for entry in &entries {
                let vol = load_volume(&resolve(manifest, &entry.volume))?;
                let truth: GroundTruth = serde_json::from_slice(&std::fs::read(
                    resolve(manifest, &entry.truth),
                )?)?;
                let g = match build_labeled_graph(&vol, &truth, &cfg.graph, &entry.subject_id) {
                    Ok(g) => g,
                    Err(Error::NoPatella) => {
                        eprintln!("warning: {}: no patella, skipped", entry.subject_id);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let g = mask_graph_edges(&g, mask);
                save_graph(&g, &out.join(format!("{}.graph", entry.subject_id)))?;
                let count = |kind: EdgeKind| {
                    g.csr.kinds.iter().filter(|&&k| k == kind).count() / 2
                };
                println!(
                    "{}: vertices={} surface={} cross={} adjacent={}",
                    entry.subject_id,
                    g.vertices.len(),
                    count(EdgeKind::Surface),
                    count(EdgeKind::Cross),
                    count(EdgeKind::Adjacent),
                );
                built += 1;
            }
            if built == 0 && !entries.is_empty() {
                return Err(Error::NoPatella);
            }
        }
        Cmd::Pretrain { graphs, out } => {
            prepare_out(out, cli.force, &cfg)?;
            let graphs = load_graphs(graphs)?;
            let mut m = TrainedModel::init(cfg.model, cfg.train.seed)?;
            let log = pretrain_patch_classifier(&mut m, &graphs, &cfg.train)?;
            m.save(&out.join("model.csck"))?;
            write_logs(out, "pretrain_log.jsonl", &[&log])?;
            println!(
                "pretrained on {} graphs, final accuracy {:.3}",
                graphs.len(),
                log.records.last().map_or(0.0, |r| r.accuracy)
            );
        }
        Cmd::Train {
            graphs,
            out,
            init,
            eval_graphs,
        } => {
            prepare_out(out, cli.force, &cfg)?;
            let train_graphs = load_graphs(graphs)?;
            let mut logs = Vec::new();
            let mut m = match init {
                Some(path) => TrainedModel::load(path)?,
                None => {
                    let mut m = TrainedModel::init(cfg.model, cfg.train.seed)?;
                    logs.push(pretrain_patch_classifier(&mut m, &train_graphs, &cfg.train)?);
                    m
                }
            };
            logs.push(train_subject(&mut m, &train_graphs, &cfg.train)?);
            logs.push(fit_patch_head(&mut m, &train_graphs, &cfg.train)?);
            m.save(&out.join("model.csck"))?;
            let refs: Vec<&TrainLog> = logs.iter().collect();
            write_logs(out, "train_log.jsonl", &refs)?;
            let eval_set = match eval_graphs {
                Some(dir) => load_graphs(dir)?,
                None => train_graphs,
            };
            let reports = eval_all_levels(&m, &eval_set, cfg.train.edge_mask)?;
            let json = serde_json::to_string_pretty(&reports)?;
            std::fs::write(out.join("report.json"), &json)?;
            println!("{json}");
        }
        Cmd::FitPatchHead { graphs, model, out } => {
            prepare_out(out, cli.force, &cfg)?;
            let graphs = load_graphs(graphs)?;
            let mut m = TrainedModel::load(model)?;
            let log = fit_patch_head(&mut m, &graphs, &cfg.train)?;
            m.save(&out.join("model.csck"))?;
            write_logs(out, "patch_head_log.jsonl", &[&log])?;
        }
        Cmd::Eval { graphs, model, out } => {
            let graphs = load_graphs(graphs)?;
            let m = TrainedModel::load(model)?;
            let reports = eval_all_levels(&m, &graphs, cfg.train.edge_mask)?;
            let json = serde_json::to_string_pretty(&reports)?;
            if let Some(path) = out {
                std::fs::write(path, &json)?;
            }
            println!("{json}");
        }
        Cmd::Ablate {
            graphs,
            eval_graphs,
            out,
        } => {
            prepare_out(out, cli.force, &cfg)?;
            let train = load_graphs(graphs)?;
            let test = load_graphs(eval_graphs)?;
            let table = ablate_edges(&train, &test, cfg.model, &cfg.train)?;
            let csv = ablation_csv(&table);
            std::fs::write(out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::ExportAttention {
            model,
            graph,
            class,
            out,
            edges,
        } => {
            let m = TrainedModel::load(model)?;
            let g = load_graph(graph)?;
            let batch = batch_merge(&[&g], EdgeMask::default())?;
            let attention =
                model::vertex_attention(&m.cfg, &m.params, &m.buffers, &batch.inputs, *class)?;
            // Predicted per-vertex grades from the patch head.
            let tape = Tape::new();
            let vars = Vars::new(&tape, &m.params, |_| false);
            let bb = model::backbone(&m.cfg, &vars, &m.buffers, &tape, &batch.inputs, false)?;
            let logits = model::patch_logits(&vars, &bb.h_final)?;
            let lv = logits.value();
            let grades: Vec<u8> = (0..g.vertices.len())
                .map(|i| {
                    (0..model::NUM_CLASSES)
                        .max_by(|&a, &b| {
                            lv[ndarray::IxDyn(&[i, a])]
                                .partial_cmp(&lv[ndarray::IxDyn(&[i, b])])
                                .unwrap()
                        })
                        .unwrap() as u8
                })
                .collect();
            export_attention_ply(&g, &grades, &attention, *edges, out)?;
            println!(
                "wrote {} ({} vertices, class {class})",
                out.display(),
                g.vertices.len()
            );
        }
    }
    Ok(())
}
