//! Command-line entry point for the vcseg pipelines.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 training aborted
//! on a non-finite loss.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use vcseg::data::{generate_dataset, save_image_png, save_label_png, Dataset, DatasetSpec};
use vcseg::eval::{
    build_retrieval_index, eval_kmeans_knn, eval_linear, track_dataset, EvalProtocol,
};
use vcseg::pseudoseg::{save_segment_map, segment_with, FelzParams};
use vcseg::sweep::{run_sweep, SweepSpec};
use vcseg::trainer::{load_model, save_model, train, TrainConfig};
use vcseg::viz::{colorize_segments, concept_sheet, visualize_panel};

#[derive(Parser)]
#[command(name = "vcseg", version, about = "Self-supervised pixel embeddings from visual concepts")]
struct Cli {
    /// Worker threads (also VCSEG_THREADS); 0 = automatic.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Precompute pseudo segments for every image of a dataset.
    Segment(SegmentArgs),
    /// Train pixel embeddings and the concept codebook.
    Train(TrainArgs),
    /// Evaluate with k-means segmentation + nearest-neighbor retrieval.
    EvalKmeans(EvalArgs),
    /// Evaluate with the linear softmax probe.
    EvalLinear(EvalArgs),
    /// Propagate first-frame masks through the dataset videos.
    Track(EvalArgs),
    /// Train and evaluate across a grid of one hyper-parameter.
    Sweep(SweepArgs),
    /// Render per-image panels (raw | embedding PCA | segments | labels).
    Visualize(VisualizeArgs),
    /// Render the concept contact sheet ordered by concept usage.
    DumpConcepts(DumpConceptsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset spec JSON; defaults cover the standard benchmark.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the spec's training image count.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    /// Path to manifest.json; sidecars are written next to it.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 50.0)]
    scale_k: f64,
    #[arg(long, default_value_t = 20)]
    min_size: usize,
    #[arg(long, default_value_t = 0.8)]
    sigma: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TrainConfig as JSON or TOML; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Evaluation protocol overrides as JSON.
    #[arg(long)]
    protocol: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// SweepSpec as JSON or TOML.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    protocol: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated image ids; defaults to the first 4 validation images.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    protocol: Option<PathBuf>,
}

#[derive(Args)]
struct DumpConceptsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 24)]
    tile: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    protocol: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not usage errors
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let threads = if cli.threads > 0 {
        cli.threads
    } else {
        std::env::var("VCSEG_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    };
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("vcseg: failed to set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vcseg: {e:#}");
            ExitCode::from(failure_exit_code(&e))
        }
    }
}

/// 3 for a non-finite training abort, 2 for any other runtime failure.
fn failure_exit_code(e: &anyhow::Error) -> u8 {
    let non_finite = e
        .downcast_ref::<vcseg::Error>()
        .is_some_and(|err| matches!(err, vcseg::Error::NonFinite { .. }));
    if non_finite {
        3
    } else {
        2
    }
}


fn load_protocol(path: &Option<PathBuf>) -> Result<EvalProtocol> {
    match path {
        None => Ok(EvalProtocol::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => {
            let mut spec = match &args.spec {
                Some(p) => {
                    let text =
                        fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<DatasetSpec>(&text)
                        .with_context(|| format!("parsing {}", p.display()))?
                }
                None => DatasetSpec::default(),
            };
            if let Some(count) = args.count {
                spec.train_count = count;
                spec.val_count = (count / 4).max(1);
            }
            let manifest = generate_dataset(&spec, args.seed, &args.out)?;
            println!(
                "wrote {} images ({} train / {} val), {} videos to {}",
                manifest.images.len(),
                manifest.train.len(),
                manifest.val.len(),
                manifest.videos.len(),
                args.out.display()
            );
        }
        Command::Segment(args) => {
            let mut dataset = Dataset::load(&args.data)?;
            let params = FelzParams {
                scale_k: args.scale_k,
                min_size: args.min_size,
                sigma: args.sigma,
            };
            let segs_dir = dataset.root.join("segs");
            fs::create_dir_all(&segs_dir)?;
            let mut counts = Vec::new();
            for i in 0..dataset.len() {
                let map = segment_with(&dataset.images[i], &params)?;
                let id = dataset.manifest.images[i].id;
                let rel = format!("segs/seg_{id:05}.seg");
                save_segment_map(&map, &dataset.root.join(&rel))?;
                save_image_png(
                    &colorize_segments(&map),
                    &dataset.root.join(format!("segs/seg_{id:05}.png")),
                )?;
                counts.push(map.segment_count());
                dataset.manifest.images[i].seg = Some(rel);
            }
            dataset.manifest.save(&args.data)?;
            let (min, max) = (
                counts.iter().min().copied().unwrap_or(0),
                counts.iter().max().copied().unwrap_or(0),
            );
            println!(
                "segmented {} images (segment counts {min}..{max}), sidecars in {}",
                counts.len(),
                segs_dir.display()
            );
        }
        Command::Train(args) => {
            let dataset = Dataset::load(&args.data)?;
            let mut config = match &args.config {
                Some(p) => TrainConfig::from_file(p)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            let (model, log) = train(&dataset, &config)?;
            save_model(&model, &log, &args.out)?;
            let last = log.last().expect("at least one step");
            println!(
                "trained {} iterations (final total loss {:.4}); model in {}",
                config.iterations,
                last.report.total,
                args.out.display()
            );
        }
        Command::EvalKmeans(args) => {
            let dataset = Dataset::load(&args.data)?;
            let model = load_model(&args.model)?;
            let protocol = load_protocol(&args.protocol)?;
            let eval = eval_kmeans_knn(&model, &dataset, &protocol)?;
            fs::create_dir_all(&args.out)?;
            let index = build_retrieval_index(&model, &dataset, &protocol)?;
            index.save(&args.out.join("retrieval_index.bin"))?;
            for (id, prediction) in &eval.predictions {
                save_label_png(prediction, &args.out.join(format!("pred_{id:05}.png")))?;
            }
            #[derive(serde::Serialize)]
            struct Metrics<'a> {
                miou: f64,
                per_class: &'a [Option<f64>],
                purity_mean: f64,
                purity_histogram: [u64; 10],
                active_concepts: usize,
            }
            write_json(
                &Metrics {
                    miou: eval.miou.mean,
                    per_class: &eval.miou.per_class,
                    purity_mean: eval.purity.mean,
                    purity_histogram: eval.purity.histogram,
                    active_concepts: eval.purity.active_concepts,
                },
                &args.out.join("metrics.json"),
            )?;
            println!(
                "k-means+knn mIoU {:.4}, mean concept purity {:.4}; results in {}",
                eval.miou.mean,
                eval.purity.mean,
                args.out.display()
            );
        }
        Command::EvalLinear(args) => {
            let dataset = Dataset::load(&args.data)?;
            let model = load_model(&args.model)?;
            let protocol = load_protocol(&args.protocol)?;
            let eval = eval_linear(&model, &dataset, &protocol)?;
            fs::create_dir_all(&args.out)?;
            for (id, prediction) in &eval.predictions {
                save_label_png(prediction, &args.out.join(format!("pred_{id:05}.png")))?;
            }
            #[derive(serde::Serialize)]
            struct Metrics<'a> {
                miou: f64,
                per_class: &'a [Option<f64>],
            }
            write_json(
                &Metrics {
                    miou: eval.miou.mean,
                    per_class: &eval.miou.per_class,
                },
                &args.out.join("metrics.json"),
            )?;
            println!(
                "linear probe mIoU {:.4}; results in {}",
                eval.miou.mean,
                args.out.display()
            );
        }
        Command::Track(args) => {
            let dataset = Dataset::load(&args.data)?;
            let model = load_model(&args.model)?;
            let protocol = load_protocol(&args.protocol)?;
            let eval = track_dataset(&model, &dataset, &protocol)?;
            fs::create_dir_all(&args.out)?;
            write_json(&eval, &args.out.join("metrics.json"))?;
            println!(
                "tracking J {:.4}, F {:.4} over {} videos; results in {}",
                eval.j_mean,
                eval.f_mean,
                eval.per_video.len(),
                args.out.display()
            );
        }
        Command::Sweep(args) => {
            let dataset = Dataset::load(&args.data)?;
            let spec = SweepSpec::from_file(&args.spec)?;
            let protocol = load_protocol(&args.protocol)?;
            let table = run_sweep(&dataset, &spec, &protocol)?;
            fs::create_dir_all(&args.out)?;
            write_json(&table, &args.out.join("sweep.json"))?;
            fs::write(args.out.join("sweep.txt"), table.text())?;
            print!("{}", table.text());
            println!("({} training runs; results in {})", table.runs_executed, args.out.display());
        }
        Command::Visualize(args) => {
            let dataset = Dataset::load(&args.data)?;
            let model = load_model(&args.model)?;
            let protocol = load_protocol(&args.protocol)?;
            let ids: Vec<u64> = if args.ids.is_empty() {
                dataset.manifest.val.iter().take(4).copied().collect()
            } else {
                args.ids.clone()
            };
            fs::create_dir_all(&args.out)?;
            let index = build_retrieval_index(&model, &dataset, &protocol)?;
            for id in ids {
                let i = dataset
                    .index_of(id)
                    .ok_or_else(|| anyhow::anyhow!("no image with id {id}"))?;
                let panel = visualize_panel(
                    &model,
                    &dataset.images[i],
                    &model.fields[i],
                    &index,
                    dataset.manifest.class_count,
                    &protocol,
                    vcseg::rng::subseed(protocol.seed, &[vcseg::rng::stream::KMEANS, id]),
                )?;
                save_image_png(&panel, &args.out.join(format!("panel_{id:05}.png")))?;
            }
            println!("panels written to {}", args.out.display());
        }
        Command::DumpConcepts(args) => {
            let dataset = Dataset::load(&args.data)?;
            let model = load_model(&args.model)?;
            let protocol = load_protocol(&args.protocol)?;
            let (sheet, order) = concept_sheet(&model, &dataset, &protocol, args.samples, args.tile)?;
            fs::create_dir_all(&args.out)?;
            save_image_png(&sheet, &args.out.join("concepts.png"))?;
            write_json(&order, &args.out.join("concept_order.json"))?;
            println!(
                "concept sheet with {} active concepts written to {}",
                order.len(),
                args.out.display()
            );
        }
    }
    Ok(())
}
