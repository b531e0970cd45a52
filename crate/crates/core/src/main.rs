use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use nanonet::augment::{augment_dataset, AugmentOp, DEFAULT_MULTIPLIER};
use nanonet::bench::{bench_latency, evaluate_dataset, predict, BenchConfig};
use nanonet::data::image_io::{load_image, resize_bilinear, save_binary_mask_png, save_image_png, save_mask_png, save_overlay_png};
use nanonet::data::manifest::{dataset_root, load_split, scan_manifest, Manifest, Split, DATA_ROOT_ENV};
use nanonet::data::synthetic::{blob_sample, BlobConfig};
use nanonet::data::weight_file::{load_weights, save_weights};
use nanonet::graph::ModelGraph;
use nanonet::metrics::{Aggregation, DEFAULT_THRESHOLD};
use nanonet::model::{build_nanonet, component_breakdown, ModelConfig, Variant};
use nanonet::train::{train, TrainConfig};
use nanonet::weights::WeightStore;
use nanonet::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "nanonet", version, about = "Build, train, evaluate and benchmark NanoNet segmentation models")]
struct Cli {
    /// JSON file with default values for any flag (flags take precedence).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the trainable parameter count and per-component table.
    CountParams(ModelArgs),
    /// Print the layer table, shapes, MACs and graph fingerprint.
    Inspect(ModelArgs),
    /// Write a seeded synthetic ellipse dataset (images/ + masks/).
    Synth(SynthArgs),
    /// Materialize an augmented copy of a dataset.
    Augment(AugmentArgs),
    /// Train a model and write weights plus a JSON-lines epoch log.
    Train(TrainArgs),
    /// Score a split and write the per-image metrics CSV.
    Eval(EvalArgs),
    /// Predict masks (PNG, values 0/255) and optional overlays.
    Infer(InferArgs),
    /// Measure single-image inference latency.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long)]
    variant: Option<Variant>,
    /// Input side length (square, multiple of 8).
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OpName {
    Crop,
    Rotate,
    Hflip,
    Vflip,
    Grid,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Dataset directory (images/, masks/) or manifest CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Augmented copies per training image.
    #[arg(long)]
    multiplier: Option<usize>,
    /// Operations to cycle through (default: all five).
    #[arg(long, value_delimiter = ',')]
    ops: Option<Vec<OpName>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Start from these weights instead of a random init.
    #[arg(long)]
    init_weights: Option<PathBuf>,
    #[arg(long)]
    freeze_encoder: bool,
    /// Stop once validation DSC exceeds this value.
    #[arg(long)]
    target_dice: Option<f64>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Score pooled pixel counts instead of the mean over images.
    #[arg(long)]
    pooled: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Weight file; random weights from --seed when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// An image file or a directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    overlay: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Variant to time; all three when absent.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Write the statistics as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Values a `--config` file may provide.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    variant: Option<Variant>,
    input_size: Option<usize>,
    classes: Option<usize>,
    data: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    threshold: Option<f64>,
    iterations: Option<usize>,
    warmup: Option<usize>,
    multiplier: Option<usize>,
    early_stop_patience: Option<usize>,
}

const DEFAULT_SEED: u64 = 42;

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(p) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

fn model_config(m: &ModelArgs, f: &FileConfig) -> Result<ModelConfig> {
    let variant = m.variant.or(f.variant).unwrap_or(Variant::A);
    let side = m.input_size.or(f.input_size).unwrap_or(256);
    let cfg = ModelConfig::new(variant)
        .with_input_size(side, side)
        .with_classes(m.classes.or(f.classes).unwrap_or(1));
    Ok(cfg)
}

fn data_source(flag: Option<&Path>, f: &FileConfig) -> Result<PathBuf> {
    dataset_root(flag.or(f.data.as_deref()))
        .ok_or_else(|| Error::Config(format!("no dataset given: pass --data or set {DATA_ROOT_ENV}")))
}

fn print_config(command: &str, cfg: &Value) {
    println!("resolved configuration ({command}):");
    println!("{}", serde_json::to_string_pretty(cfg).unwrap_or_default());
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

/// Records what produced the artifacts in `dir`.
fn write_descriptor(dir: &Path, command: &str, cfg: &Value) -> Result<()> {
    let path = dir.join("run.json");
    let desc = json!({
        "command": command,
        "config": cfg,
        "nanonet_version": env!("CARGO_PKG_VERSION"),
        "argv": std::env::args().collect::<Vec<_>>(),
    });
    std::fs::write(&path, serde_json::to_string_pretty(&desc).unwrap_or_default()).map_err(|e| Error::Io { path, source: e })
}

fn weights_for(graph: &ModelGraph, path: Option<&Path>, seed: u64) -> Result<WeightStore> {
    match path {
        Some(p) => load_weights(p, graph),
        None => Ok(WeightStore::initialize(graph, seed)),
    }
}

fn count_params(m: &ModelArgs, f: &FileConfig) -> Result<()> {
    let cfg = model_config(m, f)?;
    print_config("count-params", &serde_json::to_value(&cfg).unwrap_or_default());
    let g = build_nanonet(&cfg)?;
    let count = g.count_parameters();
    println!("{:<12} {:>10}", "component", "params");
    for (name, n) in component_breakdown(&g) {
        println!("{name:<12} {n:>10}");
    }
    println!("{:<12} {:>10}", "total", count.total);
    println!("non-trainable buffers: {}", count.buffers);
    let reference = cfg.variant.reference_parameters();
    let diff = count.total as i64 - reference as i64;
    println!(
        "reference {reference} (difference {diff:+}, {:+.3}%)",
        100.0 * diff as f64 / reference as f64
    );
    Ok(())
}

fn inspect(m: &ModelArgs, f: &FileConfig) -> Result<()> {
    let cfg = model_config(m, f)?;
    print_config("inspect", &serde_json::to_value(&cfg).unwrap_or_default());
    let g = build_nanonet(&cfg)?;
    print!("{}", g.describe());
    let fp: String = g.fingerprint().iter().map(|b| format!("{b:02x}")).collect();
    println!("multiply-accumulates per image: {}", g.mac_count());
    println!("fingerprint: {fp}");
    Ok(())
}

fn synth(a: &SynthArgs, f: &FileConfig) -> Result<()> {
    let seed = a.seed.or(f.seed).unwrap_or(DEFAULT_SEED);
    let cfg = json!({"out": a.out, "count": a.count, "size": a.size, "seed": seed});
    print_config("synth", &cfg);
    let blob = BlobConfig {
        size: a.size,
        ..BlobConfig::default()
    };
    create_dir(&a.out.join("images"))?;
    create_dir(&a.out.join("masks"))?;
    for i in 0..a.count {
        let (im, m) = blob_sample(&blob, seed, i as u64);
        let name = format!("blob_{i:05}.png");
        save_image_png(&im, &a.out.join("images").join(&name))?;
        save_binary_mask_png(&m, &a.out.join("masks").join(&name))?;
    }
    write_descriptor(&a.out, "synth", &cfg)?;
    println!("wrote {} pairs to {}", a.count, a.out.display());
    Ok(())
}

fn augment(a: &AugmentArgs, f: &FileConfig) -> Result<bool> {
    let seed = a.seed.or(f.seed).unwrap_or(DEFAULT_SEED);
    let source = data_source(a.data.as_deref(), f)?;
    let multiplier = a.multiplier.or(f.multiplier).unwrap_or(DEFAULT_MULTIPLIER);
    let defaults = AugmentOp::defaults();
    let ops: Vec<AugmentOp> = match &a.ops {
        None => defaults,
        Some(names) => names
            .iter()
            .map(|n| {
                let key = match n {
                    OpName::Crop => "crop",
                    OpName::Rotate => "rotate",
                    OpName::Hflip => "hflip",
                    OpName::Vflip => "vflip",
                    OpName::Grid => "grid",
                };
                *defaults.iter().find(|o| o.name() == key).expect("every name has a default op")
            })
            .collect(),
    };
    let cfg = json!({"data": source, "out": a.out, "multiplier": multiplier, "ops": ops, "seed": seed});
    print_config("augment", &cfg);
    let manifest = scan_manifest(&source, seed)?;
    create_dir(&a.out)?;
    let summary = augment_dataset(&manifest, &ops, multiplier, &a.out, seed)?;
    write_descriptor(&a.out, "augment", &cfg)?;
    println!(
        "wrote {} records to {} ({} failed)",
        summary.manifest.records.len(),
        a.out.join("manifest.csv").display(),
        summary.failures.len()
    );
    for (id, why) in &summary.failures {
        eprintln!("failed: {id}: {why}");
    }
    Ok(summary.failures.is_empty())
}

fn load(manifest: &Manifest, split: Split, side: usize) -> Result<nanonet::data::SegDataset> {
    let (ds, skipped) = load_split(manifest, split, (side, side));
    for (id, why) in &skipped {
        log::warn!("skipped {id}: {why}");
    }
    Ok(ds)
}

fn run_train(a: &TrainArgs, f: &FileConfig) -> Result<()> {
    let mcfg = model_config(&a.model, f)?;
    let defaults = TrainConfig::default();
    let tcfg = TrainConfig {
        batch_size: a.batch_size.or(f.batch_size).unwrap_or(defaults.batch_size),
        epochs: a.epochs.or(f.epochs).unwrap_or(defaults.epochs),
        lr: a.lr.or(f.lr).unwrap_or(defaults.lr),
        seed: a.seed.or(f.seed).unwrap_or(DEFAULT_SEED),
        freeze_encoder: a.freeze_encoder,
        target_val_dice: a.target_dice,
        early_stop_patience: a.early_stop_patience.or(f.early_stop_patience).unwrap_or(defaults.early_stop_patience),
        ..defaults
    };
    tcfg.validate()?;
    let source = data_source(a.data.as_deref(), f)?;
    let cfg = json!({"model": mcfg, "train": tcfg, "data": source, "out": a.out, "init_weights": a.init_weights});
    print_config("train", &cfg);

    let g = build_nanonet(&mcfg)?;
    let manifest = scan_manifest(&source, tcfg.seed)?;
    let side = mcfg.input_size.0;
    let train_set = load(&manifest, Split::Train, side)?;
    let val_set = load(&manifest, Split::Val, side)?;
    println!("train {} / val {} samples", train_set.len(), val_set.len());
    let init = weights_for(&g, a.init_weights.as_deref(), tcfg.seed)?;

    create_dir(&a.out)?;
    write_descriptor(&a.out, "train", &cfg)?;
    let log_path = a.out.join("epochs.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?);
    let mut log_err = None;
    let outcome = train(&g, init, &train_set, &val_set, &tcfg, |rec| {
        println!(
            "epoch {:>4}  train {:.5}  val {:.5}  dice {:.4}  lr {:.2e}",
            rec.epoch, rec.train_loss, rec.val_loss, rec.val_dice, rec.lr
        );
        let line = serde_json::to_string(rec).unwrap_or_default();
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::Io { path: log_path, source: e });
    }
    save_weights(&outcome.best_weights, &a.out.join("weights.nnwt"))?;
    save_weights(&outcome.weights, &a.out.join("last.nnwt"))?;
    println!("stopped: {:?}; weights in {}", outcome.stop_reason, a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs, f: &FileConfig) -> Result<bool> {
    let mcfg = model_config(&a.model, f)?;
    let threshold = a.threshold.or(f.threshold).unwrap_or(DEFAULT_THRESHOLD);
    let seed = a.seed.or(f.seed).unwrap_or(DEFAULT_SEED);
    let batch = a.batch_size.or(f.batch_size).unwrap_or(8);
    let source = data_source(a.data.as_deref(), f)?;
    let aggregation = if a.pooled {
        Aggregation::Pooled
    } else {
        Aggregation::MeanOverImages
    };
    let cfg = json!({"model": mcfg, "weights": a.weights, "data": source, "out": a.out,
        "split": format!("{:?}", a.split).to_lowercase(), "threshold": threshold, "aggregation": aggregation, "seed": seed});
    print_config("eval", &cfg);

    let g = build_nanonet(&mcfg)?;
    let store = load_weights(&a.weights, &g)?;
    let mut manifest = scan_manifest(&source, seed)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
        SplitArg::All => {
            manifest.records.iter_mut().for_each(|r| r.split = Split::Test);
            Split::Test
        }
    };
    let side = mcfg.input_size.0;
    let (ds, skipped) = load_split(&manifest, split, (side, side));
    if ds.is_empty() {
        return Err(Error::Config(format!("split {split} of {} has no loadable pairs", source.display())));
    }
    let report = evaluate_dataset(&g, &store, &ds, batch, threshold, aggregation, skipped)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    report.write_csv(&a.out)?;
    let dir = a.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_descriptor(dir, "eval", &cfg)?;
    print!("{}", report.pretty());
    for (id, why) in &report.skipped {
        eprintln!("skipped {id}: {why}");
    }
    Ok(report.skipped.is_empty())
}

fn infer(a: &InferArgs, f: &FileConfig) -> Result<()> {
    let mcfg = model_config(&a.model, f)?;
    let threshold = a.threshold.or(f.threshold).unwrap_or(DEFAULT_THRESHOLD);
    let seed = a.seed.or(f.seed).unwrap_or(DEFAULT_SEED);
    let cfg = json!({"model": mcfg, "weights": a.weights, "input": a.input, "out": a.out,
        "threshold": threshold, "overlay": a.overlay, "seed": seed});
    print_config("infer", &cfg);

    let g = build_nanonet(&mcfg)?;
    let store = weights_for(&g, a.weights.as_deref(), seed)?;
    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&a.input)
            .map_err(|e| Error::Io {
                path: a.input.clone(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        v.sort();
        v
    } else {
        vec![a.input.clone()]
    };
    create_dir(&a.out)?;
    let (h, w) = mcfg.input_size;
    for p in &inputs {
        let im = load_image(p)?;
        let (oh, ow) = (im.shape().h, im.shape().w);
        let prob = predict(&g, &store, &resize_bilinear(&im, h, w))?;
        let prob = resize_bilinear(&prob, oh, ow);
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mask_path = a.out.join(format!("{stem}_mask.png"));
        save_mask_png(&prob, threshold, &mask_path)?;
        if a.overlay {
            save_overlay_png(&im, &prob, threshold, &a.out.join(format!("{stem}_overlay.png")))?;
        }
        println!("{} -> {}", p.display(), mask_path.display());
    }
    write_descriptor(&a.out, "infer", &cfg)
}

fn bench(a: &BenchArgs, f: &FileConfig) -> Result<()> {
    let size = a.size.unwrap_or(256);
    let defaults = BenchConfig::default();
    let bcfg = BenchConfig {
        height: size,
        width: size,
        warmup: a.warmup.or(f.warmup).unwrap_or(defaults.warmup),
        iterations: a.iterations.or(f.iterations).unwrap_or(defaults.iterations),
    };
    let seed = a.seed.or(f.seed).unwrap_or(DEFAULT_SEED);
    let variants: Vec<Variant> = match a.variant.or(f.variant) {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    if a.weights.is_some() && variants.len() != 1 {
        return Err(Error::Config("--weights needs a single --variant".into()));
    }
    let cfg = json!({"variants": variants, "size": size, "warmup": bcfg.warmup, "iterations": bcfg.iterations,
        "weights": a.weights, "seed": seed, "threads": 1});
    print_config("bench", &cfg);
    let mut results = Vec::new();
    for v in variants {
        let g = build_nanonet(&ModelConfig::new(v).with_input_size(size, size))?;
        let store = weights_for(&g, a.weights.as_deref(), seed)?;
        let stats = bench_latency(&g, &store, &bcfg)?;
        println!(
            "NanoNet-{v}: median {:.2} ms  mean {:.2} ms  p95 {:.2} ms  {:.2} FPS",
            stats.median_ms, stats.mean_ms, stats.p95_ms, stats.fps
        );
        results.push(json!({"variant": v, "parameters": g.count_parameters().total, "latency": stats}));
    }
    if let Some(out) = &a.out {
        let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        create_dir(dir)?;
        let text = serde_json::to_string_pretty(&json!({"config": cfg, "results": results})).unwrap_or_default();
        std::fs::write(out, text).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        write_descriptor(dir, "bench", &cfg)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let f = read_config(cli.config.as_deref())?;
    match &cli.command {
        Command::CountParams(m) => count_params(m, &f).map(|_| true),
        Command::Inspect(m) => inspect(m, &f).map(|_| true),
        Command::Synth(a) => synth(a, &f).map(|_| true),
        Command::Augment(a) => augment(a, &f),
        Command::Train(a) => run_train(a, &f).map(|_| true),
        Command::Eval(a) => eval(a, &f),
        Command::Infer(a) => infer(a, &f).map(|_| true),
        Command::Bench(a) => bench(a, &f).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: finished with skipped or failed items");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
