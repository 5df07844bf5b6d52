use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use textseg_core::archive::{list_png_names, Archive, IMAGE_DIR};
use textseg_core::data::load_archive;
use textseg_core::metrics::evaluate_dirs;
use textseg_core::render::{
    bundled_font_dir, generate_dataset, Compositor, Corpus, FontInventory, GenerateConfig,
    Generator,
};
use textseg_core::skeleton::zhang_suen_thin;
use textseg_core::train::{self, load_checkpoint, preset, LogRecord, RunConfig};
use textseg_core::{BinaryMask, ColorImage};

/// Artistic text segmentation: data synthesis, training, evaluation and inference.
#[derive(Parser)]
#[command(name = "textseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an archive of (image, mask) pairs.
    Generate(GenerateArgs),
    /// Thin a binary mask PNG to its one-pixel skeleton.
    Skeletonize(SkeletonizeArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Predict text masks with a trained checkpoint.
    Predict(PredictArgs),
    /// Train a grid of ablation variants over several seeds.
    Ablate(AblateArgs),
    /// Write an overlay of an image, its mask and its skeleton.
    Viz(VizArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of samples.
    #[arg(long)]
    count: usize,
    /// Output archive root.
    #[arg(long)]
    out: PathBuf,
    /// Generator TOML (canvas, scene and composite settings); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; each sample derives its own stream from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory of .ttf/.otf fonts (defaults to the bundled fonts).
    #[arg(long)]
    fonts: Option<PathBuf>,
    /// Directory of PNG background pictures.
    #[arg(long)]
    backgrounds: Option<PathBuf>,
    /// Word list, whitespace separated (defaults to the bundled corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Canvas height in pixels (default 128).
    #[arg(long)]
    height: Option<usize>,
    /// Canvas width in pixels (default 128).
    #[arg(long)]
    width: Option<usize>,
    /// Do not write precomputed skeletons.
    #[arg(long)]
    no_skeletons: bool,
}

#[derive(Args)]
struct SkeletonizeArgs {
    /// Input mask PNG (0 = background, 255 = foreground).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output skeleton PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration TOML with [model], [train], [data] and [ablation] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the log, checkpoints and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Overrides [data] path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides [train] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides [train] iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Print every log record to stderr, not only validation records.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted masks (a mask directory or an archive root).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth masks (a mask directory or an archive root).
    #[arg(long)]
    gt: PathBuf,
    /// Also report per-image scores.
    #[arg(long)]
    per_image: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image PNG, a directory of PNGs, or an archive root containing image/.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for mask PNGs named like their inputs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Base run configuration TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `modules` (baseline, +lmq, +lmq+skeleton) or `alpha` (momentum sweep).
    #[arg(long, default_value = "modules")]
    preset: String,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    /// Overrides [data] path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides [train] iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory; the report is written to report.json inside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VizArgs {
    /// Image PNG.
    #[arg(long)]
    image: PathBuf,
    /// Mask PNG of the same size.
    #[arg(long)]
    mask: PathBuf,
    /// Skeleton PNG; computed from the mask when omitted.
    #[arg(long)]
    skeleton: Option<PathBuf>,
    /// Output overlay PNG.
    #[arg(long)]
    out: PathBuf,
}

/// Written before any long-running work starts.
#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    config: serde_json::Value,
    seed: Option<u64>,
    artifacts: Vec<PathBuf>,
    version: String,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn write_manifest(dir: &Path, subcommand: &str, config: serde_json::Value, seed: Option<u64>, artifacts: &[&Path]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let manifest = RunManifest {
        subcommand: subcommand.to_owned(),
        config,
        seed,
        artifacts: artifacts.iter().map(|p| absolute(p)).collect::<Result<_>>()?,
        version: env!("CARGO_PKG_VERSION").to_owned(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let fonts_dir = a.fonts.unwrap_or_else(bundled_font_dir);
    let fonts = FontInventory::load_dir(&fonts_dir)?;
    let corpus = match &a.corpus {
        Some(p) => Corpus::load(p)?,
        None => Corpus::builtin(),
    };
    let mut config = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<GenerateConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => GenerateConfig::default(),
    };
    if let Some(s) = a.seed {
        config.master_seed = s;
    }
    if let Some(h) = a.height {
        config.canvas.0 = h;
    }
    if let Some(w) = a.width {
        config.canvas.1 = w;
    }
    if a.no_skeletons {
        config.write_skeletons = false;
    }
    config.scene.validate()?;
    let mut compositor = Compositor::new(config.composite.clone());
    if let Some(dir) = &a.backgrounds {
        compositor = compositor.with_background_dir(dir)?;
    }
    write_manifest(
        &a.out,
        "generate",
        serde_json::json!({
            "count": a.count,
            "generate": config,
            "fonts": absolute(&fonts_dir)?,
            "backgrounds": a.backgrounds.as_deref().map(absolute).transpose()?,
            "corpus": a.corpus.as_deref().map(absolute).transpose()?,
        }),
        Some(config.master_seed),
        &[&a.out],
    )?;
    let generator = Generator {
        corpus: &corpus,
        fonts: &fonts,
        compositor: &compositor,
        config: &config,
    };
    let records = generate_dataset(a.count, &a.out, &generator)?;
    println!("{}", serde_json::json!({ "samples": records.len(), "out": absolute(&a.out)? }));
    Ok(())
}

fn skeletonize(a: SkeletonizeArgs) -> Result<()> {
    let mask = BinaryMask::load_png(&a.input)?;
    zhang_suen_thin(&mask).save_png(&a.out)?;
    Ok(())
}

fn report_progress(verbose: bool) -> impl FnMut(&LogRecord) {
    move |r| match r {
        LogRecord::Val { .. } => eprintln!("{}", serde_json::to_string(r).unwrap_or_default()),
        LogRecord::Iter { iter, total, .. } if verbose || iter % 50 == 0 => eprintln!("iter {iter} loss {total:.4}"),
        _ => {}
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.data.path = d;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    cfg.data.path = absolute(&cfg.data.path)?;
    cfg.validate()?;
    write_manifest(
        &a.out,
        "train",
        serde_json::to_value(&cfg)?,
        Some(cfg.train.seed),
        &[&a.out.join(train::LOG_FILE), &a.out.join(train::FINAL_CHECKPOINT), &a.out.join(train::BEST_CHECKPOINT)],
    )?;
    let summary = train::train(&cfg, &a.out, &mut report_progress(a.verbose))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = evaluate_dirs(&a.pred, &a.gt, a.per_image)?;
    println!("{}", report.to_json_line());
    Ok(())
}

fn input_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let nested = input.join(IMAGE_DIR);
    let dir = if nested.is_dir() { nested } else { input.to_path_buf() };
    let names = list_png_names(&dir)?;
    if names.is_empty() {
        bail!("no PNG images in {}", dir.display());
    }
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

fn predict(a: PredictArgs) -> Result<()> {
    let inputs = input_images(&a.input)?;
    let (model, cfg, iteration) = load_checkpoint(&a.checkpoint)?;
    write_manifest(
        &a.out,
        "predict",
        serde_json::json!({ "checkpoint": absolute(&a.checkpoint)?, "iteration": iteration, "run": cfg }),
        None,
        &[&a.out],
    )?;
    for path in &inputs {
        let image = ColorImage::load_png(path)?;
        let mask = model.predict_mask(&image)?;
        let name = path.file_name().context("input without file name")?;
        mask.save_png(a.out.join(name))?;
    }
    println!("{}", serde_json::json!({ "predicted": inputs.len(), "out": absolute(&a.out)? }));
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(d) = a.data {
        cfg.data.path = d;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    cfg.data.path = absolute(&cfg.data.path)?;
    cfg.validate()?;
    let variants = preset(&a.preset, &cfg.ablation)?;
    let report_path = a.out.join("report.json");
    write_manifest(
        &a.out,
        "ablate",
        serde_json::json!({ "preset": a.preset, "seeds": a.seeds, "variants": variants, "run": cfg }),
        a.seeds.first().copied(),
        &[&report_path],
    )?;
    // archive must be readable before the first run starts
    Archive::open(&cfg.data.path)?;
    let samples = load_archive(&cfg.data.path, cfg.data.limit)?;
    let report = train::ablate(&cfg, &variants, &a.seeds, &samples, &a.out, &mut |name, seed, r| {
        if let LogRecord::Val { .. } = r {
            eprintln!("{name} seed {seed}: {}", serde_json::to_string(r).unwrap_or_default());
        }
    })?;
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&report_path, &text).with_context(|| format!("writing {}", report_path.display()))?;
    for row in &report.rows {
        println!(
            "{}",
            serde_json::json!({
                "variant": row.variant.name,
                "fg_iou_mean": format!("{:.2}", row.fg_iou.mean),
                "fg_iou_std": format!("{:.2}", row.fg_iou.std),
                "f_score_mean": format!("{:.3}", row.f_score.mean),
            })
        );
    }
    Ok(())
}

const MASK_TINT: [f32; 3] = [1.0, 0.1, 0.1];
const SKELETON_COLOR: [f32; 3] = [1.0, 1.0, 0.0];

fn overlay(image: &ColorImage, mask: &BinaryMask, skeleton: &BinaryMask) -> ColorImage {
    let mut out = image.clone();
    let (h, w) = image.dims();
    for r in 0..h {
        for c in 0..w {
            if skeleton.get(r, c) {
                out.set(r, c, SKELETON_COLOR);
            } else if mask.get(r, c) {
                let p = image.get(r, c);
                out.set(r, c, std::array::from_fn(|k| 0.5 * p[k] + 0.5 * MASK_TINT[k]));
            }
        }
    }
    out
}

fn viz(a: VizArgs) -> Result<()> {
    let image = ColorImage::load_png(&a.image)?;
    let mask = BinaryMask::load_png(&a.mask)?;
    let skeleton = match &a.skeleton {
        Some(p) => BinaryMask::load_png(p)?,
        None => zhang_suen_thin(&mask),
    };
    if mask.dims() != image.dims() || skeleton.dims() != image.dims() {
        bail!(
            "image {:?}, mask {:?} and skeleton {:?} differ in size",
            image.dims(),
            mask.dims(),
            skeleton.dims()
        );
    }
    overlay(&image, &mask, &skeleton).save_png(&a.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Skeletonize(a) => skeletonize(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate(a),
        Command::Viz(a) => viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
