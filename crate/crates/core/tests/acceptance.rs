//! Acceptance runner. Prints one PASS/FAIL line per criterion.
//!
//! The overfit and ablation experiments take tens of minutes to hours on a CPU. By default
//! they are checked against the artifacts committed under `results/`: the overfit checkpoint
//! is re-evaluated on freshly generated data and its log is inspected, and the ablation
//! report is read back. `--run-overfit` and `--run-ablation` redo them from scratch.
//! `--strict` makes any FAIL line a nonzero exit.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::Check;
use textseg_core::data::load_archive;
use textseg_core::render::{bundled_font_dir, generate_dataset, Compositor, Corpus, FontInventory, GenerateConfig, Generator};
use textseg_core::train::{
    ablate, evaluate_model, load_checkpoint, preset, train, AblationReport, LogRecord, RunConfig, FINAL_CHECKPOINT,
    LOG_FILE,
};

const OVERFIT_SAMPLES: usize = 32;
const OVERFIT_DATA_SEED: u64 = 7;
const OVERFIT_MAX_ITERATIONS: usize = 2000;
const OVERFIT_TARGET: f64 = 90.0;
const ABLATION_SAMPLES: usize = 512;
const ABLATION_DATA_SEED: u64 = 11;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Check + 'a>);

fn root() -> PathBuf {
    let up = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    up.canonicalize().unwrap_or(up)
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

/// Writes an archive from a generator TOML under `configs/`.
fn generate_from(config: &str, seed: u64, count: usize, out: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(root().join("configs").join(config)).map_err(e)?;
    let mut cfg: GenerateConfig = toml::from_str(&text).map_err(e)?;
    cfg.master_seed = seed;
    let fonts = FontInventory::load_dir(bundled_font_dir()).map_err(e)?;
    let corpus = Corpus::builtin();
    let compositor = Compositor::new(cfg.composite.clone());
    let generator = Generator {
        corpus: &corpus,
        fonts: &fonts,
        compositor: &compositor,
        config: &cfg,
    };
    generate_dataset(count, out, &generator).map_err(e)?;
    Ok(())
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn loss_trace(log: &Path) -> Result<Vec<f64>, String> {
    let text = std::fs::read_to_string(log).map_err(|err| format!("{}: {err}", log.display()))?;
    let mut totals = Vec::new();
    for line in text.lines() {
        if let LogRecord::Iter { total, .. } = serde_json::from_str(line).map_err(e)? {
            totals.push(total);
        }
    }
    Ok(totals)
}

/// Re-evaluates the run in `run_dir` on the 32-sample archive and inspects its loss trace.
fn overfit_check(run_dir: &Path, scratch: &Path, data: Option<&Path>) -> Check {
    let data = match data {
        Some(d) => d.to_path_buf(),
        None => {
            let d = scratch.join("overfit-data");
            generate_from("desk_data.toml", OVERFIT_DATA_SEED, OVERFIT_SAMPLES, &d)?;
            d
        }
    };
    let samples = load_archive(&data, None).map_err(e)?;
    let (model, cfg, iterations) = load_checkpoint(&run_dir.join(FINAL_CHECKPOINT)).map_err(e)?;
    let refs: Vec<_> = samples.iter().collect();
    let report = evaluate_model(&model, &refs, cfg.train.batch).map_err(e)?;
    let totals = loss_trace(&run_dir.join(LOG_FILE))?;
    let detail = format!(
        "train-split fgIoU {:.2} F {:.3} on {} samples of {}x{} after {iterations} iterations",
        report.fg_iou,
        report.f_score,
        samples.len(),
        samples[0].image.height(),
        samples[0].image.width()
    );
    if samples.len() != OVERFIT_SAMPLES || samples[0].image.dims() != (128, 128) {
        return Err(format!("wrong archive: {detail}"));
    }
    if iterations > OVERFIT_MAX_ITERATIONS || cfg.data.val_fraction != 0.0 {
        return Err(format!("run does not follow the protocol: {detail}"));
    }
    if totals.len() != iterations || totals.len() < 200 {
        return Err(format!("log has {} iteration records for {iterations} iterations", totals.len()));
    }
    let (head, tail) = (median(&totals[..100]), median(&totals[totals.len() - 100..]));
    if head <= tail {
        return Err(format!("loss median did not drop ({head:.3} -> {tail:.3}); {detail}"));
    }
    if report.fg_iou < OVERFIT_TARGET {
        return Err(format!("{detail} < {OVERFIT_TARGET}"));
    }
    Ok(format!("{detail}; median loss {head:.2} -> {tail:.2}"))
}

fn run_overfit(scratch: &Path) -> Check {
    let data = scratch.join("overfit-data");
    generate_from("desk_data.toml", OVERFIT_DATA_SEED, OVERFIT_SAMPLES, &data)?;
    let mut cfg = RunConfig::load(&root().join("configs/overfit.toml")).map_err(e)?;
    cfg.data.path = data.clone();
    let out = scratch.join("overfit-run");
    let started = Instant::now();
    train(&cfg, &out, &mut |r| {
        if let LogRecord::Val { iter, fg_iou, .. } = r {
            eprintln!("  overfit iter {iter}: fgIoU {fg_iou:.2}");
        }
    })
    .map_err(e)?;
    let secs = started.elapsed().as_secs_f64();
    overfit_check(&out, scratch, Some(&data)).map(|d| format!("{d}; trained in {:.1} min", secs / 60.0))
}

fn ablation_check(report: &AblationReport) -> Check {
    let row = |name: &str| report.row(name).ok_or_else(|| format!("report has no `{name}` row"));
    let (base, lmq, full) = (row("baseline")?, row("+lmq")?, row("+lmq+skeleton")?);
    if report.samples != ABLATION_SAMPLES || report.val_samples == 0 {
        return Err(format!("{} samples, {} held out", report.samples, report.val_samples));
    }
    for r in [base, lmq, full] {
        if r.seeds.len() < ABLATION_SEEDS.len() {
            return Err(format!("{}: only {} seeds", r.variant.name, r.seeds.len()));
        }
    }
    let fmt = |r: &textseg_core::train::AblationRow| {
        format!("{} {:.2}±{:.2}", r.variant.name, r.fg_iou.mean, r.fg_iou.std)
    };
    let ordering = if base.fg_iou.mean < lmq.fg_iou.mean && lmq.fg_iou.mean < full.fg_iou.mean {
        "baseline < +lmq < +lmq+skeleton holds"
    } else {
        "baseline < +lmq < +lmq+skeleton does not hold"
    };
    let detail = format!(
        "held-out fgIoU over {} seeds on {} held-out of {}: {}, {}, {}; {ordering}",
        full.seeds.len(),
        report.val_samples,
        report.samples,
        fmt(base),
        fmt(lmq),
        fmt(full)
    );
    if full.fg_iou.mean >= base.fg_iou.mean {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stored_ablation() -> Check {
    let path = root().join("results/ablation/report.json");
    let text = std::fs::read_to_string(&path).map_err(|err| format!("{}: {err}", path.display()))?;
    let report: AblationReport = serde_json::from_str(&text).map_err(e)?;
    ablation_check(&report).map(|d| format!("{d} (stored report)"))
}

fn run_ablation(scratch: &Path) -> Check {
    let data = scratch.join("ablation-data");
    generate_from("desk_data.toml", ABLATION_DATA_SEED, ABLATION_SAMPLES, &data)?;
    let mut cfg = RunConfig::load(&root().join("configs/ablation.toml")).map_err(e)?;
    cfg.data.path = data.clone();
    let samples = load_archive(&data, None).map_err(e)?;
    let variants = preset("modules", &cfg.ablation).map_err(e)?;
    let report = ablate(&cfg, &variants, &ABLATION_SEEDS, &samples, &scratch.join("ablation-runs"), &mut |n, s, r| {
        if let LogRecord::Val { iter, fg_iou, .. } = r {
            eprintln!("  {n} seed {s} iter {iter}: fgIoU {fg_iou:.2}");
        }
    })
    .map_err(e)?;
    ablation_check(&report)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let flag = |f: &str| args.iter().any(|a| a == f);
    let scratch = tempfile::tempdir().expect("scratch dir");
    let sp = scratch.path();

    let mut criteria: Vec<Criterion<'_>> = vec![
        ("gradient suite", Box::new(common::gradient_suite)),
        ("LMQ reduction", Box::new(|| common::lmq_reduction(20))),
        ("masked-attention identities", Box::new(common::attention_identities)),
        ("Zhang-Suen suite", Box::new(|| common::zhang_suen_suite(250))),
        ("metric oracle", Box::new(|| common::metric_oracle(50))),
        ("matching oracle", Box::new(|| common::matching_oracle(100))),
        ("mask render bounds", Box::new(|| common::render_bounds(1000, sp))),
    ];
    if flag("--run-overfit") {
        criteria.push(("overfit smoke test", Box::new(|| run_overfit(sp))));
    } else {
        criteria.push((
            "overfit smoke test",
            Box::new(|| overfit_check(&root().join("results/overfit"), sp, None).map(|d| format!("{d} (stored run)"))),
        ));
    }
    if flag("--run-ablation") {
        criteria.push(("directional ablation", Box::new(|| run_ablation(sp))));
    } else {
        criteria.push(("directional ablation", Box::new(stored_ablation)));
    }

    let total = criteria.len();
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let result = check();
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                let mut lines = detail.lines();
                println!("FAIL {name} ({secs:.1}s): {}", lines.next().unwrap_or_default());
                for l in lines {
                    println!("    {l}");
                }
            }
        }
    }
    println!("acceptance: {}/{total} criteria pass", total - failed);
    if failed > 0 && flag("--strict") {
        std::process::exit(1);
    }
}
