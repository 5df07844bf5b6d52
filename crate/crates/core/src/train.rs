//! Run configuration, the optimization loop, checkpoints, evaluation and the ablation harness.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::mix_seed;
use crate::data::{apply_augment, augment, load_archive, split, AugmentParams, SegSample};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossWeights, Target, Term, TermRecord};
use crate::metrics::{evaluate_pairs, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::pixel::{EMBED_STRIDE, EMBED_STRIDES, MAX_STRIDE};

pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channels: usize,
    pub num_layers: usize,
    pub num_queries: usize,
    /// Stride of the predicted masks, 4 or 2.
    pub mask_stride: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DecoderConfig::default();
        Self {
            channels: d.channel_dim,
            num_layers: d.num_layers,
            num_queries: d.num_queries,
            mask_stride: EMBED_STRIDE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub iterations: usize,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    pub val_every: usize,
    pub augment: bool,
    /// Apply the loss to every decoder layer, not only the last.
    pub deep_supervision: bool,
    pub loss: LossWeights,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            poly_power: 0.9,
            iterations: 2000,
            batch: 8,
            crop: 128,
            seed: 0,
            val_every: 500,
            augment: true,
            deep_supervision: true,
            loss: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    pub val_fraction: f64,
    /// Use only the first `limit` samples of the archive.
    pub limit: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data"),
            val_fraction: 0.1,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub lmq_enabled: bool,
    pub skeleton_enabled: bool,
    pub alpha: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            lmq_enabled: true,
            skeleton_enabled: true,
            alpha: 0.8,
        }
    }
}

/// Everything a training run needs, as read from a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            decoder: DecoderConfig {
                num_layers: self.model.num_layers,
                num_queries: self.model.num_queries,
                momentum_alpha: self.ablation.alpha,
                lmq_enabled: self.ablation.lmq_enabled,
                channel_dim: self.model.channels,
            },
            skeleton_enabled: self.ablation.skeleton_enabled,
            mask_stride: self.model.mask_stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", t.lr)));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(t.poly_power.is_finite() && t.poly_power >= 0.0) {
            return Err(Error::Config("poly_power must be >= 0".into()));
        }
        if t.crop == 0 || !t.crop.is_multiple_of(MAX_STRIDE) {
            return Err(Error::Config(format!("crop {} must be a positive multiple of {MAX_STRIDE}", t.crop)));
        }
        if t.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if t.val_every == 0 {
            return Err(Error::Config("val_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if !self.model.channels.is_multiple_of(4) {
            return Err(Error::Config("channels must be a multiple of 4".into()));
        }
        if !EMBED_STRIDES.contains(&self.model.mask_stride) {
            return Err(Error::Config(format!("mask_stride must be 2 or 4, got {}", self.model.mask_stride)));
        }
        t.loss.validate()?;
        self.model_config().decoder.validate()
    }
}

/// Polynomial decay: `lr · (1 − it/total)^power`.
pub fn poly_lr(base: f64, iteration: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - iteration as f64 / total as f64).max(0.0).powf(power)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Iter {
        iter: usize,
        lr: f64,
        total: f64,
        mask: f64,
        skeleton: f64,
        class: f64,
        terms: Vec<TermRecord>,
    },
    Val {
        iter: usize,
        split: String,
        images: usize,
        fg_iou: f64,
        f_score: f64,
        best: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_iteration: usize,
    pub best_fg_iou: f64,
    pub final_eval: EvalReport,
    /// Which samples the validation numbers were computed on.
    pub val_split: String,
    pub train_samples: usize,
    pub val_samples: usize,
}

/// The images and masks of a batch after augmentation or centre cropping.
pub fn prepare_batch(samples: &[&SegSample], config: &TrainSection, iteration: usize, seed: u64) -> Vec<SegSample> {
    samples
        .iter()
        .enumerate()
        .map(|(j, s)| {
            if config.augment {
                augment(s, mix_seed(seed, (iteration * config.batch + j) as u64), config.crop)
            } else {
                apply_augment(s, &AugmentParams::identity(s.image.dims(), config.crop), config.crop)
            }
        })
        .collect()
}

fn targets(batch: &[SegSample]) -> Vec<Target> {
    batch
        .iter()
        .map(|s| {
            let (masks, skeletons) = s.gt_masks();
            Target { masks, skeletons }
        })
        .collect()
}

/// Predicts every sample at full resolution and scores against its mask.
pub fn evaluate_model(model: &Model, samples: &[&SegSample], batch: usize) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut start = 0;
    while start < samples.len() {
        let dims = samples[start].image.dims();
        let mut end = start + 1;
        while end < samples.len() && end - start < batch.max(1) && samples[end].image.dims() == dims {
            end += 1;
        }
        let images: Vec<_> = samples[start..end].iter().map(|s| &s.image).collect();
        preds.extend(model.predict_masks(&images)?);
        start = end;
    }
    evaluate_pairs(
        samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| (crate::archive::sample_name(s.index), p, &s.mask)),
        false,
    )
}

fn metadata(config: &RunConfig, model: &Model, iteration: usize, fg_iou: f64) -> Result<HashMap<String, String>> {
    Ok(HashMap::from([
        ("config".to_owned(), config.to_toml()),
        ("model".to_owned(), serde_json::to_string(&model.config)?),
        ("iteration".to_owned(), iteration.to_string()),
        ("fg_iou".to_owned(), format!("{fg_iou}")),
    ]))
}

/// Builds a model from a checkpoint's stored configuration and loads its weights.
pub fn load_checkpoint(path: &Path) -> Result<(Model, RunConfig, usize)> {
    let meta = crate::params::read_metadata(path)?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{k}` metadata", path.display())))
    };
    let config = RunConfig::from_toml(field("config")?)?;
    let model_config: ModelConfig = serde_json::from_str(field("model")?)?;
    let iteration = field("iteration")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad iteration metadata".into()))?;
    let model = Model::new(&model_config, config.train.seed, DType::F32)?;
    model.load(path)?;
    Ok((model, config, iteration))
}

struct Logger {
    out: BufWriter<File>,
    path: PathBuf,
}

impl Logger {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path,
        })
    }

    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn check_finite(records: &[TermRecord], total: f64, iteration: usize) -> Result<()> {
    if let Some(r) = records.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::NonFiniteLoss {
            term: format!("{}[layer {}]", r.term.name(), r.layer),
            iteration,
        });
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "total".into(),
            iteration,
        });
    }
    Ok(())
}

/// Trains on `samples` and writes the log and checkpoints into `out_dir`. `progress` sees
/// every log record as it is written.
pub fn train_on(
    config: &RunConfig,
    samples: &[SegSample],
    out_dir: &Path,
    progress: &mut dyn FnMut(&LogRecord),
) -> Result<TrainSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let tc = &config.train;
    let (train_set, held_out) = split(samples, config.data.val_fraction);
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (val_set, val_split) = if held_out.is_empty() {
        (train_set.clone(), "train")
    } else {
        (held_out, "held_out")
    };

    let model = Model::new(&config.model_config(), tc.seed, DType::F32)?;
    let mut opt = AdamW::new(
        model.params.vars(),
        ParamsAdamW {
            lr: tc.lr,
            weight_decay: tc.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut log = Logger::create(out_dir.join(LOG_FILE))?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let mut best: Option<(usize, f64)> = None;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, 0xba7c4));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let validate = |model: &Model, iter: usize, log: &mut Logger, best: &mut Option<(usize, f64)>| -> Result<(EvalReport, LogRecord)> {
        let report = evaluate_model(model, &val_set, tc.batch)?;
        let improved = best.is_none_or(|(_, b)| report.fg_iou > b);
        if improved {
            *best = Some((iter, report.fg_iou));
            model.save(&best_path, metadata(config, model, iter, report.fg_iou)?)?;
        }
        let rec = LogRecord::Val {
            iter,
            split: val_split.to_owned(),
            images: report.images,
            fg_iou: report.fg_iou,
            f_score: report.f_score,
            best: improved,
        };
        log.write(&rec)?;
        log.flush()?;
        Ok((report, rec))
    };

    let mut last_eval = None;
    for iter in 0..tc.iterations {
        let mut picked = Vec::with_capacity(tc.batch);
        while picked.len() < tc.batch {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(train_set[order[cursor]]);
            cursor += 1;
        }
        let batch = prepare_batch(&picked, tc, iter, tc.seed);
        let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
        let out = model.forward(&model.batch_tensor(&images)?)?;
        let preds = if tc.deep_supervision {
            &out.predictions[..]
        } else {
            &out.predictions[out.predictions.len() - 1..]
        };
        let loss = total_loss(preds, &targets(&batch), &tc.loss)?;
        let total = loss.total_value()?;
        check_finite(&loss.records, total, iter)?;

        let lr = poly_lr(tc.lr, iter, tc.iterations, tc.poly_power);
        opt.set_learning_rate(lr);
        opt.backward_step(&loss.total)?;

        let rec = LogRecord::Iter {
            iter,
            lr,
            total,
            mask: loss.term_sum(Term::Mask),
            skeleton: loss.term_sum(Term::Skeleton),
            class: loss.term_sum(Term::Class),
            terms: loss.records,
        };
        log.write(&rec)?;
        progress(&rec);

        let done = iter + 1;
        if done % tc.val_every == 0 || done == tc.iterations {
            let (report, rec) = validate(&model, done, &mut log, &mut best)?;
            progress(&rec);
            last_eval = Some((done, report));
        }
    }
    let final_eval = match last_eval {
        Some((it, r)) if it == tc.iterations => r,
        _ => {
            let (report, rec) = validate(&model, tc.iterations, &mut log, &mut best)?;
            progress(&rec);
            report
        }
    };
    model.save(&final_path, metadata(config, &model, tc.iterations, final_eval.fg_iou)?)?;
    log.flush()?;
    let (best_iteration, best_fg_iou) = best.expect("validated at least once");
    Ok(TrainSummary {
        iterations: tc.iterations,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        best_iteration,
        best_fg_iou,
        final_eval,
        val_split: val_split.to_owned(),
        train_samples: train_set.len(),
        val_samples: val_set.len(),
    })
}

/// Loads the archive named in the config and trains.
pub fn train(config: &RunConfig, out_dir: &Path, progress: &mut dyn FnMut(&LogRecord)) -> Result<TrainSummary> {
    let samples = load_archive(&config.data.path, config.data.limit)?;
    train_on(config, &samples, out_dir, progress)
}

/// One ablation configuration: the flags that differ from the base run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub lmq_enabled: bool,
    pub skeleton_enabled: bool,
    pub alpha: f64,
}

pub const ALPHA_SWEEP: [f64; 7] = [0.1, 0.2, 0.4, 0.5, 0.6, 0.8, 0.9];

/// Named variant lists: `modules` (baseline, +LMQ, +LMQ+skeleton) and `alpha`.
pub fn preset(name: &str, base: &AblationSection) -> Result<Vec<Variant>> {
    let v = |name: &str, lmq, skel, alpha| Variant {
        name: name.to_owned(),
        lmq_enabled: lmq,
        skeleton_enabled: skel,
        alpha,
    };
    match name {
        "modules" => Ok(vec![
            v("baseline", false, false, base.alpha),
            v("+lmq", true, false, base.alpha),
            v("+lmq+skeleton", true, true, base.alpha),
        ]),
        "alpha" => Ok(ALPHA_SWEEP
            .iter()
            .map(|&a| v(&format!("alpha={a}"), true, base.skeleton_enabled, a))
            .collect()),
        other => Err(Error::Config(format!("unknown ablation preset `{other}` (expected modules or alpha)"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            values: values.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub fg_iou: Spread,
    pub f_score: Spread,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base_config: String,
    pub samples: usize,
    pub val_samples: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }
}

/// Trains every variant under every seed on the same samples and scores the final
/// checkpoints on the held-out split. Runs land in `out_dir/<variant>/seed<k>`.
pub fn ablate(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    samples: &[SegSample],
    out_dir: &Path,
    progress: &mut dyn FnMut(&str, u64, &LogRecord),
) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    let mut val_samples = 0;
    for v in variants {
        let mut ious = Vec::new();
        let mut fs = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            cfg.ablation = AblationSection {
                lmq_enabled: v.lmq_enabled,
                skeleton_enabled: v.skeleton_enabled,
                alpha: v.alpha,
            };
            let dir = out_dir.join(sanitize(&v.name)).join(format!("seed{seed}"));
            let summary = train_on(&cfg, samples, &dir, &mut |r| progress(&v.name, seed, r))?;
            val_samples = summary.val_samples;
            ious.push(summary.final_eval.fg_iou);
            fs.push(summary.final_eval.f_score);
        }
        rows.push(AblationRow {
            variant: v.clone(),
            seeds: seeds.to_vec(),
            fg_iou: Spread::of(&ious),
            f_score: Spread::of(&fs),
        });
    }
    Ok(AblationReport {
        base_config: base.to_toml(),
        samples: samples.len(),
        val_samples,
        rows,
    })
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}
