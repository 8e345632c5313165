//! Run configurations, the named presets and the stage loop.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{collate_batch, DataConfig, Datasets, Sample, Vocab, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TeacherEmbeds, Tower, VisionConfig, VISION_PREFIX};
use crate::objective::{AlphaPolicy, LossBreakdown, SourceCategory};
use crate::seed::{derive_seed, rng_for};
use crate::train::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::train::optim::{AdamW, AdamWConfig};
use crate::train::schedule::ScheduleConfig;
use crate::train::step::{train_step, StepObjective};
use crate::transformer::{PositionScheme, TransformerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Language model on the text corpus.
    PretrainLm,
    /// Vision encoder + projector attached, everything trained on multimodal data.
    AdaptVlm,
    /// Continued multimodal fine-tuning with cross-entropy only.
    Finetune,
    /// Continued fine-tuning against the frozen language model.
    Distill,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainLm => "pretrain-lm",
            Stage::AdaptVlm => "adapt-vlm",
            Stage::Finetune => "finetune",
            Stage::Distill => "distill",
        }
    }

    /// Runs of the same family share their batch order.
    fn shuffle_family(self) -> &'static str {
        match self {
            Stage::PretrainLm => "pretrain",
            Stage::AdaptVlm => "adapt",
            Stage::Finetune | Stage::Distill => "stage3",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSubset {
    /// Language-heavy and OCR-heavy multimodal sources.
    #[default]
    Full,
    /// Language-heavy multimodal sources only.
    Lang,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub stage: Stage,
    pub seed: u64,
    pub subset: DataSubset,
    pub batch_size: usize,
    pub total_steps: usize,
    pub max_grad_norm: f64,
    /// Stage 3 only: also update the vision encoder.
    pub train_vision: bool,
    /// Stage 3 only: add the text corpus to the training mix.
    pub mix_text: bool,
    /// Save a resumable checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    /// Run whose checkpoint initialises this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_from: Option<String>,
    /// Run whose checkpoint provides the frozen teacher.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<AlphaPolicy>,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

pub const PRESETS: [&str; 9] = [
    "pretrain-lm",
    "adapt-vlm",
    "ce-full",
    "ce-lang",
    "distill-full",
    "distill-lang",
    "selective-kd",
    "selective-kd-high",
    "selective-kd-low",
];

/// Model shared by every preset.
pub fn lab_model() -> ModelConfig {
    ModelConfig {
        decoder: TransformerConfig {
            n_layers: 2,
            d_model: 48,
            n_heads: 4,
            vocab_size: Vocab::get().len(),
            max_seq: 48,
            d_ff: 128,
            position: PositionScheme::Rotary,
            rope_base: 10_000.0,
        },
        vision: VisionConfig {
            image_size: IMAGE_SIZE,
            patch_size: 6,
            d_vis: 32,
            depth: 1,
            n_heads: 2,
            d_ff: 64,
        },
        teacher_embeds: TeacherEmbeds::Shared,
    }
}

/// Data sizes shared by every preset.
pub fn lab_data() -> DataConfig {
    DataConfig {
        text_train: 40_000,
        lang_mm_train: 4_000,
        ocr_train: 4_000,
        eval_per_task: 300,
        ..DataConfig::default()
    }
}

impl RunConfig {
    fn base(name: &str, stage: Stage) -> Self {
        Self {
            name: name.to_string(),
            stage,
            seed: 0,
            subset: DataSubset::Full,
            batch_size: 16,
            total_steps: 400,
            max_grad_norm: 1.0,
            train_vision: false,
            mix_text: false,
            checkpoint_every: 0,
            init_from: None,
            teacher_from: None,
            policy: None,
            schedule: ScheduleConfig {
                peak_lr: 3e-3,
                ..ScheduleConfig::default()
            },
            optimizer: AdamWConfig::default(),
            model: lab_model(),
            data: lab_data(),
        }
    }

    /// The named preset, or `Error::Config` for an unknown name.
    pub fn preset(name: &str) -> Result<Self> {
        let stage3 = |stage: Stage, subset: DataSubset, policy: Option<AlphaPolicy>| {
            let mut c = Self::base(name, stage);
            c.subset = subset;
            c.init_from = Some("adapt-vlm".into());
            if policy.is_some() {
                c.teacher_from = Some("pretrain-lm".into());
            }
            c.policy = policy;
            c
        };
        let cfg = match name {
            "pretrain-lm" => {
                let mut c = Self::base(name, Stage::PretrainLm);
                c.total_steps = 8000;
                c
            }
            "adapt-vlm" => {
                let mut c = Self::base(name, Stage::AdaptVlm);
                c.init_from = Some("pretrain-lm".into());
                c
            }
            "ce-full" => stage3(Stage::Finetune, DataSubset::Full, None),
            "ce-lang" => stage3(Stage::Finetune, DataSubset::Lang, None),
            "distill-full" => stage3(Stage::Distill, DataSubset::Full, Some(AlphaPolicy::uniform(0.5, 2.0)?)),
            "distill-lang" => stage3(Stage::Distill, DataSubset::Lang, Some(AlphaPolicy::uniform(0.5, 2.0)?)),
            "selective-kd" => stage3(Stage::Distill, DataSubset::Full, Some(AlphaPolicy::selective(0.7, 4.0)?)),
            // Interpolated: only "more teacher involvement" than the default is known.
            "selective-kd-high" => stage3(Stage::Distill, DataSubset::Full, Some(AlphaPolicy::selective(0.9, 4.0)?)),
            "selective-kd-low" => stage3(Stage::Distill, DataSubset::Full, Some(AlphaPolicy::selective(0.3, 2.0)?)),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Config(format!("run `{}`: {why}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad("name must be a plain directory name".into());
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive".into());
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive".into());
        }
        if !(self.schedule.peak_lr >= 0.0 && (0.0..=1.0).contains(&self.schedule.warmup_fraction)) {
            return bad("schedule out of range".into());
        }
        self.model.validate()?;
        match (self.stage, &self.policy) {
            (Stage::Distill, None) => return bad("distill stage needs a policy".into()),
            (Stage::Distill, Some(p)) => p.validate()?,
            (_, Some(_)) => return bad(format!("{} stage takes no policy", self.stage)),
            _ => {}
        }
        let needs_init = self.stage != Stage::PretrainLm;
        if needs_init != self.init_from.is_some() {
            return bad(format!("{} stage {} init_from", self.stage, if needs_init { "needs" } else { "takes no" }));
        }
        let needs_teacher = self.stage == Stage::Distill;
        if needs_teacher != self.teacher_from.is_some() {
            return bad(format!("{} stage {} teacher_from", self.stage, if needs_teacher { "needs" } else { "takes no" }));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise run config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parameter names updated by this run.
    pub fn is_trainable(&self, name: &str) -> bool {
        match self.stage {
            Stage::PretrainLm | Stage::AdaptVlm => true,
            Stage::Finetune | Stage::Distill => self.train_vision || !name.starts_with(VISION_PREFIX),
        }
    }

    fn training_pool<'d>(&self, data: &'d Datasets) -> Vec<&'d Sample> {
        match self.stage {
            Stage::PretrainLm => data.text_train.iter().collect(),
            Stage::AdaptVlm => data.lang_mm_train.iter().chain(&data.ocr_train).collect(),
            Stage::Finetune | Stage::Distill => {
                let mut pool: Vec<&Sample> = data.lang_mm_train.iter().collect();
                if self.subset == DataSubset::Full {
                    pool.extend(&data.ocr_train);
                }
                if self.mix_text {
                    pool.extend(&data.text_train);
                }
                pool
            }
        }
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_toml(s)
    }
}

pub const METRICS_HEADER: &str =
    "step,lr,loss_combined,loss_soft_lang,loss_soft_ocr,loss_hard_lang,loss_hard_ocr,grad_norm,tokens_counted";

/// One metrics-log row. Per-category losses are means over that category's
/// counted positions in the batch (0 when it has none).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss_combined: f64,
    pub loss_soft_lang: f64,
    pub loss_soft_ocr: f64,
    pub loss_hard_lang: f64,
    pub loss_hard_ocr: f64,
    pub grad_norm: f64,
    pub tokens_counted: usize,
}

impl MetricsRow {
    pub fn from_breakdown(step: usize, lr: f64, b: &LossBreakdown, grad_norm: f64) -> Self {
        let lang = b.category(SourceCategory::LanguageHeavy);
        let ocr = b.category(SourceCategory::OcrHeavy);
        Self {
            step,
            lr,
            loss_combined: b.combined,
            loss_soft_lang: lang.soft_mean(),
            loss_soft_ocr: ocr.soft_mean(),
            loss_hard_lang: lang.hard_mean(),
            loss_hard_ocr: ocr.hard_mean(),
            grad_norm,
            tokens_counted: b.counted,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.loss_combined,
            self.loss_soft_lang,
            self.loss_soft_ocr,
            self.loss_hard_lang,
            self.loss_hard_ocr,
            self.grad_norm,
            self.tokens_counted
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!("metrics row has {} fields: `{line}`", f.len())));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| Error::Format(format!("metrics field {i}: {e}")));
        let int = |i: usize| f[i].parse::<usize>().map_err(|e| Error::Format(format!("metrics field {i}: {e}")));
        Ok(Self {
            step: int(0)?,
            lr: num(1)?,
            loss_combined: num(2)?,
            loss_soft_lang: num(3)?,
            loss_soft_ocr: num(4)?,
            loss_hard_lang: num(5)?,
            loss_hard_ocr: num(6)?,
            grad_norm: num(7)?,
            tokens_counted: int(8)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        _ => return Err(Error::Format(format!("{}: missing metrics header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse).collect()
}

/// Batch order: epoch `e` visits the pool in a permutation drawn from
/// `(seed, family, e)`, so the order depends only on the step index.
struct BatchPlan {
    seed: u64,
    n: usize,
    batch_size: usize,
    perms: HashMap<usize, Vec<usize>>,
}

impl BatchPlan {
    fn new(cfg: &RunConfig, n: usize) -> Self {
        Self {
            seed: derive_seed(cfg.seed, &format!("shuffle/{}", cfg.stage.shuffle_family())),
            n,
            batch_size: cfg.batch_size,
            perms: HashMap::new(),
        }
    }

    fn perm(&mut self, epoch: usize) -> &[usize] {
        let (seed, n) = (self.seed, self.n);
        self.perms.entry(epoch).or_insert_with(|| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng_for(seed, &format!("epoch/{epoch}")));
            p
        })
    }

    /// Pool indices for 1-based step `k`.
    fn indices(&mut self, k: usize) -> Vec<usize> {
        let start = (k - 1) * self.batch_size;
        let out = (start..start + self.batch_size)
            .map(|p| {
                let (epoch, i) = (p / self.n, p % self.n);
                self.perm(epoch)[i]
            })
            .collect();
        let oldest = start / self.n;
        self.perms.retain(|&e, _| e >= oldest);
        out
    }
}

/// Checkpoints a stage may need besides its own.
#[derive(Clone, Debug, Default)]
pub struct StageInputs {
    pub init: Option<Checkpoint>,
    pub teacher: Option<Checkpoint>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from `<run_dir>/checkpoint` when it holds an unfinished run.
    pub resume: bool,
    /// Stop (with a resumable checkpoint) once this many steps are done.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: Vec<MetricsRow>,
    pub tower: Tower,
    pub step: usize,
    pub complete: bool,
    /// Teacher parameter checksum before and after the stage.
    pub teacher_checksums: Option<(String, String)>,
    /// Largest number of teacher-graph nodes that could take a gradient on any step.
    pub teacher_trainable_nodes: usize,
    pub skipped_steps: usize,
}

pub fn metrics_path(run_dir: &Path) -> PathBuf {
    run_dir.join("metrics.csv")
}

pub fn checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoint")
}

fn initial_tower(cfg: &RunConfig, inputs: &StageInputs) -> Result<Tower> {
    let need = |what: &str| {
        Error::MissingPrerequisite(format!(
            "{} stage `{}` needs the {what} checkpoint",
            cfg.stage, cfg.name
        ))
    };
    let from_ckpt = |c: &Checkpoint| -> Result<Tower> {
        if c.model != cfg.model {
            return Err(Error::Config(format!(
                "checkpoint of `{}` was trained with a different model config than `{}`",
                c.run_name, cfg.name
            )));
        }
        if !c.is_complete() {
            return Err(Error::MissingPrerequisite(format!(
                "run `{}` stopped at step {} of {}",
                c.run_name, c.step, c.total_steps
            )));
        }
        Tower::from_params(&c.model, c.params.clone())
    };
    match cfg.stage {
        Stage::PretrainLm => Tower::new_language(&cfg.model, &mut rng_for(cfg.seed, "init/decoder")),
        Stage::AdaptVlm => {
            let mut t = from_ckpt(inputs.init.as_ref().ok_or_else(|| need(cfg.init_from.as_deref().unwrap_or("pretrain-lm")))?)?;
            if t.has_vision() {
                return Err(Error::Config("adapt-vlm expects a language-only checkpoint".into()));
            }
            t.attach_vision(&mut rng_for(cfg.seed, "init/vision"))?;
            Ok(t)
        }
        Stage::Finetune | Stage::Distill => {
            let t = from_ckpt(inputs.init.as_ref().ok_or_else(|| need(cfg.init_from.as_deref().unwrap_or("adapt-vlm")))?)?;
            if !t.has_vision() {
                return Err(Error::Config(format!("{} stage needs an adapted multimodal checkpoint", cfg.stage)));
            }
            Ok(t)
        }
    }
}

fn teacher_tower(cfg: &RunConfig, inputs: &StageInputs) -> Result<Option<Tower>> {
    if cfg.stage != Stage::Distill {
        return Ok(None);
    }
    let c = inputs.teacher.as_ref().ok_or_else(|| {
        Error::MissingPrerequisite(format!(
            "distill stage `{}` needs the teacher checkpoint `{}`",
            cfg.name,
            cfg.teacher_from.as_deref().unwrap_or("pretrain-lm")
        ))
    })?;
    if c.model.decoder != cfg.model.decoder {
        return Err(Error::Config("teacher decoder config differs from the student's".into()));
    }
    Ok(Some(Tower::from_params(&c.model, c.params.clone())?))
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<fs::File> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.to_csv())?;
    }
    f.flush()?;
    Ok(f)
}

/// Runs (or resumes) one stage, writing `metrics.csv` and `checkpoint/`
/// under `run_dir`.
pub fn run_stage(
    cfg: &RunConfig,
    data: &Datasets,
    inputs: &StageInputs,
    run_dir: &Path,
    opts: &RunOptions,
) -> Result<RunResult> {
    cfg.validate()?;
    let config_text = cfg.to_toml()?;
    fs::create_dir_all(run_dir)?;
    let ckpt_dir = checkpoint_path(run_dir);
    let mpath = metrics_path(run_dir);

    let teacher = teacher_tower(cfg, inputs)?;
    let teacher_before = teacher.as_ref().map(|t| t.params.checksum());

    let resumed = if opts.resume && ckpt_dir.join("meta.json").exists() {
        let c = load_checkpoint(&ckpt_dir)?;
        if c.run_config != config_text {
            return Err(Error::Config(format!(
                "cannot resume `{}`: stored run config differs",
                cfg.name
            )));
        }
        Some(c)
    } else {
        None
    };

    let (mut tower, mut opt, start, mut metrics) = match resumed {
        Some(c) => {
            let rows: Vec<MetricsRow> = read_metrics(&mpath)?.into_iter().filter(|r| r.step <= c.step).collect();
            if rows.len() != c.step {
                return Err(Error::Format(format!(
                    "metrics log holds {} rows, checkpoint is at step {}",
                    rows.len(),
                    c.step
                )));
            }
            let tower = Tower::from_params(&c.model, c.params)?;
            let opt = c
                .optimizer
                .ok_or_else(|| Error::Checkpoint { path: ckpt_dir.clone(), reason: "no optimizer state".into() })?;
            (tower, opt, c.step, rows)
        }
        None => {
            let tower = initial_tower(cfg, inputs)?;
            let opt = AdamW::new(cfg.optimizer.clone(), &tower.params);
            (tower, opt, 0, Vec::new())
        }
    };
    let mut log = write_metrics(&mpath, &metrics)?;

    let pool = cfg.training_pool(data);
    if pool.is_empty() {
        return Err(Error::Config(format!("run `{}` has no training samples", cfg.name)));
    }
    let mut plan = BatchPlan::new(cfg, pool.len());
    let trainable = |name: &str| cfg.is_trainable(name);
    let objective = match (&teacher, &cfg.policy) {
        (Some(t), Some(p)) => StepObjective::Distill { teacher: t, policy: p },
        _ => StepObjective::HardOnly,
    };
    let stop = opts.stop_after.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut teacher_nodes = 0;
    let mut skipped = 0;

    let save = |tower: &Tower, opt: &AdamW, step: usize, metrics: &[MetricsRow]| -> Result<()> {
        let mut snapshot = BTreeMap::new();
        if let Some(last) = metrics.last() {
            snapshot.insert("loss_combined".to_string(), last.loss_combined);
            snapshot.insert("grad_norm".to_string(), last.grad_norm);
            snapshot.insert("lr".to_string(), last.lr);
        }
        save_checkpoint(
            &Checkpoint {
                run_name: cfg.name.clone(),
                run_config: config_text.clone(),
                model: tower.config().clone(),
                step,
                total_steps: cfg.total_steps,
                metrics: snapshot,
                params: tower.params.clone(),
                optimizer: Some(opt.clone()),
            },
            &ckpt_dir,
        )
    };

    for k in start + 1..=stop {
        let lr = cfg.schedule.lr_at(k, cfg.total_steps);
        let idx = plan.indices(k);
        let samples: Vec<&Sample> = idx.iter().map(|&i| pool[i]).collect();
        let batch = collate_batch(&samples, cfg.model.decoder.max_seq)?;
        let out = train_step(&mut tower, &batch, &objective, &trainable, &mut opt, lr, cfg.max_grad_norm)?;
        teacher_nodes = teacher_nodes.max(out.teacher_trainable_nodes);
        if out.skipped.is_some() {
            skipped += 1;
        }
        let row = MetricsRow::from_breakdown(k, lr, &out.breakdown, out.grad_norm);
        writeln!(log, "{}", row.to_csv())?;
        log.flush()?;
        metrics.push(row);
        if cfg.checkpoint_every > 0 && k % cfg.checkpoint_every == 0 && k < stop {
            save(&tower, &opt, k, &metrics)?;
        }
        if k % 100 == 0 {
            log::info!("{} step {k}/{} loss {:.4}", cfg.name, cfg.total_steps, metrics[k - 1].loss_combined);
        }
    }
    let step = stop.max(start);
    save(&tower, &opt, step, &metrics)?;

    let teacher_checksums = match (teacher_before, &teacher) {
        (Some(before), Some(t)) => {
            let after = t.params.checksum();
            if after != before {
                return Err(Error::Config("teacher parameters changed during distillation".into()));
            }
            Some((before, after))
        }
        _ => None,
    };
    Ok(RunResult {
        metrics,
        tower,
        step,
        complete: step >= cfg.total_steps,
        teacher_checksums,
        teacher_trainable_nodes: teacher_nodes,
        skipped_steps: skipped,
    })
}
