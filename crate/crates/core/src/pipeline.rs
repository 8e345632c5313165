//! Output-directory layout and the stage-by-stage orchestration shared by
//! the command line and the end-to-end tests.
//!
//! ```text
//! <out>/data/                     manifest.txt + record files
//! <out>/runs/<name>/config.toml   run configuration as used
//! <out>/runs/<name>/metrics.csv
//! <out>/runs/<name>/checkpoint/
//! <out>/eval/<name>.json          per-run task scores
//! <out>/report/recovery.csv       machine-readable report
//! <out>/report/recovery.txt       aligned table
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, Datasets, Manifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate, recovery_report, EvalResults, EvalSuite, RecoveryReport};
use crate::model::Tower;
use crate::train::{checkpoint_path, load_checkpoint, run_stage, RunConfig, RunOptions, RunResult, StageInputs};

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }

    pub fn eval_file(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(format!("{name}.json"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Which runs `eval` scores and how `report` reads them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub teacher_era: String,
    pub ft_baseline: String,
    /// Every run to score, baselines included.
    pub runs: Vec<String>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            teacher_era: "pretrain-lm".into(),
            ft_baseline: "ce-full".into(),
            runs: [
                "pretrain-lm",
                "adapt-vlm",
                "ce-full",
                "ce-lang",
                "distill-full",
                "distill-lang",
                "selective-kd",
                "selective-kd-high",
                "selective-kd-low",
            ]
            .map(String::from)
            .to_vec(),
            batch_size: 64,
        }
    }
}

impl EvalConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("eval config: {e}")))?;
        if cfg.batch_size == 0 {
            return Err(Error::Config("eval batch_size must be positive".into()));
        }
        for base in [&cfg.teacher_era, &cfg.ft_baseline] {
            if !cfg.runs.contains(base) {
                return Err(Error::Config(format!("eval runs must include the baseline `{base}`")));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn gen_data(layout: &Layout, seed: u64, cfg: &DataConfig) -> Result<Datasets> {
    let d = Datasets::generate(seed, cfg)?;
    d.save(&layout.data_dir())?;
    Ok(d)
}

/// Fails when the stored data was generated from a different configuration.
pub fn check_manifest(manifest: &Manifest, seed: u64, cfg: &DataConfig) -> Result<()> {
    let expected = Datasets::generate_manifest(seed, cfg)?;
    if &expected != manifest {
        return Err(Error::Config(
            "data directory was generated with a different seed or data config; rerun gen-data".into(),
        ));
    }
    Ok(())
}

pub fn load_data(layout: &Layout, seed: u64, cfg: &DataConfig) -> Result<Datasets> {
    let d = Datasets::load(&layout.data_dir())?;
    check_manifest(&d.manifest, seed, cfg)?;
    Ok(d)
}

fn prerequisite(layout: &Layout, needed_by: &RunConfig, run: &str) -> Result<crate::train::Checkpoint> {
    let dir = checkpoint_path(&layout.run_dir(run));
    if !dir.join("meta.json").exists() {
        return Err(Error::MissingPrerequisite(format!(
            "`{}` needs a finished `{run}` run (no checkpoint at {})",
            needed_by.name,
            dir.display()
        )));
    }
    let c = load_checkpoint(&dir)?;
    if !c.is_complete() {
        return Err(Error::MissingPrerequisite(format!(
            "`{}` needs a finished `{run}` run (stopped at step {} of {})",
            needed_by.name, c.step, c.total_steps
        )));
    }
    Ok(c)
}

pub fn stage_inputs(layout: &Layout, cfg: &RunConfig) -> Result<StageInputs> {
    let init = cfg.init_from.as_deref().map(|r| prerequisite(layout, cfg, r)).transpose()?;
    let teacher = cfg.teacher_from.as_deref().map(|r| prerequisite(layout, cfg, r)).transpose()?;
    Ok(StageInputs { init, teacher })
}

/// Checks prerequisites, loads data, writes `config.toml` and runs the stage.
pub fn train_run(layout: &Layout, cfg: &RunConfig, opts: &RunOptions) -> Result<RunResult> {
    cfg.validate()?;
    let inputs = stage_inputs(layout, cfg)?;
    let data = load_data(layout, cfg.seed, &cfg.data)?;
    let dir = layout.run_dir(&cfg.name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    run_stage(cfg, &data, &inputs, &dir, opts)
}

pub fn load_tower(layout: &Layout, run: &str) -> Result<Tower> {
    let dir = checkpoint_path(&layout.run_dir(run));
    if !dir.join("meta.json").exists() {
        return Err(Error::MissingPrerequisite(format!("no checkpoint for run `{run}` at {}", dir.display())));
    }
    let c = load_checkpoint(&dir)?;
    Tower::from_params(&c.model, c.params)
}

pub fn eval_runs(layout: &Layout, data: &Datasets, cfg: &EvalConfig) -> Result<Vec<EvalResults>> {
    let suite = EvalSuite::from_datasets(data);
    fs::create_dir_all(layout.root.join("eval"))?;
    let mut out = Vec::with_capacity(cfg.runs.len());
    for run in &cfg.runs {
        let tower = load_tower(layout, run)?;
        let r = evaluate(run, &tower, &suite, cfg.batch_size)?;
        let mut json = serde_json::to_string_pretty(&r)?;
        json.push('\n');
        fs::write(layout.eval_file(run), json)?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_eval(layout: &Layout, run: &str) -> Result<EvalResults> {
    let path = layout.eval_file(run);
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::MissingPrerequisite(format!("no evaluation results for `{run}` at {}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Builds the report from stored evaluation results and writes both renderings.
pub fn write_report(layout: &Layout, cfg: &EvalConfig) -> Result<RecoveryReport> {
    let results = cfg.runs.iter().map(|r| read_eval(layout, r)).collect::<Result<Vec<_>>>()?;
    let report = recovery_report(&results, &cfg.teacher_era, &cfg.ft_baseline)?;
    let dir = layout.report_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("recovery.csv"), report.render_csv())?;
    fs::write(dir.join("recovery.txt"), report.render_table())?;
    Ok(report)
}

pub fn report_paths(layout: &Layout) -> [PathBuf; 2] {
    let d = layout.report_dir();
    [d.join("recovery.csv"), d.join("recovery.txt")]
}

pub fn is_run_complete(layout: &Layout, run: &str) -> bool {
    let dir = checkpoint_path(&layout.run_dir(run));
    load_checkpoint(Path::new(&dir)).map(|c| c.is_complete()).unwrap_or(false)
}
