use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use kvdistill::data::Datasets;
use kvdistill::pipeline::{self, check_manifest, EvalConfig, Layout};
use kvdistill::selfcheck::run_selfcheck;
use kvdistill::train::{RunConfig, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "kvdistill", version, about = "KV-cache-sharing selective distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed stored in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root holding data/, runs/, eval/ and report/.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Built-in preset used when no --config is given.
    #[arg(long)]
    preset: Option<String>,
    /// Continue an interrupted run from its checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop after this many steps, leaving a resumable checkpoint.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and store every dataset split.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: language-model pretraining of the teacher.
    PretrainLm(TrainArgs),
    /// Stage 2: attach vision and fine-tune on multimodal data.
    AdaptVlm(TrainArgs),
    /// Stage 3: cross-entropy or distillation recovery run.
    Distill(TrainArgs),
    /// Score the configured runs on every evaluation task.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Build the recovery report from stored evaluation results.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in invariant and oracle checks.
    Selfcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn run_config(common: &Common, preset: Option<&str>, fallback: Option<&str>) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&common.config, preset.or(fallback)) {
        (Some(path), _) => RunConfig::from_toml(&read(path)?).with_context(|| format!("in {}", path.display()))?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => bail!("pass --config PATH or --preset NAME"),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn eval_config(common: &Common) -> anyhow::Result<EvalConfig> {
    match &common.config {
        Some(path) => Ok(EvalConfig::from_toml(&read(path)?).with_context(|| format!("in {}", path.display()))?),
        None => Ok(EvalConfig::default()),
    }
}

fn train(args: &TrainArgs, fallback: Option<&str>, stages: &[Stage]) -> anyhow::Result<()> {
    let cfg = run_config(&args.common, args.preset.as_deref(), fallback)?;
    if !stages.contains(&cfg.stage) {
        bail!("run `{}` is a {} stage; this subcommand runs {}", cfg.name, cfg.stage, stage_list(stages));
    }
    let layout = Layout::new(&args.common.out);
    let opts = RunOptions {
        resume: args.resume,
        stop_after: args.stop_after,
    };
    let r = pipeline::train_run(&layout, &cfg, &opts)?;
    let last = r.metrics.last().map_or(f64::NAN, |m| m.loss_combined);
    println!(
        "{}: step {}/{} loss {last:.4}{}",
        cfg.name,
        r.step,
        cfg.total_steps,
        if r.complete { "" } else { " (stopped early)" }
    );
    Ok(())
}

fn stage_list(stages: &[Stage]) -> String {
    stages.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" or ")
}

/// Loads the stored data, checking it against the teacher-era run's data config.
fn eval_data(layout: &Layout, cfg: &EvalConfig, seed: Option<u64>) -> anyhow::Result<Datasets> {
    let stored = layout.run_dir(&cfg.teacher_era).join("config.toml");
    let run = RunConfig::from_toml(&read(&stored)?)?;
    let data = Datasets::load(&layout.data_dir())?;
    check_manifest(&data.manifest, seed.unwrap_or(run.seed), &run.data)?;
    Ok(data)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = run_config(&common, None, Some("pretrain-lm"))?;
            let d = pipeline::gen_data(&Layout::new(&common.out), cfg.seed, &cfg.data)?;
            for e in &d.manifest.entries {
                println!("{:<16} {:>7} records", e.name, e.count);
            }
        }
        Command::PretrainLm(a) => train(&a, Some("pretrain-lm"), &[Stage::PretrainLm])?,
        Command::AdaptVlm(a) => train(&a, Some("adapt-vlm"), &[Stage::AdaptVlm])?,
        Command::Distill(a) => train(&a, None, &[Stage::Finetune, Stage::Distill])?,
        Command::Eval { common } => {
            let cfg = eval_config(&common)?;
            let layout = Layout::new(&common.out);
            let data = eval_data(&layout, &cfg, common.seed)?;
            for r in pipeline::eval_runs(&layout, &data, &cfg)? {
                let scores: Vec<String> = r
                    .tasks
                    .iter()
                    .map(|(t, s)| format!("{t} {}", s.score.map_or("NA".into(), |v| format!("{v:.4}"))))
                    .collect();
                println!("{:<18} {}", r.run, scores.join("  "));
            }
        }
        Command::Report { common } => {
            let cfg = eval_config(&common)?;
            let layout = Layout::new(&common.out);
            let report = pipeline::write_report(&layout, &cfg)?;
            print!("{}", report.render_table());
        }
        Command::Selfcheck { common } => {
            let results = run_selfcheck(common.seed.unwrap_or(0));
            for r in &results {
                println!("{}", r.line());
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
