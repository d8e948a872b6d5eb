//! `ablate`: pretrain, generate data, ablate, sample, evaluate, sweep and report.
//!
//! Settings resolve in the order flag, `ABLATE_SEED` (seed only), config file,
//! built-in default. Exit codes: 0 success, 1 runtime failure, 2 usage or
//! configuration error.

mod commands;
mod config;
mod error;
mod manifest;
mod report;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use ablate_core::ablation::{ObjectiveKind, SubsetKind};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use error::Result;

#[derive(Parser)]
#[command(name = "ablate", version, about = "Concept ablation experiments on a small 2-D diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed and ABLATE_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for default output paths and the manifest.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TaskArgs {
    /// Relation target of the concept map, e.g. grumpy, memo, vangogh, dog_vangogh.
    #[arg(long)]
    target: Option<String>,
    /// Replaces the relation's anchor concept.
    #[arg(long)]
    anchor: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// model, noise, reverse-kl or max-loss.
    #[arg(long, value_parser = parse_objective)]
    objective: Option<ObjectiveKind>,
    /// Parameter subset: embed, xattn or full.
    #[arg(long, value_parser = parse_subset)]
    params: Option<SubsetKind>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Per-example learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the regularization term.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a checkpoint on the concept map.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// Include the memorized concept in the training mix.
        #[arg(long, overrides_with = "no_memorize")]
        memorize: bool,
        #[arg(long, overrides_with = "memorize")]
        no_memorize: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate an ablation dataset from a checkpoint.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        /// Number of tuples.
        #[arg(long)]
        n: Option<usize>,
        /// Sampler steps for generation.
        #[arg(long)]
        gen_steps: Option<usize>,
        /// auto, anchor or target.
        #[arg(long)]
        source: Option<String>,
        /// Objective the dataset is for; decides the `auto` source.
        #[arg(long, value_parser = parse_objective)]
        objective: Option<ObjectiveKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on one dataset, or on the union of several.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Loss trace CSV; defaults to the checkpoint path with extension `loss.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Draw samples of a concept as x,y CSV.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        concept: String,
        #[arg(long)]
        style: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        /// Sampler steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare an ablated checkpoint with its pretrained parent.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ablated: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        /// Defaults to the task recorded in the ablated checkpoint.
        #[command(flatten)]
        task: TaskArgs,
        /// Evaluate checkpoints without a recorded common lineage.
        #[arg(long)]
        force: bool,
        /// Report JSON; the CSV goes next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the objective x subset grid, skipping completed cells.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Use this checkpoint instead of pretraining one.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Summarize reports (files, or directories searched for *report.json) as CSV.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_objective(s: &str) -> Result<ObjectiveKind, String> {
    s.parse().map_err(|e: ablate_core::ablation::AblationError| e.to_string())
}

fn parse_subset(s: &str) -> Result<SubsetKind, String> {
    s.parse().map_err(|e: ablate_core::ablation::AblationError| e.to_string())
}

fn base(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.output {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn apply_task(cfg: &mut RunConfig, t: &TaskArgs) -> bool {
    if let Some(x) = &t.target {
        cfg.task.target = x.clone();
        cfg.task.kind = None;
        cfg.task.anchor = None;
    }
    if let Some(a) = &t.anchor {
        cfg.task.anchor = Some(a.clone());
    }
    t.target.is_some() || t.anchor.is_some()
}

fn apply_train(cfg: &mut RunConfig, t: &TrainArgs) {
    if let Some(o) = t.objective {
        cfg.objective.kind = o.as_str().into();
    }
    if let Some(p) = t.params {
        cfg.subset = p.as_str().into();
    }
    if t.steps.is_some() {
        cfg.train.steps = t.steps;
    }
    if t.batch.is_some() {
        cfg.train.batch = t.batch;
    }
    if t.lr.is_some() {
        cfg.train.lr = t.lr;
    }
    if t.lambda.is_some() {
        cfg.objective.lambda = t.lambda;
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, steps, memorize, no_memorize, out } => {
            let mut cfg = base(&common)?;
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            if memorize {
                cfg.pretrain.memorize = true;
            }
            if no_memorize {
                cfg.pretrain.memorize = false;
            }
            cfg.validate()?;
            commands::cmd_pretrain(&cfg, out)
        }
        Command::GenData { common, ckpt, task, n, gen_steps, source, objective, out } => {
            let mut cfg = base(&common)?;
            apply_task(&mut cfg, &task);
            if let Some(n) = n {
                cfg.data.n = n;
            }
            if let Some(s) = gen_steps {
                cfg.data.steps = s;
            }
            if let Some(s) = source {
                cfg.data.source = s;
            }
            if let Some(o) = objective {
                cfg.objective.kind = o.as_str().into();
            }
            cfg.validate()?;
            commands::cmd_gen_data(&cfg, &ckpt, out)
        }
        Command::Ablate { common, ckpt, data, train, out, trace } => {
            let mut cfg = base(&common)?;
            apply_train(&mut cfg, &train);
            cfg.validate()?;
            commands::cmd_ablate(&cfg, &ckpt, &data, out, trace)
        }
        Command::Sample { common, ckpt, concept, style, n, steps, out } => {
            let cfg = base(&common)?;
            cfg.validate()?;
            commands::cmd_sample(&cfg, &ckpt, &concept, style.as_deref(), n, steps, out)
        }
        Command::Eval { common, ablated, pretrained, task, force, out } => {
            let mut cfg = base(&common)?;
            let explicit = apply_task(&mut cfg, &task);
            cfg.validate()?;
            commands::cmd_eval(&cfg, &ablated, &pretrained, explicit, force, out)
        }
        Command::Sweep { common, ckpt, task } => {
            let mut cfg = base(&common)?;
            apply_task(&mut cfg, &task);
            cfg.validate()?;
            sweep::cmd_sweep(&cfg, ckpt.as_deref())
        }
        Command::Report { inputs, out } => {
            let csv = report::summary_csv(&report::collect(&inputs)?);
            match out {
                Some(p) => {
                    manifest::write_artifact(&p, csv.as_bytes())?;
                }
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error::exit_code(&e))
        }
    }
}
