//! One function per subcommand plus the pipeline stages they share with `sweep`.

use std::path::{Path, PathBuf};

use ablate_core::ablation::{
    ablate_run, composition_dataset, multi_concept_ablate, trace_csv, AblationOutcome, Objective, SubsetKind,
};
use ablate_core::concepts::{
    build_ablation_dataset, build_memorization_dataset, AblationDataset, ConceptMap, MemorizationOptions, PromptPool,
    Source, Task, Vocab,
};
use ablate_core::diffusion::{pretrain, Checkpoint};
use ablate_core::eval::{full_report, sample_concept, ConceptRef, EvalReport};
use anyhow::Context as _;

use crate::config::{parse_subset, require_files, RunConfig};
use crate::error::{usage, Result};
use crate::manifest::{write_artifact, Record};

/// Directory holding `path`, for the manifest.
pub fn dir_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require_files(&[path])?;
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn load_dataset(path: &Path) -> Result<AblationDataset> {
    require_files(&[path])?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    AblationDataset::from_json(&text).map_err(|e| usage(format!("dataset {}: {e}", path.display())))
}

/// Records the concept map file, if any, as an input.
fn record_map(rec: &mut Record, cfg: &RunConfig) -> Result<()> {
    if cfg.concept_map != "default" {
        rec.input(Path::new(&cfg.concept_map))?;
    }
    Ok(())
}

fn source_name(s: Source) -> &'static str {
    match s {
        Source::Anchor => "anchor",
        Source::Target => "target",
    }
}

pub fn pretrain_stage(cfg: &RunConfig, map: &ConceptMap, vocab: &Vocab) -> Result<Checkpoint> {
    Ok(pretrain(map, vocab, cfg.model_config()?, cfg.schedule, &cfg.pretrain_config())?)
}

/// Dataset for `task`. Memorization and composition tasks fix their own
/// sources; the others use `source`.
pub fn dataset_stage(
    cfg: &RunConfig,
    ck: &Checkpoint,
    map: &ConceptMap,
    vocab: &Vocab,
    task: &Task,
    source: Source,
) -> Result<AblationDataset> {
    let (n, steps, seed) = (cfg.data.n, cfg.data.steps, cfg.seed);
    let pool = PromptPool::standard(vocab);
    Ok(match task {
        Task::Memorization { .. } => {
            build_memorization_dataset(ck, vocab, map, task, n, steps, &MemorizationOptions::default(), seed)?
        }
        Task::Composition { .. } => composition_dataset(ck, vocab, map, task, n, steps, &pool, seed)?,
        _ => build_ablation_dataset(ck, vocab, map, task, n, steps, &pool, source, seed)?,
    })
}

pub fn ablate_stage(
    ck: &Checkpoint,
    datasets: &[AblationDataset],
    objective: &Objective,
    subset: SubsetKind,
    cfg: &ablate_core::ablation::AblateConfig,
) -> Result<AblationOutcome> {
    Ok(match datasets {
        [one] => ablate_run(ck, one, objective, subset, cfg, None)?,
        many => multi_concept_ablate(ck, many, objective, subset, cfg)?,
    })
}

pub fn eval_stage(
    cfg: &RunConfig,
    ablated: &Checkpoint,
    pretrained: &Checkpoint,
    map: &ConceptMap,
    vocab: &Vocab,
    task: &Task,
    force: bool,
) -> Result<EvalReport> {
    Ok(full_report(ablated, pretrained, vocab, map, task, &cfg.metrics, cfg.seed, force)?)
}

pub fn cmd_pretrain(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let (map, vocab) = (cfg.concept_map()?, cfg.vocab());
    let out = out.unwrap_or_else(|| cfg.output.join("pretrained.json"));
    let mut rec = Record::start("pretrain", cfg);
    record_map(&mut rec, cfg)?;
    let ck = pretrain_stage(cfg, &map, &vocab)?;
    rec.output(write_artifact(&out, ck.to_json().as_bytes())?);
    rec.finish(&dir_of(&out))?;
    println!("{}\t{}", out.display(), ck.content_hash());
    Ok(())
}

pub fn cmd_gen_data(cfg: &RunConfig, ckpt: &Path, out: Option<PathBuf>) -> Result<()> {
    let (map, vocab) = (cfg.concept_map()?, cfg.vocab());
    let ck = load_checkpoint(ckpt)?;
    let task = cfg.task(&map)?;
    let source = cfg.source_for(cfg.objective()?.kind)?;
    let out = out.unwrap_or_else(|| cfg.output.join(format!("dataset-{}-{}.json", task.target(), source_name(source))));
    let mut rec = Record::start("gen-data", cfg);
    rec.input(ckpt)?;
    record_map(&mut rec, cfg)?;
    let ds = dataset_stage(cfg, &ck, &map, &vocab, &task, source)?;
    rec.output(write_artifact(&out, ds.to_json().as_bytes())?);
    rec.finish(&dir_of(&out))?;
    println!("{}\t{} tuples", out.display(), ds.len());
    Ok(())
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    ckpt: &Path,
    data: &[PathBuf],
    out: Option<PathBuf>,
    trace: Option<PathBuf>,
) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let datasets = data.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?;
    let objective = cfg.objective()?;
    let subset = parse_subset(&cfg.subset)?;
    let acfg = cfg.ablate_config(subset)?;
    let want = cfg.source_for(objective.kind)?;
    for (p, ds) in data.iter().zip(&datasets) {
        let fixed = matches!(ds.provenance.task, Task::Memorization { .. } | Task::Composition { .. });
        if !fixed && ds.provenance.source != want {
            eprintln!(
                "warning: {} holds {}-prompt samples; {} usually trains on {}-prompt samples",
                p.display(),
                source_name(ds.provenance.source),
                objective.kind,
                source_name(want)
            );
        }
    }
    let out = out.unwrap_or_else(|| cfg.output.join(format!("ablated-{}-{}.json", objective.kind, subset)));
    let trace = trace.unwrap_or_else(|| out.with_extension("loss.csv"));
    let mut rec = Record::start("ablate", cfg);
    rec.input(ckpt)?;
    for p in data {
        rec.input(p)?;
    }
    let outcome = ablate_stage(&ck, &datasets, &objective, subset, &acfg)?;
    rec.output(write_artifact(&out, outcome.checkpoint.to_json().as_bytes())?);
    rec.output(write_artifact(&trace, trace_csv(&outcome.trace).as_bytes())?);
    rec.finish(&dir_of(&out))?;
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.total);
    println!("{}\t{}\tfinal loss {last:.6}", out.display(), outcome.checkpoint.content_hash());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    cfg: &RunConfig,
    ckpt: &Path,
    concept: &str,
    style: Option<&str>,
    n: Option<usize>,
    steps: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (map, vocab) = (cfg.concept_map()?, cfg.vocab());
    let ck = load_checkpoint(ckpt)?;
    let c = match style {
        Some(s) => ConceptRef::styled(concept, s),
        None => ConceptRef::plain(concept),
    };
    let (n, steps) = (n.unwrap_or(cfg.metrics.samples), steps.unwrap_or(cfg.metrics.steps));
    if n == 0 || steps == 0 {
        return Err(usage("--n and --steps must be positive"));
    }
    let out = out.unwrap_or_else(|| cfg.output.join(format!("samples-{c}.csv")));
    let mut rec = Record::start("sample", &serde_json::json!({ "run": cfg, "concept": c, "n": n, "steps": steps }));
    rec.input(ckpt)?;
    let xs = sample_concept(&ck, &vocab, &map, &c, n, steps, cfg.seed)?;
    let mut csv = String::from("x,y\n");
    for x in &xs {
        csv.push_str(&format!("{:?},{:?}\n", x[0], x[1]));
    }
    rec.output(write_artifact(&out, csv.as_bytes())?);
    rec.finish(&dir_of(&out))?;
    println!("{}\t{n} samples", out.display());
    Ok(())
}

/// The task recorded in an ablated checkpoint's run description, if any.
fn recorded_task(ck: &Checkpoint) -> Option<Task> {
    serde_json::from_value(ck.config.run.get("ablation")?.get("task")?.clone()).ok()
}

pub fn cmd_eval(
    cfg: &RunConfig,
    ablated: &Path,
    pretrained: &Path,
    explicit_task: bool,
    force: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let (map, vocab) = (cfg.concept_map()?, cfg.vocab());
    let (a, p) = (load_checkpoint(ablated)?, load_checkpoint(pretrained)?);
    let task = match recorded_task(&a) {
        Some(t) if !explicit_task => t,
        _ => cfg.task(&map)?,
    };
    let out = out.unwrap_or_else(|| {
        let stem = ablated.file_stem().map_or("ablated".into(), |s| s.to_string_lossy().into_owned());
        cfg.output.join(format!("{stem}.report.json"))
    });
    let mut rec = Record::start("eval", &serde_json::json!({ "run": cfg, "task": task, "force": force }));
    rec.input(ablated)?;
    rec.input(pretrained)?;
    record_map(&mut rec, cfg)?;
    let report = eval_stage(cfg, &a, &p, &map, &vocab, &task, force)?;
    rec.output(write_artifact(&out, report.to_json().as_bytes())?);
    rec.output(write_artifact(&out.with_extension("csv"), report.to_csv().as_bytes())?);
    rec.finish(&dir_of(&out))?;
    print!("{}", crate::report::summary_csv(&[(out.display().to_string(), report)]));
    Ok(())
}
