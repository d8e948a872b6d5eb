//! Objective x subset grid with hash-keyed resumption.
//!
//! Layout under the output directory:
//! `pretrained.json`, `data-<source>.json`, `cells/<objective>-<subset>/`
//! holding `ablated.json`, `loss.csv`, `report.json` and `report.csv`, and
//! `summary.csv`. `.stamps/` holds one completion stamp per stage; a stage is
//! skipped when its stamp carries the same key and its outputs are intact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ablate_core::ablation::{ObjectiveKind, SubsetKind};
use ablate_core::concepts::{Source, Task};
use ablate_core::diffusion::json_hash;

use crate::commands::{ablate_stage, dataset_stage, eval_stage, load_checkpoint, load_dataset, pretrain_stage};
use crate::config::{parse_objective, parse_subset, RunConfig};
use crate::error::Result;
use crate::manifest::{write_artifact, Artifact, Record, Stamp};
use crate::report::summary_csv;

struct Stage {
    name: String,
    key: String,
}

impl Stage {
    fn stamp(&self, root: &Path) -> PathBuf {
        root.join(".stamps").join(format!("{}.json", self.name))
    }

    fn is_current(&self, root: &Path) -> bool {
        Stamp::is_current(&self.stamp(root), &self.key)
    }

    fn complete(&self, root: &Path, rec: Record) -> Result<()> {
        Stamp::write(&self.stamp(root), &self.key, rec.outputs())?;
        rec.finish(root)
    }
}

fn source_name(s: Source) -> &'static str {
    match s {
        Source::Anchor => "anchor",
        Source::Target => "target",
    }
}

pub fn cmd_sweep(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<()> {
    let (map, vocab) = (cfg.concept_map()?, cfg.vocab());
    let task = cfg.task(&map)?;
    let root = cfg.output.as_path();
    let kinds = cfg.sweep.objectives.iter().map(|s| parse_objective(s)).collect::<Result<Vec<_>>>()?;
    let subsets = cfg.sweep.subsets.iter().map(|s| parse_subset(s)).collect::<Result<Vec<_>>>()?;

    let (ck_path, ck) = match ckpt {
        Some(p) => (p.to_path_buf(), load_checkpoint(p)?),
        None => {
            let path = root.join("pretrained.json");
            let stage = Stage {
                name: "pretrain".into(),
                key: json_hash(&(cfg.model_config()?, cfg.schedule, cfg.pretrain_config(), &map)),
            };
            if stage.is_current(root) {
                eprintln!("pretrain: up to date");
            } else {
                let mut rec = Record::start("sweep pretrain", cfg);
                let ck = pretrain_stage(cfg, &map, &vocab)?;
                rec.output(write_artifact(&path, ck.to_json().as_bytes())?);
                stage.complete(root, rec)?;
                eprintln!("pretrain: done");
            }
            let ck = load_checkpoint(&path)?;
            (path, ck)
        }
    };

    // Memorization and composition datasets ignore the source, so one suffices.
    let fixed = matches!(task, Task::Memorization { .. } | Task::Composition { .. });
    let mut sources = BTreeMap::new();
    for &k in &kinds {
        let s = if fixed { Source::Anchor } else { cfg.source_for(k)? };
        sources.insert(source_name(s), s);
    }
    let mut datasets = BTreeMap::new();
    for (name, source) in sources {
        let path = root.join(format!("data-{name}.json"));
        let stage = Stage {
            name: format!("data-{name}"),
            key: json_hash(&(ck.content_hash(), &task, &cfg.data, cfg.seed, name)),
        };
        if stage.is_current(root) {
            eprintln!("data-{name}: up to date");
        } else {
            let mut rec = Record::start("sweep gen-data", cfg);
            rec.input(&ck_path)?;
            let ds = dataset_stage(cfg, &ck, &map, &vocab, &task, source)?;
            rec.output(write_artifact(&path, ds.to_json().as_bytes())?);
            stage.complete(root, rec)?;
            eprintln!("data-{name}: {} tuples", ds.len());
        }
        let hash = Artifact::of(&path)?.sha256;
        datasets.insert(name, (path.clone(), hash, load_dataset(&path)?));
    }

    let grid: Vec<(ObjectiveKind, SubsetKind)> =
        kinds.iter().flat_map(|&k| subsets.iter().map(move |&s| (k, s))).collect();
    let mut pending = Vec::new();
    for &(kind, subset) in &grid {
        let source = if fixed { Source::Anchor } else { cfg.source_for(kind)? };
        let (_, data_hash, _) = &datasets[source_name(source)];
        let objective = cfg.objective_of(kind)?;
        let acfg = cfg.ablate_config_of(kind, subset)?;
        let stage = Stage {
            name: format!("cell-{kind}-{subset}"),
            key: json_hash(&(ck.content_hash(), data_hash, &objective, subset, &acfg, &cfg.metrics, cfg.seed, &task)),
        };
        if stage.is_current(root) {
            eprintln!("{kind}/{subset}: up to date");
        } else {
            pending.push((kind, subset, source, stage));
        }
    }

    let cell = |i: usize| -> Result<()> {
        let (kind, subset, source, stage) = &pending[i];
        let (data_path, _, ds) = &datasets[source_name(*source)];
        let dir = cell_dir(root, *kind, *subset);
        let mut rec = Record::start(&format!("sweep cell {kind}/{subset}"), cfg);
        rec.input(&ck_path)?;
        rec.input(data_path)?;
        let out = ablate_stage(
            &ck,
            std::slice::from_ref(ds),
            &cfg.objective_of(*kind)?,
            *subset,
            &cfg.ablate_config_of(*kind, *subset)?,
        )?;
        rec.output(write_artifact(&dir.join("ablated.json"), out.checkpoint.to_json().as_bytes())?);
        rec.output(write_artifact(&dir.join("loss.csv"), ablate_core::ablation::trace_csv(&out.trace).as_bytes())?);
        let report = eval_stage(cfg, &out.checkpoint, &ck, &map, &vocab, &task, false)?;
        rec.output(write_artifact(&dir.join("report.json"), report.to_json().as_bytes())?);
        rec.output(write_artifact(&dir.join("report.csv"), report.to_csv().as_bytes())?);
        stage.complete(root, rec)?;
        eprintln!("{kind}/{subset}: done");
        Ok(())
    };
    // A failed cell does not stop the others; the sweep reports it at the end.
    let results = ablate_core::par::map_range(pending.len(), cell);
    let mut failed = Vec::new();
    for ((kind, subset, _, _), r) in pending.iter().zip(results) {
        if let Err(e) = r {
            eprintln!("{kind}/{subset}: failed: {e:#}");
            failed.push(format!("{kind}/{subset}"));
        }
    }

    let mut rec = Record::start("sweep summary", cfg);
    let mut reports = Vec::new();
    for &(kind, subset) in &grid {
        if failed.contains(&format!("{kind}/{subset}")) {
            continue;
        }
        let path = cell_dir(root, kind, subset).join("report.json");
        rec.input(&path)?;
        let r = ablate_core::eval::EvalReport::from_json(&std::fs::read_to_string(&path)?)?;
        reports.push((format!("{kind}-{subset}"), r));
    }
    let summary = summary_csv(&reports);
    rec.output(write_artifact(&root.join("summary.csv"), summary.as_bytes())?);
    rec.finish(root)?;
    print!("{summary}");
    if !failed.is_empty() {
        anyhow::bail!("{} of {} cells failed: {}", failed.len(), grid.len(), failed.join(", "));
    }
    Ok(())
}

fn cell_dir(root: &Path, kind: ObjectiveKind, subset: SubsetKind) -> PathBuf {
    root.join("cells").join(format!("{kind}-{subset}"))
}
