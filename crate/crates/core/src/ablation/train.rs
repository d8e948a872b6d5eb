use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::objective::{combined_objective, select_params, Batch, LossParts, Objective, ObjectiveKind, SubsetKind};
use super::AblationError;
use crate::concepts::{
    build_ablation_dataset, fixed_prompts, AblationDataset, ConceptMap, PromptPool, RegPair, Source, Task, Vocab,
};
use crate::diffusion::{json_hash, sample_prompts, Checkpoint, NoiseDraw};
use crate::numcore::{derive_seed, rng_stream, AdamConfig, AdamState, ParamMap};

/// Learning-rate multiplier of the hinge baseline over the matching objectives.
const MAX_LOSS_LR_FACTOR: f64 = 100.0 / 3.0;

/// Optimization settings of one ablation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub steps: usize,
    pub batch: usize,
    /// Per-example learning rate; Adam runs at `lr * batch`.
    pub lr: f64,
    pub seed: u64,
}

impl AblateConfig {
    /// Batch 8, the objective's default step budget, and the tuned per-example
    /// learning rate for the subset.
    pub fn recommended(kind: ObjectiveKind, subset: SubsetKind, seed: u64) -> Self {
        let base = match subset {
            SubsetKind::Embed => 1.25e-3,
            SubsetKind::Xattn => 3.75e-4,
            SubsetKind::Full => 1.25e-4,
        };
        let lr = if kind == ObjectiveKind::MaxLoss { base * MAX_LOSS_LR_FACTOR } else { base };
        Self { steps: kind.default_steps(), batch: 8, lr, seed }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr * self.batch as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub ablation_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossRow>,
}

/// Loss trace as CSV with header `step,ablation_loss,reg_loss,total`.
pub fn trace_csv(trace: &[LossRow]) -> String {
    let mut s = String::from("step,ablation_loss,reg_loss,total\n");
    for r in trace {
        s.push_str(&format!("{},{:?},{:?},{:?}\n", r.step, r.ablation_loss, r.reg_loss, r.total));
    }
    s
}

/// Callback invoked after every optimizer step with `(step, params)`.
pub type Probe<'a> = &'a mut dyn FnMut(usize, &ParamMap);

/// Fine-tunes `subset` of the checkpoint on `dataset` under `objective`.
///
/// Each step draws `batch` tuples uniformly with replacement. Regularization
/// pairs come from the same rows unless the dataset carries explicit ones, in
/// which case an independent draw of the same size is taken from them.
pub fn ablate_run(
    ckpt: &Checkpoint,
    dataset: &AblationDataset,
    objective: &Objective,
    subset: SubsetKind,
    cfg: &AblateConfig,
    mut probe: Option<Probe<'_>>,
) -> Result<AblationOutcome, AblationError> {
    objective.validate()?;
    if dataset.provenance.checkpoint != ckpt.content_hash() {
        return Err(AblationError::Provenance("dataset was not generated from this checkpoint".into()));
    }
    if dataset.is_empty() || cfg.batch == 0 {
        return Err(AblationError::Config("ablation needs a non-empty dataset and batch >= 1".into()));
    }
    let sched = ckpt.noise_schedule()?;
    let frozen = ckpt.params.clone();
    let mut params = ckpt.params.clone();
    let mask = select_params(&params, subset)?;
    let reg_pool = dataset.regularization.clone();
    let mut rng = rng_stream(derive_seed(cfg.seed, &["ablate"]), 0);
    let mut adam = AdamState::new(AdamConfig::batch_scaled(cfg.lr, cfg.batch));
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let rows: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..dataset.len())).collect();
        let (reg_x, reg_c) = match &reg_pool {
            Some(pool) => {
                let r: Vec<&RegPair> = (0..cfg.batch).map(|_| &pool[rng.random_range(0..pool.len())]).collect();
                (r.iter().map(|p| p.x).collect(), r.iter().map(|p| p.c).collect())
            }
            None => (
                rows.iter().map(|&i| dataset.tuples[i].x).collect(),
                rows.iter().map(|&i| dataset.tuples[i].c).collect(),
            ),
        };
        let batch = Batch {
            x: rows.iter().map(|&i| dataset.tuples[i].x).collect(),
            c: rows.iter().map(|&i| dataset.tuples[i].c).collect(),
            cstar: rows.iter().map(|&i| dataset.tuples[i].cstar).collect(),
            reg_x,
            reg_c,
        };
        let draw = NoiseDraw::sample(cfg.batch, &sched, &mut rng);
        let reg_draw = NoiseDraw::sample(cfg.batch, &sched, &mut rng);
        let (LossParts { ablation, reg, total }, grads) = combined_objective(
            objective,
            ckpt.model(),
            &params,
            &frozen,
            &mask.names,
            &batch,
            &draw,
            &reg_draw,
            &sched,
        )
        .map_err(|e| AblationError::Training { step, source: e })?;
        if !total.is_finite() {
            return Err(AblationError::Training { step, source: crate::numcore::NumError::NonFinite { op: "loss" } });
        }
        adam.step(&mut params, &grads, None).map_err(|e| AblationError::Training { step, source: e })?;
        trace.push(LossRow { step: step + 1, ablation_loss: ablation, reg_loss: reg, total });
        if let Some(p) = probe.as_mut() {
            p(step + 1, &params);
        }
    }
    let run = serde_json::json!({
        "ablation": {
            "objective": objective,
            "subset": subset,
            "config": cfg,
            "dataset": json_hash(dataset),
            "task": dataset.provenance.task,
        }
    });
    Ok(AblationOutcome { checkpoint: ckpt.child(params, run), trace })
}

/// Union of datasets generated from one checkpoint, in the given order.
pub fn union_dataset(datasets: &[AblationDataset]) -> Result<AblationDataset, AblationError> {
    let first = datasets.first().ok_or_else(|| AblationError::Config("no datasets".into()))?;
    if datasets.len() == 1 {
        return Ok(first.clone());
    }
    if datasets.iter().any(|d| d.provenance.checkpoint != first.provenance.checkpoint) {
        return Err(AblationError::Provenance("datasets come from different checkpoints".into()));
    }
    let tuples = datasets.iter().flat_map(|d| d.tuples.iter().cloned()).collect();
    let regularization = if datasets.iter().any(|d| d.regularization.is_some()) {
        Some(datasets.iter().flat_map(|d| d.reg_pairs()).collect())
    } else {
        None
    };
    let mut provenance = first.provenance.clone();
    provenance.requested = datasets.iter().map(|d| d.provenance.requested).sum();
    provenance.filtered = datasets.iter().map(|d| d.provenance.filtered).sum();
    Ok(AblationDataset { provenance, tuples, regularization })
}

/// One run over the union of `datasets` with `cfg.steps` per dataset.
pub fn multi_concept_ablate(
    ckpt: &Checkpoint,
    datasets: &[AblationDataset],
    objective: &Objective,
    subset: SubsetKind,
    cfg: &AblateConfig,
) -> Result<AblationOutcome, AblationError> {
    let union = union_dataset(datasets)?;
    let scaled = AblateConfig { steps: cfg.steps * datasets.len(), ..cfg.clone() };
    ablate_run(ckpt, &union, objective, subset, &scaled, None)
}

/// Dataset for a composition task: subject-only prompts mapped to the
/// subject-in-style prompt, regularized on the subject itself and on the style
/// applied to every other style subject.
#[allow(clippy::too_many_arguments)]
pub fn composition_dataset(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    map: &ConceptMap,
    task: &Task,
    n: usize,
    steps: usize,
    pool: &PromptPool,
    seed: u64,
) -> Result<AblationDataset, AblationError> {
    let Task::Composition { subject, style } = task else {
        return Err(AblationError::Config("composition_dataset needs a composition task".into()));
    };
    let mut ds = build_ablation_dataset(ckpt, vocab, map, task, n, steps, pool, Source::Anchor, seed)?;
    let others: Vec<&String> = map.style_subjects.iter().filter(|s| *s != subject).collect();
    if others.is_empty() {
        return Err(AblationError::Config(format!("no subject other than {subject} renders {style}")));
    }
    let mut reg = ds.reg_pairs();
    let sched = ckpt.noise_schedule()?;
    let per = n.div_ceil(others.len());
    for (k, other) in others.iter().enumerate() {
        let mut rng = rng_stream(derive_seed(seed, &["composition", "reg", other]), 0);
        let ps = fixed_prompts(vocab, other, Some(style), per, pool, &mut rng)?;
        let xs = sample_prompts(
            ckpt.model(),
            &ckpt.params,
            &ps,
            steps,
            &sched,
            derive_seed(seed, &["composition", "reg-x", &k.to_string()]),
        )?;
        reg.extend(xs.into_iter().zip(ps).map(|(x, c)| RegPair { x, c }));
    }
    ds.regularization = Some(reg);
    Ok(ds)
}

/// Builds the composition dataset and ablates on it.
#[allow(clippy::too_many_arguments)]
pub fn compositional_ablate(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    map: &ConceptMap,
    task: &Task,
    n: usize,
    gen_steps: usize,
    pool: &PromptPool,
    objective: &Objective,
    subset: SubsetKind,
    cfg: &AblateConfig,
) -> Result<(AblationDataset, AblationOutcome), AblationError> {
    let ds = composition_dataset(ckpt, vocab, map, task, n, gen_steps, pool, cfg.seed)?;
    let out = ablate_run(ckpt, &ds, objective, subset, cfg, None)?;
    Ok((ds, out))
}
