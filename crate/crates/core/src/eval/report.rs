use std::fmt;

use serde::{Deserialize, Serialize};

use super::metrics::{bayes_accuracy, copy_rate, mean_log_density, mmd_null_quantile, mmd_poly, DEFAULT_SIGMA_SIM};
use super::EvalError;
use crate::concepts::{fixed_prompts, make_prompts, ConceptMap, Mixture, Prompt, PromptPool, Task, Vocab};
use crate::diffusion::{embedding_rows, sample_ancestral, sample_prompts, Checkpoint, NetEps, RowCond};
use crate::numcore::{derive_seed, normal, rng_stream, ParamMap};
use crate::par;

/// A subject optionally rendered in a style.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptRef {
    pub subject: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
}

impl ConceptRef {
    pub fn plain(subject: &str) -> Self {
        Self { subject: subject.into(), style: None }
    }

    pub fn styled(subject: &str, style: &str) -> Self {
        Self { subject: subject.into(), style: Some(style.into()) }
    }

    pub fn density(&self, map: &ConceptMap) -> Result<Mixture, EvalError> {
        Ok(map.density(&self.subject, self.style.as_deref())?)
    }
}

impl fmt::Display for ConceptRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.style {
            Some(s) => write!(f, "{}+{}", self.subject, s),
            None => f.write_str(&self.subject),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub samples: usize,
    pub steps: usize,
    pub sigma_sim: f64,
    pub threshold: f64,
    /// Robustness noise levels as multiples of the target embedding norm.
    pub robustness_levels: Vec<f64>,
    pub permutations: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            steps: 50,
            sigma_sim: DEFAULT_SIGMA_SIM,
            threshold: 0.5,
            robustness_levels: vec![0.0, 0.3],
            permutations: 200,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.samples < 2 || self.steps == 0 || self.permutations == 0 {
            return Err(EvalError::Config("need samples >= 2, steps >= 1 and permutations >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) || self.sigma_sim.is_nan() || self.sigma_sim <= 0.0 {
            return Err(EvalError::Config("threshold must lie in (0, 1) and sigma_sim be positive".into()));
        }
        check_levels(&self.robustness_levels)
    }
}

fn check_levels(levels: &[f64]) -> Result<(), EvalError> {
    if levels.is_empty() {
        return Ok(());
    }
    if levels[0] != 0.0 || levels.windows(2).any(|w| w[0] >= w[1]) || levels.iter().any(|l| !l.is_finite()) {
        return Err(EvalError::Config("robustness levels must start at 0 and increase strictly".into()));
    }
    Ok(())
}

/// Evaluation prompts for `concept`: stream `(seed, concept)` only.
pub fn concept_prompts(
    vocab: &Vocab,
    map: &ConceptMap,
    concept: &ConceptRef,
    n: usize,
    seed: u64,
) -> Result<Vec<Prompt>, EvalError> {
    let label = concept.to_string();
    let mut rng = rng_stream(derive_seed(seed, &["eval", "prompts", &label]), 0);
    let pool = PromptPool::standard(vocab);
    Ok(match &concept.style {
        Some(st) => fixed_prompts(vocab, &concept.subject, Some(st), n, &pool, &mut rng)?,
        None => make_prompts(vocab, map, &concept.subject, n, &pool, &mut rng)?,
    })
}

/// `n` samples of `concept`. Prompts and sampler noise depend only on
/// `(seed, concept)`, so two checkpoints see common random numbers.
pub fn sample_concept(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    map: &ConceptMap,
    concept: &ConceptRef,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<[f64; 2]>, EvalError> {
    let prompts = concept_prompts(vocab, map, concept, n, seed)?;
    let sched = ckpt.noise_schedule()?;
    let label = concept.to_string();
    Ok(sample_prompts(ckpt.model(), &ckpt.params, &prompts, steps, &sched, derive_seed(seed, &["eval", "x", &label]))?)
}

/// Fraction of samples of `concept` the Bayes classifier assigns to `concept` rather than `versus`.
#[allow(clippy::too_many_arguments)]
pub fn concept_accuracy(
    map: &ConceptMap,
    samples: &[[f64; 2]],
    concept: &ConceptRef,
    versus: &ConceptRef,
) -> Result<f64, EvalError> {
    bayes_accuracy(samples, &concept.density(map)?, &versus.density(map)?)
}

/// Mean log-density of `samples` under `concept`, in nats.
pub fn concept_score(map: &ConceptMap, samples: &[[f64; 2]], concept: &ConceptRef) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Config("score needs at least one sample".into()));
    }
    Ok(mean_log_density(samples, &concept.density(map)?))
}

/// Fraction of `n` samples under `prompts` (cycled) that copy the memorized point.
#[allow(clippy::too_many_arguments)]
pub fn memorization_rate(
    ckpt: &Checkpoint,
    prompts: &[Prompt],
    point: [f64; 2],
    n: usize,
    steps: usize,
    sigma_sim: f64,
    threshold: f64,
    seed: u64,
) -> Result<f64, EvalError> {
    if prompts.is_empty() || n == 0 {
        return Err(EvalError::Config("memorization rate needs prompts and n >= 1".into()));
    }
    let ps: Vec<Prompt> = prompts.iter().cycle().take(n).copied().collect();
    let sched = ckpt.noise_schedule()?;
    let xs = sample_prompts(ckpt.model(), &ckpt.params, &ps, steps, &sched, derive_seed(seed, &["eval", "memo"]))?;
    Ok(copy_rate(&xs, point, sigma_sim, threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustPoint {
    /// Multiple of the reference embedding norm.
    pub level: f64,
    /// Per-coordinate standard deviation.
    pub sigma: f64,
    pub accuracy: f64,
}

/// Target accuracy when the target subject token is replaced by a noisy copy
/// of its reference embedding.
///
/// Level 0 is the unperturbed checkpoint. At level `l > 0` every sample gets
/// its own draw `e_ref + N(0, s^2 I)` with `s = l ||e_ref|| / sqrt(d)`, so the
/// perturbation has expected squared norm `(l ||e_ref||)^2`. All other tokens
/// keep the checkpoint's embeddings.
#[allow(clippy::too_many_arguments)]
pub fn robustness_eval(
    ckpt: &Checkpoint,
    reference: &ParamMap,
    vocab: &Vocab,
    map: &ConceptMap,
    target: &str,
    anchor: &str,
    levels: &[f64],
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<RobustPoint>, EvalError> {
    if levels.is_empty() {
        return Err(EvalError::Config("robustness needs at least one level".into()));
    }
    check_levels(levels)?;
    let (tc, ac) = (ConceptRef::plain(target), ConceptRef::plain(anchor));
    let (td, ad) = (tc.density(map)?, ac.density(map)?);
    let prompts = concept_prompts(vocab, map, &tc, n, seed)?;
    let sched = ckpt.noise_schedule()?;
    let sample_seed = derive_seed(seed, &["eval", "x", &tc.to_string()]);
    let tid = vocab.id(target)? as usize;
    let e_ref = reference
        .get(crate::diffusion::net::EMB)
        .ok_or_else(|| EvalError::Config("reference parameters lack an embedding table".into()))?
        .row(tid)
        .to_vec();
    let unit = e_ref.iter().map(|v| v * v).sum::<f64>().sqrt() / (e_ref.len() as f64).sqrt();
    let mut out = Vec::with_capacity(levels.len());
    for (k, &level) in levels.iter().enumerate() {
        let xs = if level == 0.0 {
            sample_prompts(ckpt.model(), &ckpt.params, &prompts, steps, &sched, sample_seed)?
        } else {
            let sigma = level * unit;
            let mut rows = embedding_rows(&ckpt.params, &prompts);
            let d = rows.cols();
            let mut rng = rng_stream(derive_seed(seed, &["eval", "robust", &k.to_string()]), 0);
            for (i, p) in prompts.iter().enumerate() {
                for (slot, &tok) in p.tokens().iter().enumerate() {
                    if tok as usize == tid {
                        let r = i * crate::concepts::PROMPT_LEN + slot;
                        for (j, e) in e_ref.iter().enumerate() {
                            rows.data_mut()[r * d + j] = e + sigma * normal(&mut rng);
                        }
                    }
                }
            }
            let model = NetEps { cfg: ckpt.model(), params: &ckpt.params, cond: RowCond::Embeddings(&rows) };
            sample_ancestral(&model, steps, &sched, sample_seed)?
        };
        out.push(RobustPoint { level, sigma: level * unit, accuracy: bayes_accuracy(&xs, &td, &ad)? });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalRole {
    Target,
    Anchor,
    Surrounding,
}

impl EvalRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalRole::Target => "target",
            EvalRole::Anchor => "anchor",
            EvalRole::Surrounding => "surrounding",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptReport {
    pub role: EvalRole,
    pub concept: ConceptRef,
    /// The alternative the accuracy classifier chooses against.
    pub versus: ConceptRef,
    pub accuracy: f64,
    pub pretrained_accuracy: f64,
    pub score: f64,
    pub pretrained_score: f64,
    /// Ablated versus pretrained generations.
    pub mmd2: f64,
    /// 95th percentile of the permutation null of `mmd2`.
    pub mmd2_null95: f64,
}

impl ConceptReport {
    pub fn mmd_within_band(&self) -> bool {
        self.mmd2 <= self.mmd2_null95
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorizationReport {
    pub rate: f64,
    pub pretrained_rate: f64,
}

/// Composed-prompt generations of the ablated model against subject-only
/// generations of the pretrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionReport {
    pub composed: ConceptRef,
    pub subject: ConceptRef,
    pub mmd2: f64,
    pub mmd2_null95: f64,
}

impl CompositionReport {
    pub fn mmd_within_band(&self) -> bool {
        self.mmd2 <= self.mmd2_null95
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub ablated: String,
    pub pretrained: String,
    pub seed: u64,
    pub config: MetricConfig,
    pub task: Task,
    pub concepts: Vec<ConceptReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memorization: Option<MemorizationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness: Option<Vec<RobustPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composition: Option<CompositionReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn by_role(&self, role: EvalRole) -> impl Iterator<Item = &ConceptReport> {
        self.concepts.iter().filter(move |c| c.role == role)
    }

    /// One row per (concept, metric): `role,concept,versus,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("role,concept,versus,metric,value\n");
        for c in &self.concepts {
            let metrics = [
                ("accuracy", c.accuracy),
                ("pretrained_accuracy", c.pretrained_accuracy),
                ("score", c.score),
                ("pretrained_score", c.pretrained_score),
                ("mmd2", c.mmd2),
                ("mmd2_null95", c.mmd2_null95),
            ];
            for (m, v) in metrics {
                s.push_str(&format!("{},{},{},{},{:?}\n", c.role.as_str(), c.concept, c.versus, m, v));
            }
        }
        if let Some(m) = &self.memorization {
            s.push_str(&format!("target,{},,memorization_rate,{:?}\n", self.task.target(), m.rate));
            s.push_str(&format!(
                "target,{},,pretrained_memorization_rate,{:?}\n",
                self.task.target(),
                m.pretrained_rate
            ));
        }
        for r in self.robustness.iter().flatten() {
            s.push_str(&format!("target,{},,robust_accuracy@{:?},{:?}\n", self.task.target(), r.level, r.accuracy));
        }
        if let Some(c) = &self.composition {
            s.push_str(&format!("target,{},{},subject_mmd2,{:?}\n", c.composed, c.subject, c.mmd2));
            s.push_str(&format!("target,{},{},subject_mmd2_null95,{:?}\n", c.composed, c.subject, c.mmd2_null95));
        }
        s
    }

    fn check(&self) -> Result<(), EvalError> {
        let rates = self.concepts.iter().flat_map(|c| [c.accuracy, c.pretrained_accuracy]);
        let mem = self.memorization.iter().flat_map(|m| [m.rate, m.pretrained_rate]);
        let rob = self.robustness.iter().flatten().map(|r| r.accuracy);
        if rates.chain(mem).chain(rob).any(|r| !(0.0..=1.0).contains(&r)) {
            return Err(EvalError::Invalid("rate outside [0, 1]".into()));
        }
        let all = self.concepts.iter().flat_map(|c| [c.score, c.pretrained_score, c.mmd2, c.mmd2_null95]);
        let comp = self.composition.iter().flat_map(|c| [c.mmd2, c.mmd2_null95]);
        if all.chain(comp).any(|v| !v.is_finite()) {
            return Err(EvalError::Invalid("non-finite metric".into()));
        }
        Ok(())
    }
}

/// `(role, concept, versus)` triples evaluated for a task.
pub fn evaluation_plan(map: &ConceptMap, task: &Task) -> Result<Vec<(EvalRole, ConceptRef, ConceptRef)>, EvalError> {
    let mut plan = Vec::new();
    match task {
        Task::Instance { target, anchor } | Task::Memorization { target, anchor } => {
            let (t, a) = (ConceptRef::plain(target), ConceptRef::plain(anchor));
            plan.push((EvalRole::Target, t.clone(), a.clone()));
            plan.push((EvalRole::Anchor, a.clone(), t));
            for s in surrounding(map, target)? {
                plan.push((EvalRole::Surrounding, ConceptRef::plain(&s), a.clone()));
            }
        }
        Task::Style { target, anchor } => {
            for subj in &map.style_subjects {
                let (t, a) = (ConceptRef::styled(subj, target), ConceptRef::styled(subj, anchor));
                plan.push((EvalRole::Target, t.clone(), a.clone()));
                plan.push((EvalRole::Anchor, a.clone(), t));
                for s in surrounding(map, target)? {
                    plan.push((EvalRole::Surrounding, ConceptRef::styled(subj, &s), a.clone()));
                }
            }
        }
        Task::Composition { subject, style } => {
            let (t, a) = (ConceptRef::styled(subject, style), ConceptRef::plain(subject));
            plan.push((EvalRole::Target, t.clone(), a.clone()));
            plan.push((EvalRole::Anchor, a, t));
            for other in map.style_subjects.iter().filter(|s| *s != subject) {
                plan.push((EvalRole::Surrounding, ConceptRef::styled(other, style), ConceptRef::plain(other)));
            }
        }
    }
    Ok(plan)
}

fn surrounding(map: &ConceptMap, target: &str) -> Result<Vec<String>, EvalError> {
    Ok(map.relation(target).map(|r| r.surrounding.clone()).unwrap_or_default())
}

/// Every metric for the task's target, anchor and surrounding concepts.
///
/// Both checkpoints are sampled with common random numbers. The ablated
/// checkpoint must descend from the pretrained one unless `force` is set.
#[allow(clippy::too_many_arguments)]
pub fn full_report(
    ablated: &Checkpoint,
    pretrained: &Checkpoint,
    vocab: &Vocab,
    map: &ConceptMap,
    task: &Task,
    cfg: &MetricConfig,
    seed: u64,
    force: bool,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let same = ablated.content_hash() == pretrained.content_hash();
    if !force && !same && !ablated.descends_from(pretrained) {
        return Err(EvalError::Lineage(format!(
            "{} does not descend from {}",
            &ablated.content_hash()[..12],
            &pretrained.content_hash()[..12]
        )));
    }
    let plan = evaluation_plan(map, task)?;
    for (_, c, v) in &plan {
        c.density(map)?;
        v.density(map)?;
    }
    let concepts = par::try_map_range(plan.len(), |i| {
        let (role, concept, versus) = &plan[i];
        let xa = sample_concept(ablated, vocab, map, concept, cfg.samples, cfg.steps, seed)?;
        let xp = sample_concept(pretrained, vocab, map, concept, cfg.samples, cfg.steps, seed)?;
        let perm_seed = derive_seed(seed, &["eval", "perm", &concept.to_string()]);
        Ok::<_, EvalError>(ConceptReport {
            role: *role,
            concept: concept.clone(),
            versus: versus.clone(),
            accuracy: concept_accuracy(map, &xa, concept, versus)?,
            pretrained_accuracy: concept_accuracy(map, &xp, concept, versus)?,
            score: concept_score(map, &xa, concept)?,
            pretrained_score: concept_score(map, &xp, concept)?,
            mmd2: mmd_poly(&xa, &xp)?,
            mmd2_null95: mmd_null_quantile(&xa, &xp, cfg.permutations, 0.95, perm_seed)?,
        })
    })?;
    let memorization = match task {
        Task::Memorization { target, .. } => {
            let (point, _) = map.memorized_point(target)?;
            let prompts = concept_prompts(vocab, map, &ConceptRef::plain(target), cfg.samples, seed)?;
            let rate = |c: &Checkpoint| {
                memorization_rate(c, &prompts, point, cfg.samples, cfg.steps, cfg.sigma_sim, cfg.threshold, seed)
            };
            Some(MemorizationReport { rate: rate(ablated)?, pretrained_rate: rate(pretrained)? })
        }
        _ => None,
    };
    let robustness = match task {
        Task::Instance { target, anchor } if !cfg.robustness_levels.is_empty() => Some(robustness_eval(
            ablated,
            &pretrained.params,
            vocab,
            map,
            target,
            anchor,
            &cfg.robustness_levels,
            cfg.samples,
            cfg.steps,
            seed,
        )?),
        _ => None,
    };
    let composition = match task {
        Task::Composition { subject, style } => {
            let (composed, plain) = (ConceptRef::styled(subject, style), ConceptRef::plain(subject));
            let xa = sample_concept(ablated, vocab, map, &composed, cfg.samples, cfg.steps, seed)?;
            let xs = sample_concept(pretrained, vocab, map, &plain, cfg.samples, cfg.steps, seed)?;
            let perm_seed = derive_seed(seed, &["eval", "perm", "composition"]);
            Some(CompositionReport {
                mmd2: mmd_poly(&xa, &xs)?,
                mmd2_null95: mmd_null_quantile(&xa, &xs, cfg.permutations, 0.95, perm_seed)?,
                composed,
                subject: plain,
            })
        }
        _ => None,
    };
    let report = EvalReport {
        ablated: ablated.content_hash(),
        pretrained: pretrained.content_hash(),
        seed,
        config: cfg.clone(),
        task: task.clone(),
        concepts,
        memorization,
        robustness,
        composition,
    };
    report.check()?;
    Ok(report)
}
