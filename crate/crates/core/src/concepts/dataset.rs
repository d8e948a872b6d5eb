use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::map::ConceptMap;
use super::prompts::{fixed_prompts, make_prompts, to_target_prompt, PromptPool, Task};
use super::vocab::{Prompt, Vocab};
use crate::diffusion::{sample_prompts, Checkpoint, DiffusionError};
use crate::eval::{similarity, DEFAULT_SIGMA_SIM};
use crate::numcore::{derive_seed, rng_stream};

/// Which prompt of a tuple the point was generated under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Anchor,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// Content hash of the generating checkpoint.
    pub checkpoint: String,
    pub seed: u64,
    pub steps: usize,
    pub task: Task,
    pub source: Source,
    /// Candidates drawn before filtering.
    pub requested: usize,
    /// Candidates removed by the memorization filter.
    #[serde(default)]
    pub filtered: usize,
    pub pool: PromptPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tuple {
    pub x: [f64; 2],
    pub c: Prompt,
    pub cstar: Prompt,
}

/// A point paired with the prompt it is regularized under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegPair {
    pub x: [f64; 2],
    pub c: Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationDataset {
    pub provenance: Provenance,
    pub tuples: Vec<Tuple>,
    /// Explicit regularization pairs. When absent, each tuple's `(x, c)` serves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularization: Option<Vec<RegPair>>,
}

impl AblationDataset {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Regularization pairs, explicit or derived from the tuples.
    pub fn reg_pairs(&self) -> Vec<RegPair> {
        match &self.regularization {
            Some(r) => r.clone(),
            None => self.tuples.iter().map(|t| RegPair { x: t.x, c: t.c }).collect(),
        }
    }
}

fn anchor_prompts(
    vocab: &Vocab,
    map: &ConceptMap,
    task: &Task,
    n: usize,
    pool: &PromptPool,
    seed: u64,
) -> Result<Vec<Prompt>, DiffusionError> {
    let mut rng = rng_stream(derive_seed(seed, &["dataset", "prompts"]), 0);
    Ok(match task {
        Task::Instance { anchor, .. } | Task::Style { anchor, .. } => {
            make_prompts(vocab, map, anchor, n, pool, &mut rng)?
        }
        Task::Composition { subject, .. } => {
            let mut ps = fixed_prompts(vocab, subject, None, n, pool, &mut rng)?;
            for p in &mut ps {
                p.0[2] = *pool.style_slots.choose(&mut rng).unwrap_or(&vocab.pad());
            }
            ps
        }
        Task::Memorization { .. } => {
            return Err(DiffusionError::Config("memorization tasks use build_memorization_dataset".into()))
        }
    })
}

/// Samples `n` tuples for `task` from the checkpoint.
///
/// Anchor prompts come from the pool, target prompts by substitution, and each
/// point is generated under the prompt selected by `source`.
#[allow(clippy::too_many_arguments)]
pub fn build_ablation_dataset(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    map: &ConceptMap,
    task: &Task,
    n: usize,
    steps: usize,
    pool: &PromptPool,
    source: Source,
    seed: u64,
) -> Result<AblationDataset, DiffusionError> {
    if n == 0 {
        return Err(DiffusionError::Config("dataset size must be at least 1".into()));
    }
    let cs = anchor_prompts(vocab, map, task, n, pool, seed)?;
    let stars = cs.iter().map(|c| to_target_prompt(vocab, c, task)).collect::<Result<Vec<_>, _>>()?;
    let gen = match source {
        Source::Anchor => &cs,
        Source::Target => &stars,
    };
    let sched = ckpt.noise_schedule()?;
    let xs = sample_prompts(ckpt.model(), &ckpt.params, gen, steps, &sched, derive_seed(seed, &["dataset", "x"]))?;
    let tuples = xs.into_iter().zip(cs).zip(stars).map(|((x, c), cstar)| Tuple { x, c, cstar }).collect();
    Ok(AblationDataset {
        provenance: Provenance {
            checkpoint: ckpt.content_hash(),
            seed,
            steps,
            task: task.clone(),
            source,
            requested: n,
            filtered: 0,
            pool: pool.clone(),
        },
        tuples,
        regularization: None,
    })
}

/// Prompt-split settings for memorization datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorizationOptions {
    /// Target-side prompts: the memorized prompt and its template variants.
    pub target_prompts: usize,
    /// Anchor-side paraphrases kept after screening.
    pub anchor_prompts: usize,
    /// Samples drawn per candidate paraphrase while screening.
    pub screen_samples: usize,
    /// Candidates copying the memorized point at or above this rate are dropped.
    pub screen_max_rate: f64,
    pub sigma_sim: f64,
    pub threshold: f64,
    /// Drop generated points similar to the memorized point.
    pub filter: bool,
}

impl Default for MemorizationOptions {
    fn default() -> Self {
        Self {
            target_prompts: 4,
            anchor_prompts: 10,
            screen_samples: 64,
            screen_max_rate: 0.3,
            sigma_sim: DEFAULT_SIGMA_SIM,
            threshold: 0.5,
            filter: true,
        }
    }
}

/// Memorization dataset: paraphrases of the anchor versus the memorized prompt.
///
/// The paraphrase pool is every template with PAD or "plain" in the style slot
/// (16 candidates in the standard vocabulary), visited in seed order; a
/// candidate is kept if the model copies the memorized point under it less than
/// `screen_max_rate` of the time. Generated points with similarity at or above
/// `threshold` are removed.
#[allow(clippy::too_many_arguments)]
pub fn build_memorization_dataset(
    ckpt: &Checkpoint,
    vocab: &Vocab,
    map: &ConceptMap,
    task: &Task,
    n: usize,
    steps: usize,
    opts: &MemorizationOptions,
    seed: u64,
) -> Result<AblationDataset, DiffusionError> {
    let Task::Memorization { target, anchor } = task else {
        return Err(DiffusionError::Config("build_memorization_dataset needs a memorization task".into()));
    };
    let (point, _) = map.memorized_point(target)?;
    let sched = ckpt.noise_schedule()?;
    let (t_id, a_id, pad) = (vocab.id(target)?, vocab.id(anchor)?, vocab.pad());
    let templates = vocab.templates();
    if opts.target_prompts > templates.len() {
        return Err(DiffusionError::Config("more target prompts than templates".into()));
    }
    let stars: Vec<Prompt> = templates[..opts.target_prompts].iter().map(|&t| Prompt::new(t, t_id, pad, pad)).collect();

    let pool = PromptPool::standard(vocab);
    let mut candidates: Vec<Prompt> = pool
        .templates
        .iter()
        .flat_map(|&t| pool.style_slots.iter().map(move |&s| Prompt::new(t, a_id, s, pad)))
        .collect();
    let mut rng = rng_stream(derive_seed(seed, &["memo", "prompts"]), 0);
    candidates.shuffle(&mut rng);
    let mut anchors = Vec::with_capacity(opts.anchor_prompts);
    for (i, cand) in candidates.iter().enumerate() {
        if anchors.len() == opts.anchor_prompts {
            break;
        }
        let probe = vec![*cand; opts.screen_samples];
        let xs = sample_prompts(
            ckpt.model(),
            &ckpt.params,
            &probe,
            steps,
            &sched,
            derive_seed(seed, &["memo", "screen", &i.to_string()]),
        )?;
        let copies = xs.iter().filter(|x| similarity(**x, point, opts.sigma_sim) >= opts.threshold).count();
        if (copies as f64) < opts.screen_max_rate * opts.screen_samples as f64 {
            anchors.push(*cand);
        }
    }
    if anchors.len() < opts.anchor_prompts {
        return Err(DiffusionError::Config(format!(
            "only {} of {} paraphrases pass the copy screen; anchor prompts also memorized",
            anchors.len(),
            opts.anchor_prompts
        )));
    }

    let cs: Vec<Prompt> = (0..n).map(|_| *anchors.choose(&mut rng).unwrap()).collect();
    let cstars: Vec<Prompt> = (0..n).map(|_| *stars.choose(&mut rng).unwrap()).collect();
    let xs = sample_prompts(ckpt.model(), &ckpt.params, &cs, steps, &sched, derive_seed(seed, &["memo", "x"]))?;
    let mut tuples = Vec::with_capacity(n);
    for ((x, c), cstar) in xs.into_iter().zip(cs).zip(cstars) {
        if opts.filter && similarity(x, point, opts.sigma_sim) >= opts.threshold {
            continue;
        }
        tuples.push(Tuple { x, c, cstar });
    }
    let filtered = n - tuples.len();
    if filtered * 10 > n * 9 {
        return Err(DiffusionError::Config(format!(
            "{filtered} of {n} samples filtered; anchor prompts also memorized"
        )));
    }
    Ok(AblationDataset {
        provenance: Provenance {
            checkpoint: ckpt.content_hash(),
            seed,
            steps,
            task: task.clone(),
            source: Source::Anchor,
            requested: n,
            filtered,
            pool,
        },
        tuples,
        regularization: None,
    })
}
