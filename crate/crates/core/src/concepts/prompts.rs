use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::map::{ConceptKind, ConceptMap};
use super::vocab::{Prompt, Vocab};
use super::ConceptError;
use crate::numcore::Rng;

/// Template tokens and style-slot fillers that prompts are drawn from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPool {
    pub templates: Vec<u32>,
    /// Candidates for an unconstrained style slot (PAD and/or style tokens).
    pub style_slots: Vec<u32>,
}

impl PromptPool {
    /// Every template, style slot PAD or "plain".
    pub fn standard(vocab: &Vocab) -> Self {
        let mut style_slots = vec![vocab.pad()];
        if let Ok(p) = vocab.id("plain") {
            style_slots.push(p);
        }
        Self { templates: vocab.templates(), style_slots }
    }

    /// Every template, style slot always PAD.
    pub fn unstyled(vocab: &Vocab) -> Self {
        Self { templates: vocab.templates(), style_slots: vec![vocab.pad()] }
    }

    /// The first `k` templates only; the prompt-diversity knob.
    pub fn restrict_templates(mut self, k: usize) -> Self {
        self.templates.truncate(k.max(1));
        self
    }

    /// Number of distinct prompts for a fixed subject.
    pub fn unique_prompts(&self) -> usize {
        self.templates.len() * self.style_slots.len()
    }
}

/// What an ablation overwrites and with what.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Task {
    /// Subject slot `anchor` becomes `target`.
    Instance { target: String, anchor: String },
    /// Style slot `anchor` becomes `target`; subjects vary over the map's style subjects.
    Style { target: String, anchor: String },
    /// Subject-only prompts become subject-in-style prompts.
    Composition { subject: String, style: String },
    /// Paraphrase prompts of `anchor` versus the memorized prompt of `target`.
    Memorization { target: String, anchor: String },
}

impl Task {
    pub fn target(&self) -> String {
        match self {
            Task::Instance { target, .. } | Task::Style { target, .. } | Task::Memorization { target, .. } => {
                target.clone()
            }
            Task::Composition { subject, style } => format!("{subject}_{style}"),
        }
    }

    pub fn anchor(&self) -> &str {
        match self {
            Task::Instance { anchor, .. } | Task::Style { anchor, .. } | Task::Memorization { anchor, .. } => anchor,
            Task::Composition { subject, .. } => subject,
        }
    }

    /// Task implied by a relation of the concept map.
    pub fn from_relation(map: &ConceptMap, target: &str) -> Result<Self, ConceptError> {
        let rel = map.relation(target)?;
        let (target, anchor) = (rel.target.clone(), rel.anchor.clone());
        Ok(match &map.get(&target)?.kind {
            ConceptKind::Instance { .. } => Task::Instance { target, anchor },
            ConceptKind::Style { .. } => Task::Style { target, anchor },
            ConceptKind::Memorized { .. } => Task::Memorization { target, anchor },
            ConceptKind::Composition { subject, style } => {
                Task::Composition { subject: subject.clone(), style: style.clone() }
            }
        })
    }
}

fn pick(rng: &mut Rng, xs: &[u32]) -> Result<u32, ConceptError> {
    xs.choose(rng).copied().ok_or_else(|| ConceptError::Invalid("empty prompt pool".into()))
}

/// `n` prompts for `concept`.
///
/// Subjects fill the subject slot and draw the style slot from the pool. Styles
/// fill the style slot and draw the subject from the map's style subjects.
/// Compositions fix both slots.
pub fn make_prompts(
    vocab: &Vocab,
    map: &ConceptMap,
    concept: &str,
    n: usize,
    pool: &PromptPool,
    rng: &mut Rng,
) -> Result<Vec<Prompt>, ConceptError> {
    let spec = map.get(concept)?;
    let pad = vocab.pad();
    let mut out = Vec::with_capacity(n);
    match &spec.kind {
        ConceptKind::Instance { .. } | ConceptKind::Memorized { .. } => {
            let s = vocab.id(concept)?;
            for _ in 0..n {
                let t = pick(rng, &pool.templates)?;
                let st = pick(rng, &pool.style_slots)?;
                out.push(Prompt::new(t, s, st, pad));
            }
        }
        ConceptKind::Style { .. } => {
            let st = vocab.id(concept)?;
            let subjects = map.style_subjects.iter().map(|s| vocab.id(s)).collect::<Result<Vec<_>, _>>()?;
            for _ in 0..n {
                let t = pick(rng, &pool.templates)?;
                let s = pick(rng, &subjects)?;
                out.push(Prompt::new(t, s, st, pad));
            }
        }
        ConceptKind::Composition { subject, style } => {
            let (s, st) = (vocab.id(subject)?, vocab.id(style)?);
            for _ in 0..n {
                out.push(Prompt::new(pick(rng, &pool.templates)?, s, st, pad));
            }
        }
    }
    Ok(out)
}

/// Prompts whose subject and style slots are both fixed (`style` of `None` is PAD).
pub fn fixed_prompts(
    vocab: &Vocab,
    subject: &str,
    style: Option<&str>,
    n: usize,
    pool: &PromptPool,
    rng: &mut Rng,
) -> Result<Vec<Prompt>, ConceptError> {
    let s = vocab.id(subject)?;
    let st = match style {
        Some(x) => vocab.id(x)?,
        None => vocab.pad(),
    };
    (0..n).map(|_| Ok(Prompt::new(pick(rng, &pool.templates)?, s, st, vocab.pad()))).collect()
}

/// Maps an anchor prompt to its target counterpart for `task`.
pub fn to_target_prompt(vocab: &Vocab, c: &Prompt, task: &Task) -> Result<Prompt, ConceptError> {
    c.validate(vocab)?;
    let mut out = *c;
    match task {
        Task::Instance { target, anchor } | Task::Memorization { target, anchor } => {
            let (t, a) = (vocab.id(target)?, vocab.id(anchor)?);
            if c.subject() == t {
                return Err(ConceptError::AlreadyTarget(target.clone()));
            }
            if c.subject() != a {
                return Err(ConceptError::Invalid(format!("prompt subject is not the anchor {anchor}")));
            }
            out.0[1] = t;
        }
        Task::Style { target, .. } => {
            let t = vocab.id(target)?;
            if c.style() == t {
                return Err(ConceptError::AlreadyTarget(target.clone()));
            }
            out.0[2] = t;
        }
        Task::Composition { subject, style } => {
            let (s, st) = (vocab.id(subject)?, vocab.id(style)?);
            if c.style() == st {
                return Err(ConceptError::AlreadyTarget(format!("{subject}_{style}")));
            }
            out.0[1] = s;
            out.0[2] = st;
        }
    }
    Ok(out)
}
