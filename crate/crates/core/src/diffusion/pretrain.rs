use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointConfig};
use super::loss::{diffusion_loss, diffusion_loss_grad, NoiseDraw};
use super::net::{ModelConfig, EMB};
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::DiffusionError;
use crate::concepts::{ConceptKind, ConceptMap, Mixture, Prompt, Vocab};
use crate::numcore::{normal, rng_stream, AdamConfig, AdamState, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Peak Adam rate; decays to zero on a half-cosine.
    pub lr: f64,
    pub seed: u64,
    /// Include the memorized concept in the training mix.
    pub memorize: bool,
    /// Mix weight of the memorized prompt relative to a family prompt.
    pub memo_weight: f64,
    /// Update the token embedding table. Off by default: the table stays at
    /// its random initialization, like a frozen text encoder.
    #[serde(default)]
    pub train_embeddings: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch: 64, lr: 3e-3, seed: 0, memorize: true, memo_weight: 3.0, train_embeddings: false }
    }
}

/// One conditioning of the pretraining mix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixEntry {
    pub subject: String,
    pub style: Option<String>,
    pub weight: f64,
}

/// The pretraining mix implied by a concept map.
///
/// Style subjects appear unstyled and in every style (weight 1). Single-member
/// concepts that share a style subject's frame appear unstyled and "plain"
/// (weight 0.5). Other instances appear unstyled (weight 1). The memorized
/// concept appears unstyled with `memo_weight` when enabled.
pub fn training_mix(map: &ConceptMap, memorize: bool, memo_weight: f64) -> Vec<MixEntry> {
    let styles: Vec<&str> =
        map.concepts.iter().filter(|c| matches!(c.kind, ConceptKind::Style { .. })).map(|c| c.name.as_str()).collect();
    let frame_of = |name: &str| match map.get(name).map(|c| &c.kind) {
        Ok(ConceptKind::Instance { frame, .. }) => Some(*frame),
        _ => None,
    };
    let family_frames: Vec<[f64; 2]> = map.style_subjects.iter().filter_map(|s| frame_of(s)).collect();
    let entry =
        |s: &str, st: Option<&str>, w: f64| MixEntry { subject: s.into(), style: st.map(Into::into), weight: w };
    let mut out = Vec::new();
    for c in &map.concepts {
        match &c.kind {
            ConceptKind::Instance { frame, .. } => {
                if map.style_subjects.contains(&c.name) {
                    out.push(entry(&c.name, None, 1.0));
                    out.extend(styles.iter().map(|st| entry(&c.name, Some(st), 1.0)));
                } else if family_frames.contains(frame) {
                    out.push(entry(&c.name, None, 0.5));
                    if styles.contains(&"plain") {
                        out.push(entry(&c.name, Some("plain"), 0.5));
                    }
                } else {
                    out.push(entry(&c.name, None, 1.0));
                }
            }
            ConceptKind::Memorized { .. } if memorize => out.push(entry(&c.name, None, memo_weight)),
            _ => {}
        }
    }
    out
}

enum Source {
    Density(Mixture),
    Point([f64; 2], f64),
}

impl Source {
    fn draw(&self, rng: &mut Rng) -> [f64; 2] {
        match self {
            Source::Density(m) => m.sample(rng),
            Source::Point(p, j) => [p[0] + j * normal(rng), p[1] + j * normal(rng)],
        }
    }
}

/// Sampler for `(x, prompt)` training pairs drawn from a mix.
pub struct PairSampler {
    entries: Vec<(Source, u32, u32)>,
    cumulative: Vec<f64>,
    templates: Vec<u32>,
    pad: u32,
}

impl PairSampler {
    pub fn new(map: &ConceptMap, vocab: &Vocab, mix: &[MixEntry]) -> Result<Self, DiffusionError> {
        let mut entries = Vec::with_capacity(mix.len());
        let mut cumulative = Vec::with_capacity(mix.len());
        let mut acc = 0.0;
        for e in mix {
            let src = match &map.get(&e.subject)?.kind {
                ConceptKind::Memorized { point, jitter } => Source::Point(*point, *jitter),
                _ => Source::Density(map.density(&e.subject, e.style.as_deref())?),
            };
            let st = match &e.style {
                Some(s) => vocab.id(s)?,
                None => vocab.pad(),
            };
            entries.push((src, vocab.id(&e.subject)?, st));
            acc += e.weight;
            cumulative.push(acc);
        }
        if entries.is_empty() || acc <= 0.0 {
            return Err(DiffusionError::Config("empty training mix".into()));
        }
        Ok(Self { entries, cumulative, templates: vocab.templates(), pad: vocab.pad() })
    }

    pub fn draw(&self, n: usize, rng: &mut Rng) -> (Vec<[f64; 2]>, Vec<Prompt>) {
        let total = *self.cumulative.last().unwrap();
        let mut xs = Vec::with_capacity(n);
        let mut ps = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.random::<f64>() * total;
            let k = self.cumulative.partition_point(|&c| c <= u).min(self.entries.len() - 1);
            let (src, s, st) = &self.entries[k];
            xs.push(src.draw(rng));
            let t = *self.templates.choose(rng).unwrap();
            ps.push(Prompt::new(t, *s, *st, self.pad));
        }
        (xs, ps)
    }
}

/// Trains a fresh denoiser on the map's training mix.
pub fn pretrain(
    map: &ConceptMap,
    vocab: &Vocab,
    model: ModelConfig,
    schedule: ScheduleConfig,
    cfg: &PretrainConfig,
) -> Result<Checkpoint, DiffusionError> {
    if cfg.batch == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(DiffusionError::Config("pretraining needs batch >= 1 and lr > 0".into()));
    }
    let sched = NoiseSchedule::new(schedule)?;
    let mix = training_mix(map, cfg.memorize, cfg.memo_weight);
    let pairs = PairSampler::new(map, vocab, &mix)?;
    let mut params = model.init(&mut rng_stream(cfg.seed, 0));
    let mut rng = rng_stream(cfg.seed, 1);
    let mut adam = AdamState::new(AdamConfig::new(cfg.lr));
    for step in 0..cfg.steps {
        let (x0, prompts) = pairs.draw(cfg.batch, &mut rng);
        let draw = NoiseDraw::sample(cfg.batch, &sched, &mut rng);
        let (loss, mut grads) = diffusion_loss_grad(&model, &params, &x0, &prompts, &sched, &draw)
            .map_err(|e| DiffusionError::Training { step, source: e })?;
        if !cfg.train_embeddings {
            grads.remove(EMB);
        }
        if !loss.is_finite() {
            return Err(DiffusionError::Training { step, source: crate::numcore::NumError::NonFinite { op: "loss" } });
        }
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        adam.step(&mut params, &grads, Some(lr)).map_err(|e| DiffusionError::Training { step, source: e })?;
    }
    let run = serde_json::json!({ "pretrain": cfg, "mix": mix, "concept_map": crate::diffusion::json_hash(map) });
    Ok(Checkpoint::new(CheckpointConfig { model, run }, schedule, params, Vec::new()))
}

/// Diffusion loss on fresh pairs from the checkpoint's training mix.
pub fn heldout_loss(
    ckpt: &Checkpoint,
    map: &ConceptMap,
    vocab: &Vocab,
    memorize: bool,
    n: usize,
    seed: u64,
) -> Result<f64, DiffusionError> {
    let sched = ckpt.noise_schedule()?;
    let pairs = PairSampler::new(map, vocab, &training_mix(map, memorize, 3.0))?;
    let mut rng = rng_stream(seed, 7);
    let (x0, prompts) = pairs.draw(n, &mut rng);
    let draw = NoiseDraw::sample(n, &sched, &mut rng);
    Ok(diffusion_loss(ckpt.model(), &ckpt.params, &x0, &prompts, &sched, &draw)?)
}
