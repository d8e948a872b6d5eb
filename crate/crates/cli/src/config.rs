//! Strict run configuration. Every field has a default, so `{}` is a valid
//! config; unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use ablate_core::ablation::{AblateConfig, Objective, ObjectiveKind, SubsetKind};
use ablate_core::concepts::{default_concept_map, ConceptMap, Source, Task, Vocab};
use ablate_core::diffusion::{ModelConfig, PretrainConfig, ScheduleConfig};
use ablate_core::eval::MetricConfig;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};

pub const SEED_ENV: &str = "ABLATE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// `"default"` or a path to a concept-map JSON file.
    pub concept_map: String,
    pub schedule: ScheduleConfig,
    pub model: Arch,
    pub pretrain: PretrainSettings,
    pub task: TaskSpec,
    pub data: DataSettings,
    pub objective: ObjectiveSpec,
    pub subset: String,
    pub train: TrainSettings,
    pub metrics: MetricConfig,
    pub output: PathBuf,
    pub sweep: SweepSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            concept_map: "default".into(),
            schedule: ScheduleConfig::default(),
            model: Arch::default(),
            pretrain: PretrainSettings::default(),
            task: TaskSpec::default(),
            data: DataSettings::default(),
            objective: ObjectiveSpec::default(),
            subset: "xattn".into(),
            train: TrainSettings::default(),
            metrics: MetricConfig::default(),
            output: PathBuf::from("out"),
            sweep: SweepSettings::default(),
        }
    }
}

/// Network widths; the vocabulary size comes from the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Arch {
    pub embed_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
}

impl Default for Arch {
    fn default() -> Self {
        let m = ModelConfig::standard(0);
        Self { embed_dim: m.embed_dim, time_dim: m.time_dim, hidden: m.hidden }
    }
}

/// Pretraining settings; the seed is the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub memorize: bool,
    pub memo_weight: f64,
    pub train_embeddings: bool,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            steps: d.steps,
            batch: d.batch,
            lr: d.lr,
            memorize: d.memorize,
            memo_weight: d.memo_weight,
            train_embeddings: d.train_embeddings,
        }
    }
}

/// A relation target of the concept map. `kind` and `anchor`, when given,
/// must agree with the map or override the anchor respectively.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub target: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor: Option<String>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { target: "grumpy".into(), kind: None, anchor: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    pub n: usize,
    /// Sampler steps used to generate the dataset.
    pub steps: usize,
    /// `auto`, `anchor` or `target`; `auto` follows the objective.
    pub source: String,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { n: 1000, steps: 200, source: "auto".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSpec {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self { kind: "model".into(), lambda: None, penalty: None }
    }
}

/// Unset fields fall back to the tuned defaults of the objective and subset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub objectives: Vec<String>,
    pub subsets: Vec<String>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            objectives: vec!["model".into(), "noise".into(), "max-loss".into()],
            subsets: SubsetKind::ALL.iter().map(|s| s.as_str().into()).collect(),
        }
    }
}

pub fn parse_objective(s: &str) -> Result<ObjectiveKind> {
    s.parse().map_err(|e: ablate_core::ablation::AblationError| usage(e.to_string()))
}

pub fn parse_subset(s: &str) -> Result<SubsetKind> {
    s.parse().map_err(|e: ablate_core::ablation::AblationError| usage(e.to_string()))
}

impl RunConfig {
    /// Reads `path` (or the defaults) and applies `ABLATE_SEED`. Callers apply
    /// flag overrides and then `validate`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| usage(format!("config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    /// Checks every field that can be checked without running anything.
    pub fn validate(&self) -> Result<()> {
        let map = self.concept_map()?;
        self.task(&map)?;
        self.source()?;
        self.objective()?;
        let subset = parse_subset(&self.subset)?;
        self.ablate_config(subset)?;
        self.model_config()?;
        ablate_core::diffusion::NoiseSchedule::new(self.schedule).map_err(|e| usage(e.to_string()))?;
        self.metrics.validate().map_err(|e| usage(e.to_string()))?;
        for o in &self.sweep.objectives {
            parse_objective(o)?;
        }
        for s in &self.sweep.subsets {
            parse_subset(s)?;
        }
        if self.data.n == 0 || self.data.steps == 0 || self.pretrain.batch == 0 {
            return Err(usage("data.n, data.steps and pretrain.batch must be positive"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::standard()
    }

    pub fn concept_map(&self) -> Result<ConceptMap> {
        let map = if self.concept_map == "default" {
            default_concept_map()
        } else {
            let p = Path::new(&self.concept_map);
            if !p.is_file() {
                return Err(usage(format!("concept map {} does not exist", p.display())));
            }
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("concept map {}: {e}", p.display())))?
        };
        map.validate().map_err(|e| usage(format!("concept map: {e}")))?;
        let vocab = self.vocab();
        for c in &map.concepts {
            if matches!(c.kind, ablate_core::concepts::ConceptKind::Composition { .. }) {
                continue;
            }
            vocab.id(&c.name).map_err(|_| usage(format!("concept map: {:?} has no vocabulary token", c.name)))?;
        }
        Ok(map)
    }

    pub fn task(&self, map: &ConceptMap) -> Result<Task> {
        let mut task = Task::from_relation(map, &self.task.target).map_err(|e| usage(format!("task: {e}")))?;
        let kind = match &task {
            Task::Instance { .. } => "instance",
            Task::Style { .. } => "style",
            Task::Composition { .. } => "composition",
            Task::Memorization { .. } => "memorization",
        };
        if let Some(k) = &self.task.kind {
            if k != kind {
                return Err(usage(format!("task: {} is a {kind} target, not {k}", self.task.target)));
            }
        }
        if let Some(a) = &self.task.anchor {
            map.get(a).map_err(|e| usage(format!("task: {e}")))?;
            match &mut task {
                Task::Instance { anchor, .. } | Task::Style { anchor, .. } | Task::Memorization { anchor, .. } => {
                    *anchor = a.clone();
                }
                Task::Composition { .. } => return Err(usage("task: composition targets take no anchor")),
            }
        }
        Ok(task)
    }

    /// `None` for `auto`.
    pub fn source(&self) -> Result<Option<Source>> {
        match self.data.source.as_str() {
            "auto" => Ok(None),
            "anchor" => Ok(Some(Source::Anchor)),
            "target" => Ok(Some(Source::Target)),
            s => Err(usage(format!("data.source must be auto, anchor or target, got {s:?}"))),
        }
    }

    /// Dataset source for `kind`, honouring an explicit setting.
    pub fn source_for(&self, kind: ObjectiveKind) -> Result<Source> {
        Ok(self.source()?.unwrap_or(if kind.uses_target_samples() { Source::Target } else { Source::Anchor }))
    }

    pub fn objective(&self) -> Result<Objective> {
        self.objective_of(parse_objective(&self.objective.kind)?)
    }

    /// `kind` with this config's lambda and penalty overrides.
    pub fn objective_of(&self, kind: ObjectiveKind) -> Result<Objective> {
        let mut obj = Objective::new(kind);
        if let Some(l) = self.objective.lambda {
            obj.lambda = l;
        }
        if self.objective.penalty.is_some() && kind == ObjectiveKind::MaxLoss {
            obj.penalty = self.objective.penalty;
        }
        obj.validate().map_err(|e| usage(e.to_string()))?;
        Ok(obj)
    }

    pub fn ablate_config(&self, subset: SubsetKind) -> Result<AblateConfig> {
        self.ablate_config_of(parse_objective(&self.objective.kind)?, subset)
    }

    pub fn ablate_config_of(&self, kind: ObjectiveKind, subset: SubsetKind) -> Result<AblateConfig> {
        let mut c = AblateConfig::recommended(kind, subset, self.seed);
        if let Some(s) = self.train.steps {
            c.steps = s;
        }
        if let Some(b) = self.train.batch {
            c.batch = b;
        }
        if let Some(lr) = self.train.lr {
            c.lr = lr;
        }
        if c.batch == 0 || !(c.lr > 0.0 && c.lr.is_finite()) {
            return Err(usage("train.batch must be positive and train.lr finite and positive"));
        }
        Ok(c)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let Arch { embed_dim, time_dim, hidden } = self.model;
        if embed_dim == 0 || hidden == 0 || time_dim == 0 || time_dim % 2 != 0 {
            return Err(usage("model widths must be positive and time_dim even"));
        }
        Ok(ModelConfig { vocab: self.vocab().len(), embed_dim, time_dim, hidden })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: p.steps,
            batch: p.batch,
            lr: p.lr,
            seed: self.seed,
            memorize: p.memorize,
            memo_weight: p.memo_weight,
            train_embeddings: p.train_embeddings,
        }
    }
}

/// Fails with a usage error unless every path exists.
pub fn require_files(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(usage(format!("{} does not exist", p.display())));
        }
    }
    Ok(())
}
