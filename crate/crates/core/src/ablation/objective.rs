use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AblationError;
use crate::concepts::Prompt;
use crate::diffusion::net::forward;
use crate::diffusion::net::{EMB, W_K, W_V};
use crate::diffusion::{eps_loss_node, mean_sq_dist, BoundParams, Cond, ModelConfig, NoiseDraw, NoiseSchedule};
use crate::numcore::{NodeId, NumError, ParamMap, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Match the target-prompt prediction to the stop-gradient anchor prediction.
    ModelBased,
    /// Standard denoising loss on anchor points relabeled with the target prompt.
    NoiseBased,
    /// The model-based kernel evaluated on target-concept points.
    ReverseKl,
    /// Hinged loss maximization on target points with a weight penalty.
    MaxLoss,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] =
        [ObjectiveKind::ModelBased, ObjectiveKind::NoiseBased, ObjectiveKind::ReverseKl, ObjectiveKind::MaxLoss];

    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::ModelBased => "model",
            ObjectiveKind::NoiseBased => "noise",
            ObjectiveKind::ReverseKl => "reverse-kl",
            ObjectiveKind::MaxLoss => "max-loss",
        }
    }

    /// Default step budget of each variant.
    pub fn default_steps(&self) -> usize {
        match self {
            ObjectiveKind::ModelBased | ObjectiveKind::ReverseKl => 100,
            ObjectiveKind::NoiseBased => 200,
            ObjectiveKind::MaxLoss => 50,
        }
    }

    /// Whether training points are drawn under the target prompt.
    pub fn uses_target_samples(&self) -> bool {
        matches!(self, ObjectiveKind::ReverseKl | ObjectiveKind::MaxLoss)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = AblationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "model" | "model-based" => Ok(ObjectiveKind::ModelBased),
            "noise" | "noise-based" => Ok(ObjectiveKind::NoiseBased),
            "reverse-kl" => Ok(ObjectiveKind::ReverseKl),
            "max-loss" | "baseline" => Ok(ObjectiveKind::MaxLoss),
            _ => Err(AblationError::Config(format!("unknown objective {s:?}"))),
        }
    }
}

/// Default weight-penalty factor of the max-loss baseline.
pub const BASELINE_PENALTY: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub kind: ObjectiveKind,
    /// Weight of the anchor-regularization diffusion loss.
    pub lambda: f64,
    /// Weight-penalty factor; present exactly for the max-loss baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
}

impl Objective {
    /// Regularization weight 1 for the ablation objectives; the baseline runs
    /// unregularized with penalty factor 10.
    pub fn new(kind: ObjectiveKind) -> Self {
        match kind {
            ObjectiveKind::MaxLoss => Self { kind, lambda: 0.0, penalty: Some(BASELINE_PENALTY) },
            _ => Self { kind, lambda: 1.0, penalty: None },
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<(), AblationError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(AblationError::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        match (self.kind, self.penalty) {
            (ObjectiveKind::MaxLoss, Some(p)) if p >= 0.0 => Ok(()),
            (ObjectiveKind::MaxLoss, _) => Err(AblationError::Config("max-loss needs a penalty factor >= 0".into())),
            (_, Some(_)) => Err(AblationError::Config(format!("{} takes no penalty factor", self.kind))),
            (_, None) => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetKind {
    Embed,
    Xattn,
    Full,
}

impl SubsetKind {
    pub const ALL: [SubsetKind; 3] = [SubsetKind::Embed, SubsetKind::Xattn, SubsetKind::Full];

    pub fn as_str(&self) -> &'static str {
        match self {
            SubsetKind::Embed => "embed",
            SubsetKind::Xattn => "xattn",
            SubsetKind::Full => "full",
        }
    }
}

impl fmt::Display for SubsetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SubsetKind {
    type Err = AblationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "embed" => Ok(SubsetKind::Embed),
            "xattn" => Ok(SubsetKind::Xattn),
            "full" => Ok(SubsetKind::Full),
            _ => Err(AblationError::Config(format!("unknown parameter subset {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetMask {
    pub kind: SubsetKind,
    pub names: BTreeSet<String>,
}

/// Parameter names trained under `kind`.
pub fn select_params(params: &ParamMap, kind: SubsetKind) -> Result<SubsetMask, AblationError> {
    let want: Vec<&str> = match kind {
        SubsetKind::Embed => vec![EMB],
        SubsetKind::Xattn => vec![W_K, W_V],
        SubsetKind::Full => params.keys().map(String::as_str).collect(),
    };
    let mut names = BTreeSet::new();
    for w in want {
        if !params.contains_key(w) {
            return Err(AblationError::Config(format!("parameter {w} missing for subset {kind}")));
        }
        names.insert(w.to_string());
    }
    Ok(SubsetMask { kind, names })
}

/// One optimization minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<[f64; 2]>,
    pub c: Vec<Prompt>,
    pub cstar: Vec<Prompt>,
    pub reg_x: Vec<[f64; 2]>,
    pub reg_c: Vec<Prompt>,
}

/// `||sg(eps_hat(x_t, c, t)) - eps_hat(x_t, c*, t)||^2`, averaged over rows, at fixed `x_t`.
pub fn matching_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &BoundParams,
    x_t: &[[f64; 2]],
    t: &[usize],
    c: &[Prompt],
    cstar: &[Prompt],
) -> Result<NodeId, NumError> {
    let tf: Vec<f64> = t.iter().map(|&v| v as f64).collect();
    let xt = tape.constant(Tensor::from_points(x_t));
    let anchor = forward(tape, cfg, p, xt, &tf, Cond::Prompts(c))?;
    let anchor = tape.stop_grad(anchor)?;
    let pred = forward(tape, cfg, p, xt, &tf, Cond::Prompts(cstar))?;
    mean_sq_dist(tape, anchor, pred)
}

/// Model-based loss with `x_t` drawn from the forward process at `x0`.
#[allow(clippy::too_many_arguments)]
pub fn model_based_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &BoundParams,
    x0: &[[f64; 2]],
    c: &[Prompt],
    cstar: &[Prompt],
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<NodeId, NumError> {
    matching_node(tape, cfg, p, &draw.noised(x0, schedule), &draw.t, c, cstar)
}

/// `lambda_w * mean((theta - theta_0)^2)` over every entry of the named parameters.
pub fn weight_penalty_node(
    tape: &mut Tape,
    p: &BoundParams,
    frozen: &ParamMap,
    names: &BTreeSet<String>,
    factor: f64,
) -> Result<NodeId, NumError> {
    let mut total: Option<NodeId> = None;
    let mut count = 0usize;
    for name in names {
        let f = tape.constant(frozen[name].clone());
        count += frozen[name].len();
        let d = tape.sub(p.node(name), f)?;
        let sq = tape.square(d)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    tape.scale(total, factor / count.max(1) as f64)
}

/// Scalar parts of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub ablation: f64,
    pub reg: f64,
    pub total: f64,
}

/// Records `lambda * L(x, c) + ablation term` on `tape`.
///
/// `frozen` is the pretrained reference used by the baseline penalty; `mask`
/// names the parameters the penalty covers.
#[allow(clippy::too_many_arguments)]
pub fn combined_node(
    tape: &mut Tape,
    objective: &Objective,
    cfg: &ModelConfig,
    p: &BoundParams,
    frozen: &ParamMap,
    mask: &BTreeSet<String>,
    batch: &Batch,
    draw: &NoiseDraw,
    reg_draw: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<(NodeId, NodeId, Option<NodeId>), NumError> {
    let abl = match objective.kind {
        ObjectiveKind::ModelBased | ObjectiveKind::ReverseKl => {
            model_based_node(tape, cfg, p, &batch.x, &batch.c, &batch.cstar, draw, schedule)?
        }
        ObjectiveKind::NoiseBased => {
            eps_loss_node(tape, cfg, p, &batch.x, Cond::Prompts(&batch.cstar), draw, schedule)?
        }
        ObjectiveKind::MaxLoss => {
            let l = eps_loss_node(tape, cfg, p, &batch.x, Cond::Prompts(&batch.cstar), draw, schedule)?;
            let hinge = tape.affine(l, -1.0, 1.0)?;
            let hinge = tape.relu(hinge)?;
            let pen = weight_penalty_node(tape, p, frozen, mask, objective.penalty.unwrap_or(BASELINE_PENALTY))?;
            tape.add(hinge, pen)?
        }
    };
    if objective.lambda == 0.0 {
        return Ok((abl, abl, None));
    }
    let reg = eps_loss_node(tape, cfg, p, &batch.reg_x, Cond::Prompts(&batch.reg_c), reg_draw, schedule)?;
    let scaled = tape.scale(reg, objective.lambda)?;
    let total = tape.add(scaled, abl)?;
    Ok((total, abl, Some(reg)))
}

/// Value and gradient (restricted to `mask`) of the combined objective.
#[allow(clippy::too_many_arguments)]
pub fn combined_objective(
    objective: &Objective,
    cfg: &ModelConfig,
    params: &ParamMap,
    frozen: &ParamMap,
    mask: &BTreeSet<String>,
    batch: &Batch,
    draw: &NoiseDraw,
    reg_draw: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<(LossParts, ParamMap), NumError> {
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, params, Some(mask));
    let (total, abl, reg) =
        combined_node(&mut tape, objective, cfg, &p, frozen, mask, batch, draw, reg_draw, schedule)?;
    let mut g = tape.backward(total)?;
    let grads = mask.iter().map(|k| (k.clone(), g.take(p.node(k)))).collect();
    let parts = LossParts {
        ablation: tape.value(abl).item(),
        reg: reg.map_or(0.0, |r| tape.value(r).item()),
        total: tape.value(total).item(),
    };
    Ok((parts, grads))
}

/// Value of the matching kernel at fixed `x_t` (no gradient).
pub fn matching_loss(
    cfg: &ModelConfig,
    params: &ParamMap,
    x_t: &[[f64; 2]],
    t: &[usize],
    c: &[Prompt],
    cstar: &[Prompt],
) -> Result<f64, NumError> {
    let mut tape = Tape::new();
    let p = BoundParams::frozen(&mut tape, params);
    let l = matching_node(&mut tape, cfg, &p, x_t, t, c, cstar)?;
    Ok(tape.value(l).item())
}

/// Per-timestep factor relating the matching loss to the KL between the two
/// reverse-step Gaussians: `KL = eta_t * ||eps_c - eps_c*||^2` with
/// `eta_t = beta_t^2 / (2 beta_tilde_t alpha_t (1 - abar_t))`. Defined for t >= 2.
pub fn kl_factor(schedule: &NoiseSchedule, t: usize) -> f64 {
    let b = schedule.beta(t);
    b * b / (2.0 * schedule.beta_tilde(t) * schedule.alpha(t) * (1.0 - schedule.alpha_bar(t)))
}
