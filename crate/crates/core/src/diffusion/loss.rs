use rand::Rng as _;

use super::net::{forward, BoundParams, Cond, ModelConfig};
use super::schedule::NoiseSchedule;
use crate::concepts::Prompt;
use crate::numcore::{normal, NodeId, NumError, ParamMap, Rng, Tape, Tensor};

/// Timesteps and Gaussian noise for one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Vec<[f64; 2]>,
}

impl NoiseDraw {
    /// `t` uniform in `1..=T`, `eps` standard normal.
    pub fn sample(n: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> Self {
        let t = (0..n).map(|_| rng.random_range(1..=schedule.t_max())).collect();
        let eps = (0..n).map(|_| [normal(rng), normal(rng)]).collect();
        Self { t, eps }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn t_f64(&self) -> Vec<f64> {
        self.t.iter().map(|&t| t as f64).collect()
    }

    /// Forward-process points for `x0` under this draw.
    pub fn noised(&self, x0: &[[f64; 2]], schedule: &NoiseSchedule) -> Vec<[f64; 2]> {
        x0.iter().zip(&self.t).zip(&self.eps).map(|((&x, &t), &e)| schedule.forward_noise(x, t, e)).collect()
    }
}

/// Mean over rows of the squared row norm of `a - b`.
pub fn mean_sq_dist(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
    let n = tape.value(a).rows();
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Records `mean_i ||eps_i - eps_hat(x_t,i, c_i, t_i)||^2` on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn eps_loss_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &BoundParams,
    x0: &[[f64; 2]],
    cond: Cond<'_>,
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<NodeId, NumError> {
    let xt = tape.constant(Tensor::from_points(&draw.noised(x0, schedule)));
    let pred = forward(tape, cfg, p, xt, &draw.t_f64(), cond)?;
    let eps = tape.constant(Tensor::from_points(&draw.eps));
    mean_sq_dist(tape, eps, pred)
}

/// The simplified diffusion objective with unit time weighting.
pub fn diffusion_loss(
    cfg: &ModelConfig,
    params: &ParamMap,
    x0: &[[f64; 2]],
    prompts: &[Prompt],
    schedule: &NoiseSchedule,
    draw: &NoiseDraw,
) -> Result<f64, NumError> {
    let mut tape = Tape::new();
    let p = BoundParams::frozen(&mut tape, params);
    let l = eps_loss_node(&mut tape, cfg, &p, x0, Cond::Prompts(prompts), draw, schedule)?;
    Ok(tape.value(l).item())
}

/// Diffusion loss and its gradient with respect to every parameter.
pub fn diffusion_loss_grad(
    cfg: &ModelConfig,
    params: &ParamMap,
    x0: &[[f64; 2]],
    prompts: &[Prompt],
    schedule: &NoiseSchedule,
    draw: &NoiseDraw,
) -> Result<(f64, ParamMap), NumError> {
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, params, None);
    let l = eps_loss_node(&mut tape, cfg, &p, x0, Cond::Prompts(prompts), draw, schedule)?;
    let mut g = tape.backward(l)?;
    let grads = p.iter().map(|(k, &id)| (k.clone(), g.take(id))).collect();
    Ok((tape.value(l).item(), grads))
}
