use std::ops::Range;

use super::net::{denoise, Cond, ModelConfig};
use super::schedule::NoiseSchedule;
use super::DiffusionError;
use crate::concepts::{Prompt, PROMPT_LEN};
use crate::numcore::{normal, rng_stream, ParamMap, Tensor};
use crate::par;

/// Rows per RNG stream; fixed so results never depend on thread count.
pub const CHUNK: usize = 32;
/// Magnitude beyond which a chain is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 100.0;

/// A noise predictor over a fixed set of conditioned rows.
pub trait EpsModel: Sync {
    fn rows(&self) -> usize;
    /// Predictions for rows `rows` at points `x` and integer timestep `t`.
    fn eps(&self, rows: Range<usize>, x: &[[f64; 2]], t: usize) -> Result<Vec<[f64; 2]>, DiffusionError>;
}

/// The network conditioned on one prompt (or embedding set) per row.
pub struct NetEps<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamMap,
    pub cond: RowCond<'a>,
}

pub enum RowCond<'a> {
    Prompts(&'a [Prompt]),
    /// `(rows * PROMPT_LEN) x embed_dim`.
    Embeddings(&'a Tensor),
}

impl EpsModel for NetEps<'_> {
    fn rows(&self) -> usize {
        match &self.cond {
            RowCond::Prompts(p) => p.len(),
            RowCond::Embeddings(e) => e.rows() / PROMPT_LEN,
        }
    }

    fn eps(&self, rows: Range<usize>, x: &[[f64; 2]], t: usize) -> Result<Vec<[f64; 2]>, DiffusionError> {
        let tv = vec![t as f64; x.len()];
        let out = match &self.cond {
            RowCond::Prompts(p) => denoise(self.cfg, self.params, x, &tv, Cond::Prompts(&p[rows]))?,
            RowCond::Embeddings(e) => {
                let d = e.cols();
                let slice = e.data()[rows.start * PROMPT_LEN * d..rows.end * PROMPT_LEN * d].to_vec();
                let sub = Tensor::new(vec![rows.len() * PROMPT_LEN, d], slice)?;
                denoise(self.cfg, self.params, x, &tv, Cond::Embeddings(&sub))?
            }
        };
        Ok(out)
    }
}

/// Runs one chunk of the reverse chain from pure noise.
fn run_chunk(
    model: &dyn EpsModel,
    rows: Range<usize>,
    taus: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
    chunk: u64,
) -> Result<Vec<[f64; 2]>, DiffusionError> {
    let mut rng = rng_stream(seed, chunk);
    let mut x: Vec<[f64; 2]> = rows.clone().map(|_| [normal(&mut rng), normal(&mut rng)]).collect();
    for i in (1..taus.len()).rev() {
        let (t, tp) = (taus[i], taus[i - 1]);
        let (at, ap) = (schedule.alpha_bar(t), schedule.alpha_bar(tp));
        let b = 1.0 - at / ap;
        let e = model.eps(rows.clone(), &x, t)?;
        let coef = b / (1.0 - at).sqrt();
        let inv = 1.0 / (1.0 - b).sqrt();
        let var = b * (1.0 - ap) / (1.0 - at);
        let sd = var.sqrt();
        for (r, (xi, ei)) in x.iter_mut().zip(&e).enumerate() {
            for d in 0..2 {
                let mean = (xi[d] - coef * ei[d]) * inv;
                xi[d] = if i > 1 { mean + sd * normal(&mut rng) } else { mean };
            }
            if !(xi[0].abs() <= DIVERGENCE_BOUND && xi[1].abs() <= DIVERGENCE_BOUND) {
                return Err(DiffusionError::Diverged { row: rows.start + r, t });
            }
        }
    }
    Ok(x)
}

/// Ancestral sampling with fixed posterior variance over a strided schedule.
///
/// Row `r` depends only on `(seed, r / CHUNK)`, the row count of its chunk and
/// its own conditioning, so identical seeds reproduce identical samples for
/// any thread count.
pub fn sample_ancestral(
    model: &dyn EpsModel,
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<[f64; 2]>, DiffusionError> {
    let n = model.rows();
    let taus = schedule.timesteps(steps);
    let chunks = n.div_ceil(CHUNK);
    let parts = par::try_map_range(chunks, |c| {
        let rows = c * CHUNK..((c + 1) * CHUNK).min(n);
        run_chunk(model, rows, &taus, schedule, seed, c as u64)
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Sampling conditioned on prompts.
pub fn sample_prompts(
    cfg: &ModelConfig,
    params: &ParamMap,
    prompts: &[Prompt],
    steps: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<[f64; 2]>, DiffusionError> {
    sample_ancestral(&NetEps { cfg, params, cond: RowCond::Prompts(prompts) }, steps, schedule, seed)
}

/// Exact noise predictor for Gaussian data `N(mu, S)`:
/// `eps* = sqrt(1-abar) (abar S + (1-abar) I)^{-1} (x - sqrt(abar) mu)`.
pub struct GaussianEps {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub n: usize,
    pub schedule: NoiseSchedule,
}

impl EpsModel for GaussianEps {
    fn rows(&self) -> usize {
        self.n
    }

    fn eps(&self, _rows: Range<usize>, x: &[[f64; 2]], t: usize) -> Result<Vec<[f64; 2]>, DiffusionError> {
        let a = self.schedule.alpha_bar(t);
        let m =
            [[a * self.cov[0][0] + 1.0 - a, a * self.cov[0][1]], [a * self.cov[1][0], a * self.cov[1][1] + 1.0 - a]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let s = (1.0 - a).sqrt();
        let sa = a.sqrt();
        Ok(x.iter()
            .map(|p| {
                let d = [p[0] - sa * self.mean[0], p[1] - sa * self.mean[1]];
                [s * (inv[0][0] * d[0] + inv[0][1] * d[1]), s * (inv[1][0] * d[0] + inv[1][1] * d[1])]
            })
            .collect())
    }
}
