//! Conditional noise predictor `eps_hat(x_t, c, t)`.
//!
//! Sinusoidal time features are projected and concatenated with `x_t`, lifted
//! to a hidden state, conditioned by single-head cross-attention over the
//! prompt's token embeddings, and read out by a two-layer head.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::concepts::{Prompt, PROMPT_LEN};
use crate::numcore::{normal, NodeId, NumError, ParamMap, Rng, Tape, Tensor};

pub const EMB: &str = "emb";
pub const TIME_W: &str = "time_w";
pub const TIME_B: &str = "time_b";
pub const IN_W: &str = "in_w";
pub const IN_B: &str = "in_b";
pub const W_Q: &str = "w_q";
pub const W_K: &str = "w_k";
pub const W_V: &str = "w_v";
pub const W_O: &str = "w_o";
pub const HEAD1_W: &str = "head1_w";
pub const HEAD1_B: &str = "head1_b";
pub const HEAD2_W: &str = "head2_w";
pub const HEAD2_B: &str = "head2_b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    /// Even; half sine and half cosine features.
    pub time_dim: usize,
    pub hidden: usize,
}

impl ModelConfig {
    pub fn standard(vocab: usize) -> Self {
        Self { vocab, embed_dim: 16, time_dim: 16, hidden: 64 }
    }

    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (v, d, td, h) = (self.vocab, self.embed_dim, self.time_dim, self.hidden);
        vec![
            (EMB, vec![v, d]),
            (TIME_W, vec![td, td]),
            (TIME_B, vec![td]),
            (IN_W, vec![2 + td, h]),
            (IN_B, vec![h]),
            (W_Q, vec![h, d]),
            (W_K, vec![d, d]),
            (W_V, vec![d, d]),
            (W_O, vec![d, h]),
            (HEAD1_W, vec![h, h]),
            (HEAD1_B, vec![h]),
            (HEAD2_W, vec![h, 2]),
            (HEAD2_B, vec![2]),
        ]
    }

    /// Embeddings ~ N(0, 1); weights ~ N(0, 1/fan_in), the output layer shrunk
    /// tenfold; biases zero.
    pub fn init(&self, rng: &mut Rng) -> ParamMap {
        let mut out = ParamMap::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let scale = match name {
                    EMB => 1.0,
                    HEAD2_W => 0.1 / (shape[0] as f64).sqrt(),
                    _ => 1.0 / (shape[0] as f64).sqrt(),
                };
                (0..n).map(|_| scale * normal(rng)).collect()
            };
            out.insert(name.to_string(), Tensor::new(shape, data).unwrap());
        }
        out
    }

    pub fn check_params(&self, params: &ParamMap) -> Result<(), NumError> {
        let expected = self.param_shapes();
        if params.len() != expected.len() {
            return Err(NumError::UnknownParam { name: format!("expected {} parameters", expected.len()) });
        }
        for (name, shape) in expected {
            let p = params.get(name).ok_or_else(|| NumError::UnknownParam { name: name.into() })?;
            if p.shape() != shape.as_slice() {
                return Err(NumError::GradShape { name: name.into(), got: p.shape().to_vec(), want: shape });
            }
            if !p.is_finite() {
                return Err(NumError::NonFiniteGrad { name: name.into() });
            }
        }
        Ok(())
    }

    /// `n x time_dim` sinusoidal features with frequencies `1000^(-i/half)`.
    pub fn time_features(&self, t: &[f64]) -> Tensor {
        let half = self.time_dim / 2;
        let mut data = Vec::with_capacity(t.len() * self.time_dim);
        for &tv in t {
            let (mut s, mut c) = (Vec::with_capacity(half), Vec::with_capacity(half));
            for i in 0..half {
                let f = (-(1000f64.ln()) * i as f64 / half as f64).exp();
                s.push((tv * f).sin());
                c.push((tv * f).cos());
            }
            data.extend(s);
            data.extend(c);
        }
        Tensor::new(vec![t.len(), self.time_dim], data).unwrap()
    }
}

/// Parameter nodes bound on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    nodes: BTreeMap<String, NodeId>,
}

impl BoundParams {
    /// Names in `trainable` become differentiable leaves; the rest constants.
    /// `None` makes every parameter differentiable.
    pub fn bind(tape: &mut Tape, params: &ParamMap, trainable: Option<&BTreeSet<String>>) -> Self {
        let nodes = params
            .iter()
            .map(|(k, v)| {
                let live = trainable.is_none_or(|s| s.contains(k));
                let id = if live { tape.param(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), id)
            })
            .collect();
        Self { nodes }
    }

    /// All parameters as constants.
    pub fn frozen(tape: &mut Tape, params: &ParamMap) -> Self {
        Self::bind(tape, params, Some(&BTreeSet::new()))
    }

    pub fn node(&self, name: &str) -> NodeId {
        self.nodes[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }
}

/// Conditioning for a batch: prompts looked up in the embedding table, or
/// explicit per-token embeddings of shape `(n * PROMPT_LEN) x embed_dim`.
#[derive(Clone, Copy, Debug)]
pub enum Cond<'a> {
    Prompts(&'a [Prompt]),
    Embeddings(&'a Tensor),
}

impl Cond<'_> {
    pub fn rows(&self) -> usize {
        match self {
            Cond::Prompts(p) => p.len(),
            Cond::Embeddings(e) => e.rows() / PROMPT_LEN,
        }
    }
}

fn hidden_state(tape: &mut Tape, cfg: &ModelConfig, p: &BoundParams, x: NodeId, t: &[f64]) -> Result<NodeId, NumError> {
    let tf = tape.constant(cfg.time_features(t));
    let te = tape.matmul(tf, p.node(TIME_W))?;
    let te = tape.add_bias(te, p.node(TIME_B))?;
    let te = tape.silu(te)?;
    let xin = tape.concat_cols(x, te)?;
    let h = tape.matmul(xin, p.node(IN_W))?;
    let h = tape.add_bias(h, p.node(IN_B))?;
    tape.silu(h)
}

fn token_embeddings(tape: &mut Tape, p: &BoundParams, cond: Cond<'_>) -> Result<NodeId, NumError> {
    match cond {
        Cond::Prompts(ps) => {
            let rows: Vec<usize> = ps.iter().flat_map(|q| q.tokens().iter().map(|&t| t as usize)).collect();
            tape.gather(p.node(EMB), &rows)
        }
        Cond::Embeddings(e) => Ok(tape.constant(e.clone())),
    }
}

/// Softmax attention weights (`n x PROMPT_LEN`) of hidden state `h` over tokens `e`.
fn attention_weights_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &BoundParams,
    h: NodeId,
    e: NodeId,
) -> Result<NodeId, NumError> {
    let q = tape.matmul(h, p.node(W_Q))?;
    let k = tape.matmul(e, p.node(W_K))?;
    let scores = tape.attn_scores(q, k, PROMPT_LEN, 1.0 / (cfg.embed_dim as f64).sqrt())?;
    tape.softmax_rows(scores)
}

fn check_batch(tape: &Tape, x: NodeId, t: &[f64], cond: Cond<'_>) -> Result<(), NumError> {
    let n = t.len();
    if tape.value(x).shape() != [n, 2] || cond.rows() != n {
        return Err(NumError::ShapeMismatch {
            op: "forward",
            shapes: vec![tape.value(x).shape().to_vec(), vec![cond.rows(), PROMPT_LEN]],
        });
    }
    Ok(())
}

/// Records one forward pass; returns the `n x 2` prediction node.
pub fn forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &BoundParams,
    x: NodeId,
    t: &[f64],
    cond: Cond<'_>,
) -> Result<NodeId, NumError> {
    check_batch(tape, x, t, cond)?;
    let h = hidden_state(tape, cfg, p, x, t)?;
    let e = token_embeddings(tape, p, cond)?;
    let w = attention_weights_node(tape, cfg, p, h, e)?;
    let v = tape.matmul(e, p.node(W_V))?;
    let a = tape.attn_mix(w, v, PROMPT_LEN)?;
    let ao = tape.matmul(a, p.node(W_O))?;
    let h2 = tape.add(h, ao)?;

    let z = tape.matmul(h2, p.node(HEAD1_W))?;
    let z = tape.add_bias(z, p.node(HEAD1_B))?;
    let z = tape.silu(z)?;
    let out = tape.matmul(z, p.node(HEAD2_W))?;
    tape.add_bias(out, p.node(HEAD2_B))
}

/// Noise prediction without gradients.
pub fn denoise(
    cfg: &ModelConfig,
    params: &ParamMap,
    x_t: &[[f64; 2]],
    t: &[f64],
    cond: Cond<'_>,
) -> Result<Vec<[f64; 2]>, NumError> {
    let mut tape = Tape::new();
    let p = BoundParams::frozen(&mut tape, params);
    let x = tape.constant(Tensor::from_points(x_t));
    let out = forward(&mut tape, cfg, &p, x, t, cond)?;
    Ok(tape.value(out).to_points())
}

/// Attention weights over the prompt tokens, one row per input.
pub fn attention_weights(
    cfg: &ModelConfig,
    params: &ParamMap,
    x_t: &[[f64; 2]],
    t: &[f64],
    cond: Cond<'_>,
) -> Result<Tensor, NumError> {
    let mut tape = Tape::new();
    let p = BoundParams::frozen(&mut tape, params);
    let x = tape.constant(Tensor::from_points(x_t));
    check_batch(&tape, x, t, cond)?;
    let h = hidden_state(&mut tape, cfg, &p, x, t)?;
    let e = token_embeddings(&mut tape, &p, cond)?;
    let w = attention_weights_node(&mut tape, cfg, &p, h, e)?;
    Ok(tape.value(w).clone())
}

/// Per-token embedding rows of `prompts`, ready for `Cond::Embeddings`.
pub fn embedding_rows(params: &ParamMap, prompts: &[Prompt]) -> Tensor {
    let emb = &params[EMB];
    let d = emb.cols();
    let mut data = Vec::with_capacity(prompts.len() * PROMPT_LEN * d);
    for p in prompts {
        for &t in p.tokens() {
            data.extend_from_slice(emb.row(t as usize));
        }
    }
    Tensor::new(vec![prompts.len() * PROMPT_LEN, d], data).unwrap()
}
