//! Sparse mixture-of-experts feed-forward layer: linear router, Gaussian
//! logit noise, top-K selection and gate-weighted expert aggregation.
//!
//! Gate weights are the raw softmax probabilities of the selected experts,
//! with no renormalization over the selected set and no capacity limit. An
//! expert that no token selects is absent from the graph, so it receives no
//! gradient at all.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::BoundParams;

/// Top-K expert indices, `k` per token, highest probability first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl Selection {
    pub fn tokens(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, token: usize) -> &[usize] {
        &self.indices[token * self.k..(token + 1) * self.k]
    }

    /// Highest-probability expert of every token.
    pub fn top1(&self) -> Vec<usize> {
        self.indices.iter().step_by(self.k).copied().collect()
    }
}

/// Everything one router produces for a batch of tokens.
#[derive(Clone, Debug)]
pub struct RouterOutput {
    pub logits_clean: Var,
    pub logits_noisy: Var,
    pub probs_clean: Var,
    pub probs_noisy: Var,
    pub selection: Selection,
    pub gate_weights: Var,
}

/// Parameter handles of one expert MLP (`D → ffn → D`, GELU).
#[derive(Clone, Copy, Debug)]
pub struct ExpertParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ExpertParams {
    pub fn bind(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(ExpertParams {
            w1: p.get(&format!("{prefix}.w1"))?,
            b1: p.get(&format!("{prefix}.b1"))?,
            w2: p.get(&format!("{prefix}.w2"))?,
            b2: p.get(&format!("{prefix}.b2"))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.w1)?;
        let h = g.add(h, self.b1)?;
        let h = g.gelu(h)?;
        let y = g.matmul(h, self.w2)?;
        g.add(y, self.b2)
    }
}

/// The experts of one MoE layer.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub experts: Vec<ExpertParams>,
}

impl ExpertBank {
    pub fn bind(p: &BoundParams, layer_prefix: &str, num_experts: usize) -> Result<Self> {
        let experts = (0..num_experts)
            .map(|e| ExpertParams::bind(p, &format!("{layer_prefix}.experts.{e}")))
            .collect::<Result<_>>()?;
        Ok(ExpertBank { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }
}

/// Linear router over token features `h: [tokens, D]`.
///
/// Noise `ε ~ N(0, noise_std²)` is added to the logits only in training mode
/// with a positive `noise_std`; otherwise the noisy tensors are the clean
/// ones. Selection uses the noisy probabilities in training and the clean
/// ones in evaluation.
pub fn route<R: Rng + ?Sized>(
    g: &mut Graph,
    h: Var,
    weight: Var,
    bias: Var,
    top_k: usize,
    noise_std: f64,
    rng: &mut R,
    train_mode: bool,
) -> Result<RouterOutput> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::Config(format!(
            "noise_std must be a finite value >= 0, got {noise_std}"
        )));
    }
    let z = g.matmul(h, weight)?;
    let logits_clean = g.add(z, bias)?;
    let probs_clean = g.softmax(logits_clean)?;
    let (logits_noisy, probs_noisy) = if train_mode && noise_std > 0.0 {
        let shape = g.shape(logits_clean).to_vec();
        let dist = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let eps: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        let eps = g.constant(Tensor::new(shape, eps)?);
        let noisy = g.add(logits_clean, eps)?;
        (noisy, g.softmax(noisy)?)
    } else {
        (logits_clean, probs_clean)
    };
    let selecting = if train_mode { probs_noisy } else { probs_clean };
    let (gate_weights, indices) = g.top_k(selecting, top_k)?;
    Ok(RouterOutput {
        logits_clean,
        logits_noisy,
        probs_clean,
        probs_noisy,
        selection: Selection { k: top_k, indices },
        gate_weights,
    })
}

/// `out_b = Σ_j gate[b][j] · f_{sel[b][j]}(h_b)`.
pub fn moe_forward(
    g: &mut Graph,
    h: Var,
    selection: &Selection,
    gate_weights: Var,
    experts: &ExpertBank,
) -> Result<Var> {
    let tokens = g.shape(h)[0];
    let k = selection.k;
    if selection.indices.len() != tokens * k || g.shape(gate_weights) != [tokens, k] {
        return Err(Error::shape(
            "moe_forward",
            format!(
                "{} tokens, {} indices, gates {:?}",
                tokens,
                selection.indices.len(),
                g.shape(gate_weights)
            ),
        ));
    }
    let num_experts = experts.len();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); num_experts];
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); num_experts];
    for (pos, &e) in selection.indices.iter().enumerate() {
        if e >= num_experts {
            return Err(Error::Index {
                op: "moe_forward",
                index: e,
                len: num_experts,
            });
        }
        rows[e].push(pos / k);
        slots[e].push(pos);
    }
    let flat_gates = g.reshape(gate_weights, vec![tokens * k, 1])?;
    let mut parts = Vec::new();
    let mut dest = Vec::with_capacity(tokens * k);
    for (e, expert) in experts.experts.iter().enumerate() {
        if rows[e].is_empty() {
            continue;
        }
        let x = g.gather_rows(h, rows[e].clone())?;
        let y = expert.apply(g, x)?;
        let w = g.gather_rows(flat_gates, slots[e].clone())?;
        parts.push(g.mul(y, w)?);
        dest.extend_from_slice(&rows[e]);
    }
    let stacked = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat(parts, 0)?
    };
    g.scatter_add_rows(stacked, dest, tokens)
}

/// Selection and gates taken from an externally supplied distribution,
/// e.g. a teacher router's probabilities.
pub fn select_from(g: &mut Graph, probs: Var, top_k: usize) -> Result<(Var, Selection)> {
    let (gates, indices) = g.top_k(probs, top_k)?;
    Ok((gates, Selection { k: top_k, indices }))
}

#[cfg(test)]
mod tests;
