//! Pre-layernorm transformer over token sequences, used both as the dense
//! teacher backbone and as the MoE student.
//!
//! Tokens are embedded linearly, a learned per-position embedding is added,
//! and `depth` blocks of `x + attn(ln(x))`, `x + ffn(ln(x))` follow. Blocks
//! listed in `moe_layers` replace the FFN with a sparse MoE layer. Logits
//! come from a linear head on the mean over tokens of the final-normed
//! features. Layer indices are 1-based.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::{self, ExpertBank, ExpertParams, RouterOutput};
use crate::params::{normal_init, BoundParams, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub tokens_per_sample: usize,
    /// Width of each input token.
    pub input_dim: usize,
    /// Sorted 1-based indices of the blocks whose FFN is an MoE layer.
    #[serde(default)]
    pub moe_layers: Vec<usize>,
    #[serde(default = "one")]
    pub num_experts: usize,
    #[serde(default = "one")]
    pub top_k: usize,
    #[serde(default)]
    pub noise_std: f64,
}

fn one() -> usize {
    1
}

impl ModelConfig {
    /// Desk-scale student: 6 blocks of width 64, MoE in the last third.
    pub fn student_default() -> Self {
        ModelConfig {
            depth: 6,
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 128,
            num_classes: 8,
            tokens_per_sample: 16,
            input_dim: 16,
            moe_layers: vec![4, 5, 6],
            num_experts: 8,
            top_k: 1,
            noise_std: 1.0,
        }
    }

    /// Desk-scale dense teacher: same depth, twice the width.
    pub fn teacher_default() -> Self {
        ModelConfig {
            hidden_dim: 128,
            ffn_dim: 256,
            moe_layers: Vec::new(),
            num_experts: 1,
            top_k: 1,
            noise_std: 0.0,
            ..Self::student_default()
        }
    }

    pub fn is_dense(&self) -> bool {
        self.moe_layers.is_empty()
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.moe_layers.binary_search(&layer).is_ok()
    }

    /// The same topology with every MoE layer replaced by a dense FFN.
    pub fn to_dense(&self) -> Self {
        ModelConfig {
            moe_layers: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("num_classes", self.num_classes),
            ("tokens_per_sample", self.tokens_per_sample),
            ("input_dim", self.input_dim),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide hidden_dim ({})",
                self.heads, self.hidden_dim
            )));
        }
        if self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k ({}) exceeds num_experts ({})",
                self.top_k, self.num_experts
            )));
        }
        if !self.moe_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("moe_layers must be strictly increasing".into()));
        }
        if let Some(&bad) = self.moe_layers.iter().find(|&&l| l == 0 || l > self.depth) {
            return Err(Error::Config(format!("moe layer {bad} outside 1..={}", self.depth)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        u16::try_from(self.num_experts).map_err(|_| Error::Config("num_experts must fit in u16".into()))?;
        Ok(())
    }
}

pub fn block_prefix(layer: usize) -> String {
    format!("blocks.{layer}")
}

pub fn router_prefix(layer: usize) -> String {
    format!("blocks.{layer}.moe.router")
}

/// Deterministic initialization: weights `N(0, 0.02²)`, biases zero,
/// layernorm gains one. Each tensor's draw depends only on `seed` and its name.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
    let mut p = ParamSet::new();
    let weight = |p: &mut ParamSet, name: String, shape: &[usize]| {
        let t = normal_init(seed, &name, shape);
        p.insert(name, t);
    };
    weight(&mut p, "embed.w".into(), &[cfg.input_dim, d]);
    p.insert("embed.b", Tensor::zeros(&[d]));
    weight(&mut p, "pos".into(), &[cfg.tokens_per_sample, d]);
    for layer in 1..=cfg.depth {
        let b = block_prefix(layer);
        for ln in ["ln1", "ln2"] {
            p.insert(format!("{b}.{ln}.g"), Tensor::ones(&[d]));
            p.insert(format!("{b}.{ln}.b"), Tensor::zeros(&[d]));
        }
        for m in ["q", "k", "v", "o"] {
            weight(&mut p, format!("{b}.attn.w{m}"), &[d, d]);
            p.insert(format!("{b}.attn.b{m}"), Tensor::zeros(&[d]));
        }
        let mlp = |p: &mut ParamSet, prefix: String| {
            weight(p, format!("{prefix}.w1"), &[d, f]);
            p.insert(format!("{prefix}.b1"), Tensor::zeros(&[f]));
            weight(p, format!("{prefix}.w2"), &[f, d]);
            p.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]));
        };
        if cfg.is_moe_layer(layer) {
            for e in 0..cfg.num_experts {
                mlp(&mut p, format!("{b}.moe.experts.{e}"));
            }
        } else {
            mlp(&mut p, format!("{b}.mlp"));
        }
        if cfg.is_moe_layer(layer) {
            let r = router_prefix(layer);
            weight(&mut p, format!("{r}.w"), &[d, cfg.num_experts]);
            p.insert(format!("{r}.b"), Tensor::zeros(&[cfg.num_experts]));
        }
    }
    p.insert("ln_f.g", Tensor::ones(&[d]));
    p.insert("ln_f.b", Tensor::zeros(&[d]));
    weight(&mut p, "head.w".into(), &[d, cfg.num_classes]);
    p.insert("head.b", Tensor::zeros(&[cfg.num_classes]));
    Ok(p)
}

/// Outputs of one model forward.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    /// `[B, C]`
    pub logits: Var,
    /// Post-block token features `[B·N, D]`, keyed by 1-based layer.
    pub layer_features: BTreeMap<usize, Var>,
    /// Present for every MoE layer of a student forward.
    pub router_outputs: BTreeMap<usize, RouterOutput>,
    /// Experts selected at each MoE layer; differs from the student router's
    /// own selection when routing is delegated to a teacher.
    pub selections: BTreeMap<usize, moe::Selection>,
}

/// Who decides expert selection in a student forward.
#[derive(Clone, Copy, Debug)]
pub enum RouteBy<'a> {
    Student,
    /// Per-layer probabilities (e.g. a teacher router's) choose the experts
    /// and supply the gate weights. The student router still runs.
    External(&'a BTreeMap<usize, Var>),
}

#[derive(Clone, Copy, Debug)]
pub struct StudentOptions<'a> {
    pub train_mode: bool,
    pub route_by: RouteBy<'a>,
    /// Feed the expert aggregation stop-gradiented gate weights, so the task
    /// loss sends nothing back into the router.
    pub detach_gates: bool,
}

impl StudentOptions<'_> {
    pub fn train() -> Self {
        StudentOptions {
            train_mode: true,
            route_by: RouteBy::Student,
            detach_gates: false,
        }
    }

    pub fn eval() -> Self {
        StudentOptions {
            train_mode: false,
            ..Self::train()
        }
    }
}

fn affine_norm(g: &mut Graph, p: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let n = g.mul(n, p.get(&format!("{prefix}.g"))?)?;
    g.add(n, p.get(&format!("{prefix}.b"))?)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Multi-head self-attention over `x: [B·N, D]`; every sample attends only
/// within its own N tokens.
fn attention(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, prefix: &str, x: Var, batch: usize) -> Result<Var> {
    let n = cfg.tokens_per_sample;
    let d = cfg.hidden_dim;
    let dh = d / cfg.heads;
    let proj = |g: &mut Graph, m: &str| -> Result<Var> {
        let w = p.get(&format!("{prefix}.attn.w{m}"))?;
        let b = p.get(&format!("{prefix}.attn.b{m}"))?;
        linear(g, x, w, b)
    };
    let q = proj(g, "q")?;
    let k = proj(g, "k")?;
    let v = proj(g, "v")?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let split = |g: &mut Graph, t: Var| -> Result<Var> {
            let s = if cfg.heads == 1 {
                t
            } else {
                g.slice(t, 1, h * dh, (h + 1) * dh)?
            };
            g.reshape(s, vec![batch, n, dh])
        };
        let qh = split(g, q)?;
        let kh = split(g, k)?;
        let vh = split(g, v)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let att = g.softmax(scores)?;
        let out = g.matmul(att, vh)?;
        heads.push(g.reshape(out, vec![batch * n, dh])?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(heads, 1)?
    };
    let wo = p.get(&format!("{prefix}.attn.wo"))?;
    let bo = p.get(&format!("{prefix}.attn.bo"))?;
    linear(g, merged, wo, bo)
}

struct MoeContext<'a, 'r, R: Rng + ?Sized> {
    rng: &'r mut R,
    opts: StudentOptions<'a>,
}

fn forward_impl<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    tokens: Var,
    mut moe_ctx: Option<MoeContext<'_, '_, R>>,
) -> Result<ForwardRecord> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 || shape[1] != cfg.tokens_per_sample || shape[2] != cfg.input_dim {
        return Err(Error::shape(
            "model_forward",
            format!(
                "batch {:?} vs expected [B, {}, {}]",
                shape, cfg.tokens_per_sample, cfg.input_dim
            ),
        ));
    }
    let batch = shape[0];
    let rows = batch * cfg.tokens_per_sample;
    let d = cfg.hidden_dim;

    let flat = g.reshape(tokens, vec![rows, cfg.input_dim])?;
    let x = linear(g, flat, p.get("embed.w")?, p.get("embed.b")?)?;
    let x = g.reshape(x, vec![batch, cfg.tokens_per_sample, d])?;
    let x = g.add(x, p.get("pos")?)?;
    let mut x = g.reshape(x, vec![rows, d])?;

    let mut layer_features = BTreeMap::new();
    let mut router_outputs = BTreeMap::new();
    let mut selections = BTreeMap::new();
    for layer in 1..=cfg.depth {
        let b = block_prefix(layer);
        let h = affine_norm(g, p, x, &format!("{b}.ln1"))?;
        let a = attention(g, p, cfg, &b, h, batch)?;
        x = g.add(x, a)?;
        let h = affine_norm(g, p, x, &format!("{b}.ln2"))?;
        let f = match moe_ctx.as_mut() {
            Some(ctx) if cfg.is_moe_layer(layer) => {
                let r = router_prefix(layer);
                let routed = moe::route(
                    g,
                    h,
                    p.get(&format!("{r}.w"))?,
                    p.get(&format!("{r}.b"))?,
                    cfg.top_k,
                    cfg.noise_std,
                    ctx.rng,
                    ctx.opts.train_mode,
                )?;
                let (gates, selection) = match ctx.opts.route_by {
                    RouteBy::Student => (routed.gate_weights, routed.selection.clone()),
                    RouteBy::External(probs) => {
                        let probs = *probs
                            .get(&layer)
                            .ok_or_else(|| Error::Config(format!("no external routing for layer {layer}")))?;
                        moe::select_from(g, probs, cfg.top_k)?
                    }
                };
                let gates = if ctx.opts.detach_gates {
                    g.stop_gradient(gates)?
                } else {
                    gates
                };
                let bank = ExpertBank::bind(p, &format!("{b}.moe"), cfg.num_experts)?;
                let out = moe::moe_forward(g, h, &selection, gates, &bank)?;
                router_outputs.insert(layer, routed);
                selections.insert(layer, selection);
                out
            }
            _ => ExpertParams::bind(p, &format!("{b}.mlp"))?.apply(g, h)?,
        };
        x = g.add(x, f)?;
        layer_features.insert(layer, x);
    }
    let x = affine_norm(g, p, x, "ln_f")?;
    let x = g.reshape(x, vec![batch, cfg.tokens_per_sample, d])?;
    let pooled = g.mean_axis(x, 1)?;
    let logits = linear(g, pooled, p.get("head.w")?, p.get("head.b")?)?;
    Ok(ForwardRecord {
        logits,
        layer_features,
        router_outputs,
        selections,
    })
}

/// Dense forward: every block uses its plain FFN and no router state is built.
pub fn forward_dense(g: &mut Graph, p: &BoundParams, cfg: &ModelConfig, tokens: Var) -> Result<ForwardRecord> {
    forward_impl::<rand_chacha::ChaCha8Rng>(g, p, &cfg.to_dense(), tokens, None)
}

/// Student forward with MoE layers at `cfg.moe_layers`.
pub fn forward_student<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    tokens: Var,
    rng: &mut R,
    opts: StudentOptions<'_>,
) -> Result<ForwardRecord> {
    if cfg.is_dense() {
        return Err(Error::Config("student forward needs at least one MoE layer".into()));
    }
    forward_impl(g, p, cfg, tokens, Some(MoeContext { rng, opts }))
}

/// Renames a dense model's FFN at each of `cfg.moe_layers` to expert 0 and
/// adds zero router parameters: with one expert the student then computes
/// exactly the dense function.
pub fn dense_to_single_expert(dense: &ParamSet, cfg: &ModelConfig) -> Result<ParamSet> {
    if cfg.num_experts != 1 {
        return Err(Error::Config("dense_to_single_expert needs num_experts = 1".into()));
    }
    let mut out = dense.clone();
    for &layer in &cfg.moe_layers {
        let b = block_prefix(layer);
        for part in ["w1", "b1", "w2", "b2"] {
            let t = out
                .remove(&format!("{b}.mlp.{part}"))
                .ok_or_else(|| Error::MissingParam(format!("{b}.mlp.{part}")))?;
            out.insert(format!("{b}.moe.experts.0.{part}"), t);
        }
        let r = router_prefix(layer);
        out.insert(format!("{r}.w"), Tensor::zeros(&[cfg.hidden_dim, 1]));
        out.insert(format!("{r}.b"), Tensor::zeros(&[1]));
    }
    Ok(out)
}
