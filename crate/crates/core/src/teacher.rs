//! Frozen dense teacher plus one trainable linear router per student MoE
//! layer, producing the routing distributions the student distills from.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{compose_teacher_loss, LossBreakdown, LossWeights};
use crate::model::{forward_dense, ModelConfig};
use crate::params::{normal_init, BoundParams, ParamSet};
use crate::train::AdamW;

/// Which teacher block feeds the router of each student MoE layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMapping {
    /// Student layer `i` reads teacher layer `i`.
    #[default]
    Aligned,
    /// Every router reads the teacher's last block.
    Final,
}

pub fn teacher_router_prefix(layer: usize) -> String {
    format!("teacher_router.{layer}")
}

#[derive(Clone, Debug)]
pub struct TeacherBundle {
    pub config: ModelConfig,
    /// Never updated after construction.
    pub backbone: ParamSet,
    /// `teacher_router.<layer>.w: [D_teacher, E]` and `.b: [E]`.
    pub routers: ParamSet,
    /// Student MoE layer → teacher layer.
    pub layer_map: BTreeMap<usize, usize>,
    pub num_experts: usize,
}

impl TeacherBundle {
    /// Router weights start at `N(0, 0.02²)` with zero bias.
    pub fn new(
        config: ModelConfig,
        backbone: ParamSet,
        student: &ModelConfig,
        mapping: LayerMapping,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if !config.is_dense() {
            return Err(Error::Config("the teacher must be a dense model".into()));
        }
        if config.tokens_per_sample != student.tokens_per_sample || config.input_dim != student.input_dim {
            return Err(Error::Config(
                "teacher and student disagree on the input token layout".into(),
            ));
        }
        let mut layer_map = BTreeMap::new();
        for &l in &student.moe_layers {
            let t = match mapping {
                LayerMapping::Aligned => l,
                LayerMapping::Final => config.depth,
            };
            if t == 0 || t > config.depth {
                return Err(Error::Config(format!(
                    "student layer {l} maps to teacher layer {t}, but the teacher has {} layers",
                    config.depth
                )));
            }
            layer_map.insert(l, t);
        }
        let mut routers = ParamSet::new();
        for &l in layer_map.keys() {
            let p = teacher_router_prefix(l);
            let w = format!("{p}.w");
            routers.insert(
                w.clone(),
                normal_init(seed, &w, &[config.hidden_dim, student.num_experts]),
            );
            routers.insert(format!("{p}.b"), Tensor::zeros(&[student.num_experts]));
        }
        Ok(TeacherBundle {
            config,
            backbone,
            routers,
            layer_map,
            num_experts: student.num_experts,
        })
    }

    pub fn backbone_checksum(&self) -> u64 {
        self.backbone.checksum()
    }

    /// Frozen-backbone features `[B·N, D_teacher]`, keyed by student layer.
    pub fn features(&self, tokens: &Tensor) -> Result<BTreeMap<usize, Tensor>> {
        let mut g = Graph::new();
        let p = self.backbone.bind(&mut g, false);
        let x = g.constant(tokens.clone());
        let rec = forward_dense(&mut g, &p, &self.config, x)?;
        self.layer_map
            .iter()
            .map(|(&s, &t)| Ok((s, g.value(rec.layer_features[&t]).clone())))
            .collect()
    }

    /// Teacher routing probabilities as plain tensors.
    pub fn route_values(&self, features: &BTreeMap<usize, Tensor>) -> Result<BTreeMap<usize, Tensor>> {
        let mut g = Graph::new();
        let routers = self.routers.bind(&mut g, false);
        let probs = teacher_route(&mut g, &routers, features)?;
        Ok(probs.into_iter().map(|(l, v)| (l, g.value(v).clone())).collect())
    }
}

/// `softmax(h_t · W + b)` per layer; no noise.
pub fn teacher_route(
    g: &mut Graph,
    routers: &BoundParams,
    features: &BTreeMap<usize, Tensor>,
) -> Result<BTreeMap<usize, Var>> {
    let mut out = BTreeMap::new();
    for (&layer, h) in features {
        let p = teacher_router_prefix(layer);
        let w = routers.get(&format!("{p}.w"))?;
        let b = routers.get(&format!("{p}.b"))?;
        let h = g.constant(h.clone());
        let z = g.matmul(h, w)?;
        let z = g.add(z, b)?;
        out.insert(layer, g.softmax(z)?);
    }
    Ok(out)
}

/// Teacher features for every sample of a dataset, computed once. Rows are
/// computed independently of batch composition, so a gathered batch equals
/// a direct forward on that batch bit for bit.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    per_layer: BTreeMap<usize, Vec<f64>>,
    rows_per_sample: usize,
    dim: usize,
}

impl FeatureCache {
    pub fn build(bundle: &TeacherBundle, data: &Dataset, batch_size: usize) -> Result<Self> {
        let mut per_layer: BTreeMap<usize, Vec<f64>> = bundle.layer_map.keys().map(|&l| (l, Vec::new())).collect();
        let ids: Vec<usize> = (0..data.len()).collect();
        for chunk in ids.chunks(batch_size.max(1)) {
            let batch = data.batch(chunk)?;
            for (l, t) in bundle.features(&batch.tokens)? {
                per_layer
                    .get_mut(&l)
                    .expect("same layer set")
                    .extend_from_slice(t.data());
            }
        }
        Ok(FeatureCache {
            per_layer,
            rows_per_sample: data.tokens_per_sample(),
            dim: bundle.config.hidden_dim,
        })
    }

    pub fn gather(&self, ids: &[usize]) -> Result<BTreeMap<usize, Tensor>> {
        let per = self.rows_per_sample * self.dim;
        self.per_layer
            .iter()
            .map(|(&l, all)| {
                let mut d = Vec::with_capacity(ids.len() * per);
                for &i in ids {
                    let src = all.get(i * per..(i + 1) * per).ok_or(Error::Index {
                        op: "feature_cache",
                        index: i,
                        len: all.len() / per,
                    })?;
                    d.extend_from_slice(src);
                }
                Ok((l, Tensor::new(vec![ids.len() * self.rows_per_sample, self.dim], d)?))
            })
            .collect()
    }
}

/// One optimizer step on the router parameters alone, minimizing the
/// teacher objective on `features`. The backbone is not touched.
pub fn teacher_router_step(
    bundle: &mut TeacherBundle,
    features: &BTreeMap<usize, Tensor>,
    w: &LossWeights,
    opt: &mut AdamW,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let routers = bundle.routers.bind(&mut g, true);
    let probs = teacher_route(&mut g, &routers, features)?;
    let terms = compose_teacher_loss(&mut g, &probs, w)?;
    let mut grads = g.backward(terms.total)?;
    let grads: BTreeMap<String, Tensor> = routers
        .iter()
        .filter_map(|(n, &v)| grads.take(v).map(|t| (n.clone(), t)))
        .collect();
    let breakdown = terms.values(&g);
    if !breakdown.total.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            step: 0,
            reason: "non-finite teacher loss".into(),
        });
    }
    opt.step(&mut bundle.routers, &grads, lr)?;
    Ok(breakdown)
}
