//! Finite-difference checks of the full training objectives on a
//! 2-layer / 2-expert / 4-token student with routing noise off.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tgr_core::autodiff::suite::uniform;
use tgr_core::autodiff::{finite_difference_check_with_floor, GradCheckReport, Graph, Tensor, Var};
use tgr_core::losses::{
    compose_student_loss, compose_teacher_loss, compose_upper_bound_losses, compose_vmoe_loss, task_loss, LossWeights,
};
use tgr_core::model::{forward_student, init_model, ModelConfig, RouteBy, StudentOptions};
use tgr_core::params::BoundParams;
use tgr_core::teacher::{teacher_route, LayerMapping, TeacherBundle};
use tgr_core::Result;

pub const EPSILON: f64 = 1e-5;
/// Relative-error denominator floor, well above the ~1e-11 cancellation
/// noise of a full forward.
pub const FLOOR: f64 = 1e-6;

pub struct Fixture {
    pub model: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    /// Number of leading entries of `names` that belong to the student.
    pub student_len: usize,
    pub tokens: Tensor,
    pub labels: Vec<usize>,
    pub features: BTreeMap<usize, Tensor>,
    pub weights: LossWeights,
}

pub fn fixture(seed: u64) -> Fixture {
    let model = ModelConfig {
        depth: 2,
        hidden_dim: 4,
        heads: 2,
        ffn_dim: 6,
        num_classes: 3,
        tokens_per_sample: 4,
        input_dim: 3,
        moe_layers: vec![1, 2],
        num_experts: 2,
        top_k: 1,
        noise_std: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // O(1) parameters keep every gradient well above difference noise
    let student = init_model(&model, seed).unwrap();
    let teacher_cfg = ModelConfig {
        hidden_dim: 6,
        moe_layers: Vec::new(),
        num_experts: 1,
        ..model.clone()
    };
    let bundle = TeacherBundle::new(
        teacher_cfg.clone(),
        init_model(&teacher_cfg, seed + 1).unwrap(),
        &model,
        LayerMapping::Aligned,
        seed,
    )
    .unwrap();
    let tokens = uniform(&mut rng, &[2, 4, 3], -1.0, 1.0);
    let features = bundle
        .features(&tokens)
        .unwrap()
        .into_iter()
        .map(|(l, f)| (l, f.map(|v| v * 20.0)))
        .collect();
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (n, t) in student.iter().chain(bundle.routers.iter()) {
        names.push(n.clone());
        params.push(uniform(&mut rng, t.shape(), -0.8, 0.8));
    }
    Fixture {
        model,
        names,
        params,
        student_len: student.len(),
        tokens,
        labels: vec![2, 0],
        features,
        weights: LossWeights {
            lambda_load: 0.5,
            lambda_distill: 1.5,
            lambda_ent: 0.5,
            lambda_zloss: 0.1,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// task + load balancing
    Vmoe,
    /// task + load balancing + router z-loss
    VmoeZloss,
    /// teacher router: load + entropy
    Teacher,
    /// task + distillation from the stop-gradiented teacher router
    Student,
    /// teacher-routed upper bound, combined objective
    UpperBound,
}

impl Fixture {
    fn bind(&self, vars: &[Var]) -> BoundParams {
        self.names.iter().cloned().zip(vars.iter().copied()).collect()
    }

    pub fn build(&self, g: &mut Graph, vars: &[Var], objective: Objective) -> Result<Var> {
        let p = self.bind(vars);
        let x = g.constant(self.tokens.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let teacher = teacher_route(g, &p, &self.features)?;
        if objective == Objective::Teacher {
            return Ok(compose_teacher_loss(g, &teacher, &self.weights)?.total);
        }
        let opts = match objective {
            Objective::UpperBound => StudentOptions {
                route_by: RouteBy::External(&teacher),
                ..StudentOptions::train()
            },
            _ => StudentOptions::train(),
        };
        let rec = forward_student(g, &p, &self.model, x, &mut rng, opts)?;
        let task = task_loss(g, rec.logits, &self.labels)?;
        let probs: BTreeMap<usize, Var> = rec.router_outputs.iter().map(|(&l, r)| (l, r.probs_noisy)).collect();
        let logits: BTreeMap<usize, Var> = rec.router_outputs.iter().map(|(&l, r)| (l, r.logits_clean)).collect();
        Ok(match objective {
            Objective::Vmoe => compose_vmoe_loss(g, task, &probs, None, &self.weights)?.total,
            Objective::VmoeZloss => compose_vmoe_loss(g, task, &probs, Some(&logits), &self.weights)?.total,
            Objective::Student => compose_student_loss(g, task, &probs, &teacher, None, &self.weights)?.total,
            Objective::UpperBound => compose_upper_bound_losses(g, task, &teacher, &probs, &self.weights)?.combined,
            Objective::Teacher => unreachable!(),
        })
    }

    pub fn check(&self, objective: Objective) -> Result<GradCheckReport> {
        finite_difference_check_with_floor(|g, v| self.build(g, v, objective), &self.params, EPSILON, FLOOR)
    }

    /// Analytic gradients of `objective`, `None` where a parameter is unreached.
    pub fn gradients(&self, objective: Objective) -> Result<Vec<Option<Tensor>>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|t| g.param(t.clone())).collect();
        let root = self.build(&mut g, &vars, objective)?;
        let grads = g.backward(root)?;
        Ok(vars.iter().map(|&v| grads.get(v).cloned()).collect())
    }
}
