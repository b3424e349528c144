//! Scalar objectives and the composite losses built from them.
//!
//! Every function appends nodes to a [`Graph`] and returns the scalar
//! [`Var`]. Terms whose weight is zero are left out of a composite's total
//! entirely, so a zero-weighted objective contributes neither value nor
//! gradient, bit for bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Added inside every log so that `0 · log 0` evaluates to 0.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_load: f64,
    pub lambda_distill: f64,
    pub lambda_ent: f64,
    /// Used only by the z-loss baseline.
    pub lambda_zloss: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_load: 0.005,
            lambda_distill: 5.0,
            lambda_ent: 0.005,
            lambda_zloss: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_load", self.lambda_load),
            ("lambda_distill", self.lambda_distill),
            ("lambda_ent", self.lambda_ent),
            ("lambda_zloss", self.lambda_zloss),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn require_matrix(g: &Graph, p: Var, op: &'static str) -> Result<(usize, usize)> {
    match *g.shape(p) {
        [n, e] => Ok((n, e)),
        ref s => Err(Error::shape(op, format!("expected [tokens, experts], got {s:?}"))),
    }
}

/// `Imp_e = (1/N) Σ_i p[i][e]`, shape `[E]`.
pub fn importance(g: &mut Graph, p: Var) -> Result<Var> {
    require_matrix(g, p, "importance")?;
    g.mean_axis(p, 0)
}

/// Squared coefficient of variation of the importances, with the population
/// standard deviation: `E² · var(Imp)`. Zero when there is a single expert.
pub fn load_loss(g: &mut Graph, p: Var) -> Result<Var> {
    let (_, e) = require_matrix(g, p, "load_loss")?;
    if e == 1 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let imp = importance(g, p)?;
    let var = g.variance(imp)?;
    g.scale(var, (e * e) as f64)
}

/// Mean row entropy `-(1/N) Σ_i Σ_e p log(p + ε)`.
pub fn entropy_loss(g: &mut Graph, p: Var) -> Result<Var> {
    let (n, _) = require_matrix(g, p, "entropy_loss")?;
    let shifted = g.add_scalar(p, LOG_EPS)?;
    let logp = g.log(shifted)?;
    let plogp = g.mul(p, logp)?;
    let s = g.sum(plogp)?;
    g.scale(s, -1.0 / n as f64)
}

/// `(1/N) Σ_i KL(sg(p_t[i]) ‖ p_s[i])`. The teacher side is always wrapped
/// in a stop-gradient here.
pub fn kl_distill(g: &mut Graph, p_student: Var, p_teacher: Var) -> Result<Var> {
    let (n, _) = require_matrix(g, p_student, "kl_distill")?;
    if g.shape(p_student) != g.shape(p_teacher) {
        return Err(Error::shape(
            "kl_distill",
            format!("student {:?} vs teacher {:?}", g.shape(p_student), g.shape(p_teacher)),
        ));
    }
    let pt = g.stop_gradient(p_teacher)?;
    let pt_eps = g.add_scalar(pt, LOG_EPS)?;
    let log_t = g.log(pt_eps)?;
    let ps_eps = g.add_scalar(p_student, LOG_EPS)?;
    let log_s = g.log(ps_eps)?;
    let diff = g.sub(log_t, log_s)?;
    let terms = g.mul(pt, diff)?;
    let s = g.sum(terms)?;
    g.scale(s, 1.0 / n as f64)
}

/// Mean cross-entropy of `logits: [B, C]` against integer labels.
pub fn task_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels.to_vec())
}

/// Mean over tokens of `(log Σ_e exp z[i][e])²`.
pub fn z_loss(g: &mut Graph, z: Var) -> Result<Var> {
    let (n, _) = require_matrix(g, z, "z_loss")?;
    // Subtracting each row's max keeps exp in range; the max is a constant,
    // which leaves the gradient of logsumexp unchanged.
    let zv = g.value(z);
    let maxes: Vec<f64> = (0..n)
        .map(|r| zv.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let neg = g.constant(Tensor::new(vec![n, 1], maxes.iter().map(|m| -m).collect())?);
    let pos = g.constant(Tensor::new(vec![n], maxes)?);
    let shifted = g.add(z, neg)?;
    let ex = g.exp(shifted)?;
    let s = g.sum_axis(ex, 1)?;
    let lse = g.log(s)?;
    let lse = g.add(lse, pos)?;
    let sq = g.mul(lse, lse)?;
    g.mean(sq)
}

/// Graph handles of one composite objective.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub task: Option<Var>,
    pub load: BTreeMap<usize, Var>,
    pub entropy: BTreeMap<usize, Var>,
    pub distill: BTreeMap<usize, Var>,
    pub zloss: BTreeMap<usize, Var>,
}

/// Numeric values of a [`LossTerms`], unweighted per part.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: Option<f64>,
    pub load: BTreeMap<usize, f64>,
    pub entropy: BTreeMap<usize, f64>,
    pub distill: BTreeMap<usize, f64>,
    pub zloss: BTreeMap<usize, f64>,
}

impl LossTerms {
    fn new(g: &mut Graph, task: Option<Var>) -> Self {
        let total = match task {
            Some(t) => t,
            None => g.constant(Tensor::scalar(0.0)),
        };
        LossTerms {
            total,
            task,
            load: BTreeMap::new(),
            entropy: BTreeMap::new(),
            distill: BTreeMap::new(),
            zloss: BTreeMap::new(),
        }
    }

    fn accumulate(&mut self, g: &mut Graph, term: Var, weight: f64) -> Result<()> {
        if weight != 0.0 {
            let scaled = g.scale(term, weight)?;
            self.total = g.add(self.total, scaled)?;
        }
        Ok(())
    }

    pub fn values(&self, g: &Graph) -> LossBreakdown {
        let read = |m: &BTreeMap<usize, Var>| m.iter().map(|(&l, &v)| (l, g.value(v).item())).collect();
        LossBreakdown {
            total: g.value(self.total).item(),
            task: self.task.map(|t| g.value(t).item()),
            load: read(&self.load),
            entropy: read(&self.entropy),
            distill: read(&self.distill),
            zloss: read(&self.zloss),
        }
    }
}

/// `task + Σ_i λ_load · L_load(p^(i))`, plus `Σ_i λ_zloss · z_loss(z^(i))`
/// when router logits are supplied.
pub fn compose_vmoe_loss(
    g: &mut Graph,
    task: Var,
    probs: &BTreeMap<usize, Var>,
    zloss_logits: Option<&BTreeMap<usize, Var>>,
    w: &LossWeights,
) -> Result<LossTerms> {
    let mut terms = LossTerms::new(g, Some(task));
    for (&layer, &p) in probs {
        let l = load_loss(g, p)?;
        terms.accumulate(g, l, w.lambda_load)?;
        terms.load.insert(layer, l);
    }
    if let Some(logits) = zloss_logits {
        for (&layer, &z) in logits {
            let l = z_loss(g, z)?;
            terms.accumulate(g, l, w.lambda_zloss)?;
            terms.zloss.insert(layer, l);
        }
    }
    Ok(terms)
}

/// `Σ_i (λ_load · L_load(p_t^(i)) + λ_ent · L_ent(p_t^(i)))`, no task term.
pub fn compose_teacher_loss(g: &mut Graph, teacher_probs: &BTreeMap<usize, Var>, w: &LossWeights) -> Result<LossTerms> {
    let mut terms = LossTerms::new(g, None);
    for (&layer, &p) in teacher_probs {
        let l = load_loss(g, p)?;
        terms.accumulate(g, l, w.lambda_load)?;
        terms.load.insert(layer, l);
        let h = entropy_loss(g, p)?;
        terms.accumulate(g, h, w.lambda_ent)?;
        terms.entropy.insert(layer, h);
    }
    Ok(terms)
}

/// `task + (λ_distill / |S|) Σ_i KL(sg(p_t^(i)) ‖ p^(i))`.
///
/// `student_load` optionally adds `λ_load · L_load` on the given student
/// probabilities, an ablation switch absent from the default objective.
pub fn compose_student_loss(
    g: &mut Graph,
    task: Var,
    student_probs: &BTreeMap<usize, Var>,
    teacher_probs: &BTreeMap<usize, Var>,
    student_load: Option<&BTreeMap<usize, Var>>,
    w: &LossWeights,
) -> Result<LossTerms> {
    let mut terms = LossTerms::new(g, Some(task));
    let per_layer = w.lambda_distill / student_probs.len().max(1) as f64;
    for (&layer, &p) in student_probs {
        let pt = *teacher_probs
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("no teacher distribution for layer {layer}")))?;
        let kl = kl_distill(g, p, pt)?;
        terms.accumulate(g, kl, per_layer)?;
        terms.distill.insert(layer, kl);
    }
    if let Some(probs) = student_load {
        for (&layer, &p) in probs {
            let l = load_loss(g, p)?;
            terms.accumulate(g, l, w.lambda_load)?;
            terms.load.insert(layer, l);
        }
    }
    Ok(terms)
}

/// Objectives of the teacher-routed upper bound.
#[derive(Clone, Debug)]
pub struct UpperBoundTerms {
    /// `task + λ_load Σ L_load(p_t)`; the teacher router selects experts.
    pub teacher: LossTerms,
    /// `λ_distill Σ KL(sg(p_t) ‖ p)`: all the student router ever sees.
    pub student_router: LossTerms,
    /// `task + student_router` total.
    pub student: Var,
    /// Sum of both sides with the shared task term counted once; its gradient
    /// is each side's gradient on that side's parameters.
    pub combined: Var,
}

pub fn compose_upper_bound_losses(
    g: &mut Graph,
    task: Var,
    teacher_probs: &BTreeMap<usize, Var>,
    student_probs: &BTreeMap<usize, Var>,
    w: &LossWeights,
) -> Result<UpperBoundTerms> {
    let mut teacher = LossTerms::new(g, Some(task));
    for (&layer, &p) in teacher_probs {
        let l = load_loss(g, p)?;
        teacher.accumulate(g, l, w.lambda_load)?;
        teacher.load.insert(layer, l);
    }
    let mut router = LossTerms::new(g, None);
    for (&layer, &p) in student_probs {
        let pt = *teacher_probs
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("no teacher distribution for layer {layer}")))?;
        let kl = kl_distill(g, p, pt)?;
        router.accumulate(g, kl, w.lambda_distill)?;
        router.distill.insert(layer, kl);
    }
    let student = g.add(task, router.total)?;
    let combined = g.add(teacher.total, router.total)?;
    Ok(UpperBoundTerms {
        teacher,
        student_router: router,
        student,
        combined,
    })
}
