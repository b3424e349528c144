use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing backward() against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    pub max_rel_error: f64,
    /// `(param, element)` with the largest error.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Smallest denominator of the relative error.
pub const DEFAULT_FLOOR: f64 = 1e-8;

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let v = g.value(root);
    if v.numel() != 1 {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Central-difference check of `f` at `params`. The relative error of each
/// element is `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `f` is built once; perturbed evaluations replay the recorded tape with
/// stop-gradient values and top-k selections held fixed, so the numeric
/// derivative is of the same function backward differentiates. A second
/// independent build checks that `f` is deterministic.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_difference_check_with_floor(f, params, epsilon, DEFAULT_FLOOR)
}

/// As [`finite_difference_check`] with denominator `max(|a|, |n|, floor)`.
/// Deep graphs need a larger floor: a gradient that is exactly zero (a
/// softmax shift, say) still shows ~1e-11 of difference noise.
pub fn finite_difference_check_with_floor<F>(
    f: F,
    params: &[Tensor],
    epsilon: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let base = g.value(root).item();
    let again = evaluate(&f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(params.len());
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    for (pi, &var) in vars.iter().enumerate() {
        let mut work = params[pi].clone();
        let mut num = vec![0.0; work.numel()];
        let mut local_max = 0.0f64;
        for (ei, slot) in num.iter_mut().enumerate() {
            let orig = params[pi].data()[ei];
            work.data_mut()[ei] = orig + epsilon;
            g.set_leaf(var, work.clone())?;
            let plus = g.forward_frozen(root)?.item();
            work.data_mut()[ei] = orig - epsilon;
            g.set_leaf(var, work.clone())?;
            let minus = g.forward_frozen(root)?.item();
            work.data_mut()[ei] = orig;
            *slot = (plus - minus) / (2.0 * epsilon);

            let a = analytic[pi].data()[ei];
            let denom = a.abs().max(slot.abs()).max(floor);
            let rel = (a - *slot).abs() / denom;
            local_max = local_max.max(rel);
            if worst.is_none() || rel > max_rel_error {
                max_rel_error = max_rel_error.max(rel);
                worst = Some((pi, ei));
            }
        }
        g.set_leaf(var, params[pi].clone())?;
        per_param.push(local_max);
        numeric.push(Tensor::from_parts(params[pi].shape().to_vec(), num));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
