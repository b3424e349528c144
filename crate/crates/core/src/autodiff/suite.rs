//! Finite-difference cases covering every primitive. Each case reduces the
//! primitive's output to a scalar with fixed random weights so that every
//! output element contributes an O(1) gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{finite_difference_check, GradCheckReport, DEFAULT_EPSILON};
use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct PrimitiveCase {
    pub name: &'static str,
    pub params: Vec<Tensor>,
    pub build: CaseFn,
}

impl PrimitiveCase {
    pub fn check(&self) -> Result<GradCheckReport> {
        finite_difference_check(|g, v| (self.build)(g, v), &self.params, DEFAULT_EPSILON)
    }
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `sum(w ⊙ y)` with `w` a fixed constant of y's shape drawn from `seed`.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w)?;
    g.sum(p)
}

macro_rules! case {
    ($name:expr, [$($p:expr),*], |$g:ident, $v:ident| $body:expr) => {
        PrimitiveCase {
            name: $name,
            params: vec![$($p),*],
            build: Box::new(move |$g: &mut Graph, $v: &[Var]| -> Result<Var> {
                let y = $body;
                weighted_sum($g, y, 0xC0FFEE)
            }),
        }
    };
}

/// One case per primitive (several for ops with distinct broadcast or
/// batching paths). Inputs are uniform in [-2, 2] except where the
/// primitive's domain requires otherwise.
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| uniform(&mut rng, shape, -2.0, 2.0);
    let pos = uniform(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x55), &[3, 4], 0.5, 2.0);
    // well-separated rows so top-k selections are stable under ±ε
    let ranked = Tensor::from_parts(
        vec![3, 4],
        vec![0.3, -1.2, 1.7, 0.9, -0.4, 1.1, 0.2, -1.8, 1.5, 0.6, -0.7, 1.9],
    );
    vec![
        case!("matmul", [u(&[3, 4]), u(&[4, 2])], |g, v| g.matmul(v[0], v[1])?),
        case!("matmul_batched", [u(&[2, 3, 4]), u(&[2, 4, 2])], |g, v| g
            .matmul(v[0], v[1])?),
        case!("matmul_shared_rhs", [u(&[2, 3, 4]), u(&[4, 3])], |g, v| g
            .matmul(v[0], v[1])?),
        case!("add", [u(&[3, 4]), u(&[3, 4])], |g, v| g.add(v[0], v[1])?),
        case!("add_bias", [u(&[2, 3, 4]), u(&[4])], |g, v| g.add(v[0], v[1])?),
        case!("add_column", [u(&[3, 4]), u(&[3, 1])], |g, v| g.add(v[0], v[1])?),
        case!("add_general", [u(&[2, 3, 4]), u(&[2, 1, 4])], |g, v| g
            .add(v[0], v[1])?),
        case!("mul", [u(&[3, 4]), u(&[3, 4])], |g, v| g.mul(v[0], v[1])?),
        case!("mul_column", [u(&[3, 4]), u(&[3, 1])], |g, v| g.mul(v[0], v[1])?),
        case!("scale", [u(&[3, 4])], |g, v| g.scale(v[0], -1.7)?),
        case!("add_scalar", [u(&[3, 4])], |g, v| g.add_scalar(v[0], 0.25)?),
        case!("relu", [u(&[3, 4])], |g, v| g.relu(v[0])?),
        case!("gelu", [u(&[3, 4])], |g, v| g.gelu(v[0])?),
        case!("layernorm", [u(&[3, 5])], |g, v| g.layer_norm(v[0])?),
        case!("softmax", [u(&[3, 4])], |g, v| g.softmax(v[0])?),
        case!("log", [pos], |g, v| g.log(v[0])?),
        case!("exp", [u(&[3, 4])], |g, v| g.exp(v[0])?),
        case!("sum", [u(&[3, 4])], |g, v| g.sum(v[0])?),
        case!("sum_axis", [u(&[2, 3, 4])], |g, v| g.sum_axis(v[0], 1)?),
        case!("mean", [u(&[3, 4])], |g, v| g.mean(v[0])?),
        case!("mean_axis", [u(&[2, 3, 4])], |g, v| g.mean_axis(v[0], 0)?),
        case!("variance", [u(&[3, 4])], |g, v| g.variance(v[0])?),
        case!("variance_axis", [u(&[2, 3, 4])], |g, v| g.variance_axis(v[0], 2)?),
        case!("gather_rows", [u(&[4, 3])], |g, v| g
            .gather_rows(v[0], vec![2, 0, 2, 3])?),
        case!("scatter_add_rows", [u(&[4, 3])], |g, v| g.scatter_add_rows(
            v[0],
            vec![1, 4, 1, 0],
            5
        )?),
        case!("concat", [u(&[2, 3]), u(&[2, 2])], |g, v| g
            .concat(vec![v[0], v[1]], 1)?),
        case!("slice", [u(&[2, 5, 3])], |g, v| g.slice(v[0], 1, 1, 4)?),
        case!("transpose", [u(&[2, 3, 4])], |g, v| g.transpose(v[0])?),
        case!("reshape", [u(&[2, 6])], |g, v| g.reshape(v[0], vec![3, 4])?),
        PrimitiveCase {
            name: "cross_entropy",
            params: vec![u(&[4, 3])],
            build: Box::new(|g, v| g.cross_entropy(v[0], vec![0, 2, 1, 2])),
        },
        case!("stop_grad", [u(&[3, 4])], |g, v| {
            let s = g.stop_gradient(v[0])?;
            g.add(v[0], s)?
        }),
        case!("top_k", [ranked.clone()], |g, v| g.top_k(v[0], 2)?.0),
        case!("take_cols", [ranked], |g, v| g.take_cols(
            v[0],
            2,
            vec![2, 3, 1, 2, 3, 0]
        )?),
    ]
}
