use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::suite::{uniform, weighted_sum};
use crate::autodiff::{finite_difference_check, DEFAULT_EPSILON};
use crate::params::ParamSet;

fn bank_params(seed: u64, e: usize, d: usize, f: usize) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for i in 0..e {
        let pre = format!("moe.experts.{i}");
        p.insert(format!("{pre}.w1"), uniform(&mut rng, &[d, f], -0.6, 0.6));
        p.insert(format!("{pre}.b1"), uniform(&mut rng, &[f], -0.2, 0.2));
        p.insert(format!("{pre}.w2"), uniform(&mut rng, &[f, d], -0.6, 0.6));
        p.insert(format!("{pre}.b2"), uniform(&mut rng, &[d], -0.2, 0.2));
    }
    p
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(99)
}

#[test]
fn zero_router_gives_uniform_probs() {
    let mut g = Graph::new();
    let h = g.constant(uniform(&mut rng(), &[5, 3], -1.0, 1.0));
    let w = g.constant(Tensor::zeros(&[3, 4]));
    let b = g.constant(Tensor::zeros(&[4]));
    let r = route(&mut g, h, w, b, 1, 0.0, &mut rng(), true).unwrap();
    assert!(g.value(r.probs_clean).data().iter().all(|&p| p == 0.25));
}

#[test]
fn zero_noise_leaves_logits_untouched() {
    let mut g = Graph::new();
    let mut r0 = rng();
    let h = g.constant(uniform(&mut r0, &[6, 3], -1.0, 1.0));
    let w = g.constant(uniform(&mut r0, &[3, 4], -1.0, 1.0));
    let b = g.constant(uniform(&mut r0, &[4], -1.0, 1.0));
    let r = route(&mut g, h, w, b, 2, 0.0, &mut rng(), true).unwrap();
    assert_eq!(g.value(r.logits_noisy), g.value(r.logits_clean));
    assert_eq!(g.value(r.probs_noisy), g.value(r.probs_clean));

    let noisy = route(&mut g, h, w, b, 2, 1.0, &mut rng(), true).unwrap();
    assert_ne!(g.value(noisy.logits_noisy), g.value(noisy.logits_clean));
    let eval = route(&mut g, h, w, b, 2, 1.0, &mut rng(), false).unwrap();
    assert_eq!(eval.selection, r.selection);
    assert!(route(&mut g, h, w, b, 2, -1.0, &mut rng(), true).is_err());
}

#[test]
fn topk_of_known_row() {
    let mut g = Graph::new();
    let h = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let w = g.constant(Tensor::zeros(&[1, 3]));
    let logits: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
    let b = g.constant(Tensor::new(vec![3], logits).unwrap());
    let r = route(&mut g, h, w, b, 2, 0.0, &mut rng(), false).unwrap();
    assert_eq!(r.selection.indices, vec![0, 1]);
    let gates = g.value(r.gate_weights).data();
    assert!((gates[0] - 0.5).abs() < 1e-15 && (gates[1] - 0.3).abs() < 1e-15);
}

#[test]
fn gates_follow_noisy_probs_in_training() {
    let mut g = Graph::new();
    let mut r0 = rng();
    let h = g.constant(uniform(&mut r0, &[8, 3], -1.0, 1.0));
    let w = g.constant(uniform(&mut r0, &[3, 5], -1.0, 1.0));
    let b = g.constant(Tensor::zeros(&[5]));
    let r = route(&mut g, h, w, b, 2, 1.0, &mut rng(), true).unwrap();
    let probs = g.value(r.probs_noisy);
    let gates = g.value(r.gate_weights);
    for t in 0..8 {
        let sel = r.selection.row(t);
        assert_ne!(sel[0], sel[1]);
        for j in 0..2 {
            assert_eq!(gates.row(t)[j], probs.row(t)[sel[j]]);
        }
        assert!(probs.row(t)[sel[0]] >= probs.row(t)[sel[1]]);
    }
}

#[test]
fn single_expert_output_is_gate_times_expert() {
    let p = bank_params(1, 3, 4, 6);
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let bank = ExpertBank::bind(&bound, "moe", 3).unwrap();
    let x = g.constant(uniform(&mut rng(), &[5, 4], -1.0, 1.0));
    let gates = g.constant(Tensor::new(vec![5, 1], vec![0.9, 0.1, 0.4, 0.7, 0.3]).unwrap());
    let sel = Selection {
        k: 1,
        indices: vec![2, 0, 2, 1, 0],
    };
    let out = moe_forward(&mut g, x, &sel, gates, &bank).unwrap();
    let full: Vec<Tensor> = bank
        .experts
        .clone()
        .iter()
        .map(|e| {
            let y = e.apply(&mut g, x).unwrap();
            g.value(y).clone()
        })
        .collect();
    let out = g.value(out);
    for t in 0..5 {
        let w = g.value(gates).data()[t];
        let want: Vec<f64> = full[sel.indices[t]].row(t).iter().map(|v| w * v).collect();
        assert_eq!(out.row(t), &want[..]);
    }
}

#[test]
fn identical_experts_scale_by_gate_sum() {
    let one = bank_params(2, 1, 3, 5);
    let mut p = ParamSet::new();
    for e in 0..4 {
        for (name, t) in one.iter() {
            p.insert(name.replace("experts.0", &format!("experts.{e}")), t.clone());
        }
    }
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let bank = ExpertBank::bind(&bound, "moe", 4).unwrap();
    let x = g.constant(uniform(&mut rng(), &[3, 3], -1.0, 1.0));
    let gates = g.constant(Tensor::new(vec![3, 2], vec![0.4, 0.3, 0.6, 0.1, 0.25, 0.25]).unwrap());
    let sel = Selection {
        k: 2,
        indices: vec![0, 1, 3, 2, 1, 3],
    };
    let out = moe_forward(&mut g, x, &sel, gates, &bank).unwrap();
    let f = bank.experts[0].apply(&mut g, x).unwrap();
    let (out, f) = (g.value(out), g.value(f));
    for (t, s) in [0.7, 0.7, 0.5].iter().enumerate() {
        for (a, b) in out.row(t).iter().zip(f.row(t)) {
            assert!((a - s * b).abs() < 1e-14);
        }
    }
}

#[test]
fn full_topk_equals_dense_mixture() {
    let (e, d) = (4, 3);
    let p = bank_params(3, e, d, 5);
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let bank = ExpertBank::bind(&bound, "moe", e).unwrap();
    let mut r0 = rng();
    let h = g.constant(uniform(&mut r0, &[6, d], -1.0, 1.0));
    let w = g.constant(uniform(&mut r0, &[d, e], -1.0, 1.0));
    let b = g.constant(uniform(&mut r0, &[e], -1.0, 1.0));
    let r = route(&mut g, h, w, b, e, 1.0, &mut rng(), false).unwrap();
    let out = moe_forward(&mut g, h, &r.selection, r.gate_weights, &bank).unwrap();
    let probs = g.value(r.probs_clean).clone();
    let outs: Vec<Tensor> = bank
        .experts
        .iter()
        .map(|x| {
            let y = x.apply(&mut g, h).unwrap();
            g.value(y).clone()
        })
        .collect();
    let out = g.value(out);
    for t in 0..6 {
        for c in 0..d {
            let want: f64 = (0..e).map(|x| probs.row(t)[x] * outs[x].row(t)[c]).sum();
            assert!((out.row(t)[c] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn unselected_expert_gets_no_gradient() {
    let p = bank_params(4, 3, 3, 4);
    let mut g = Graph::new();
    let bound = p.bind(&mut g, true);
    let bank = ExpertBank::bind(&bound, "moe", 3).unwrap();
    let h = g.constant(uniform(&mut rng(), &[4, 3], -1.0, 1.0));
    let w = g.param(Tensor::zeros(&[3, 3]));
    let b = g.param(Tensor::new(vec![3], vec![2.0, 1.0, -3.0]).unwrap());
    let r = route(&mut g, h, w, b, 1, 0.0, &mut rng(), true).unwrap();
    assert!(r.selection.indices.iter().all(|&i| i == 0));
    let out = moe_forward(&mut g, h, &r.selection, r.gate_weights, &bank).unwrap();
    let loss = weighted_sum(&mut g, out, 5).unwrap();
    let grads = g.backward(loss).unwrap();
    for e in 1..3 {
        let ex = bank.experts[e];
        for v in [ex.w1, ex.b1, ex.w2, ex.b2] {
            assert!(grads.get(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        }
    }
    assert!(grads.get(bank.experts[0].w1).is_some());
    // The router bias still learns, through the selected gate only.
    let gb = grads.get(b).unwrap().data();
    assert!(gb[0] != 0.0 && gb[1] != 0.0);
}

#[test]
fn layer_passes_gradient_check() {
    let (e, d) = (3, 3);
    let p = bank_params(5, e, d, 4);
    let mut r0 = rng();
    let mut params: Vec<Tensor> = p.iter().map(|(_, t)| t.clone()).collect();
    let names: Vec<String> = p.names().cloned().collect();
    params.push(uniform(&mut r0, &[d, e], -1.0, 1.0));
    params.push(uniform(&mut r0, &[e], -0.5, 0.5));
    let h = uniform(&mut r0, &[5, d], -1.0, 1.0);
    let report = finite_difference_check(
        |g, vars| {
            let bound: crate::params::BoundParams = names.iter().cloned().zip(vars.iter().copied()).collect();
            let bank = ExpertBank::bind(&bound, "moe", e)?;
            let x = g.constant(h.clone());
            let r = route(
                g,
                x,
                vars[vars.len() - 2],
                vars[vars.len() - 1],
                2,
                0.0,
                &mut rng(),
                true,
            )?;
            let out = moe_forward(g, x, &r.selection, r.gate_weights, &bank)?;
            weighted_sum(g, out, 8)
        },
        &params,
        DEFAULT_EPSILON,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{}", report.max_rel_error);
}

#[test]
fn shifting_logits_keeps_probs_and_selection() {
    let mut g = Graph::new();
    let mut r0 = rng();
    let h = g.constant(uniform(&mut r0, &[6, 3], -1.0, 1.0));
    let w = g.constant(uniform(&mut r0, &[3, 4], -1.0, 1.0));
    let b0 = uniform(&mut r0, &[4], -1.0, 1.0);
    let b1 = b0.map(|v| v + 7.5);
    let b0 = g.constant(b0);
    let b1 = g.constant(b1);
    let a = route(&mut g, h, w, b0, 2, 0.0, &mut rng(), false).unwrap();
    let c = route(&mut g, h, w, b1, 2, 0.0, &mut rng(), false).unwrap();
    assert_eq!(a.selection, c.selection);
    for (x, y) in g.value(a.probs_clean).data().iter().zip(g.value(c.probs_clean).data()) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn out_of_range_index_errors() {
    let p = bank_params(1, 2, 2, 2);
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let bank = ExpertBank::bind(&bound, "moe", 2).unwrap();
    let x = g.constant(Tensor::ones(&[1, 2]));
    let gates = g.constant(Tensor::ones(&[1, 1]));
    let sel = Selection { k: 1, indices: vec![2] };
    assert!(matches!(
        moe_forward(&mut g, x, &sel, gates, &bank),
        Err(Error::Index { .. })
    ));
}
