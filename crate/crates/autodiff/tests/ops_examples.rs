mod common;

use common::{randn, rng};
use proptest::prelude::*;
use ssvc_autodiff::{AdamW, AdamWConfig, AutodiffError, Graph, ParamStore, Tensor};

fn close(a: f32, b: f32, tol: f32) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn square_derivative() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let d = g.grad(y, &[x]).unwrap();
    assert_eq!(d[0].item(), 6.0);
}

#[test]
fn constant_function_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(3.0));
    let c = g.constant(Tensor::scalar(2.0));
    let y = g.mul(c, c).unwrap();
    let d = g.grad(y, &[x]).unwrap();
    assert_eq!(d[0].item(), 0.0);
}

#[test]
fn non_scalar_loss_and_reuse_are_errors() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    let y = g.tanh(x);
    assert!(matches!(g.backward(y), Err(AutodiffError::NonScalarLoss(_))));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.backward(s).err(), Some(AutodiffError::GraphConsumed));
}

#[test]
fn shared_subexpression_accumulates_like_duplicated_subgraph() {
    let mut r = rng(11);
    let x0 = randn(&mut r, &[4]);

    // f = sum(tanh(x) * tanh(x)) with one shared tanh node
    let mut g = Graph::new();
    let x = g.input(x0.clone());
    let t = g.tanh(x);
    let p = g.mul(t, t).unwrap();
    let l = g.sum(p);
    let shared = g.grad(l, &[x]).unwrap().remove(0);

    // same function with the tanh subgraph built twice
    let mut g = Graph::new();
    let x = g.input(x0);
    let t1 = g.tanh(x);
    let t2 = g.tanh(x);
    let p = g.mul(t1, t2).unwrap();
    let l = g.sum(p);
    let dup = g.grad(l, &[x]).unwrap().remove(0);
    assert_eq!(shared, dup);
}

#[test]
fn gradient_reversal_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    let y = g.gradient_reversal(x, 1.0);
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    let l = g.sum(y);
    assert_eq!(g.grad(l, &[x]).unwrap()[0].data(), &[-1.0, -1.0]);

    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![5.0]));
    let y = g.gradient_reversal(x, 0.5);
    let w = g.constant(Tensor::vector(vec![2.0]));
    let p = g.mul(y, w).unwrap();
    let l = g.sum(p);
    assert_eq!(g.grad(l, &[x]).unwrap()[0].data(), &[-1.0]);
}

#[test]
fn double_reversal_equals_identity_path() {
    let mut r = rng(5);
    let x0 = randn(&mut r, &[6]);
    let grad_of = |reverse: bool| {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let mut y = x;
        if reverse {
            y = g.gradient_reversal(y, 1.0);
            y = g.gradient_reversal(y, 1.0);
        }
        let t = g.tanh(y);
        let sq = g.mul(t, t).unwrap();
        let l = g.sum(sq);
        g.grad(l, &[x]).unwrap().remove(0)
    };
    assert_eq!(grad_of(true), grad_of(false));
}

#[test]
fn reversal_negates_exactly_on_three_node_graph() {
    // x -> grl -> w*x -> sum against x -> w*x -> sum
    for reverse in [false, true] {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.5, -1.5, 2.0]));
        let w = g.constant(Tensor::vector(vec![3.0, -2.0, 0.25]));
        let h = if reverse { g.gradient_reversal(x, 1.0) } else { x };
        let p = g.mul(h, w).unwrap();
        let l = g.sum(p);
        let d = g.grad(l, &[x]).unwrap().remove(0);
        let sign = if reverse { -1.0 } else { 1.0 };
        assert_eq!(d.data(), &[3.0 * sign, -2.0 * sign, 0.25 * sign]);
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let x = g.input(Tensor::vector(vec![0.0, 3f32.ln()]));
    let s = g.softmax(x, 0).unwrap();
    assert!(close(g.value(s).data()[0], 0.25, 1e-6));
    assert!(close(g.value(s).data()[1], 0.75, 1e-6));

    assert!(matches!(g.softmax(x, 1), Err(AutodiffError::InvalidAxis { .. })));
}

#[test]
fn softmax_extreme_logits_stay_finite() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1e30, -1e30, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 0.0, 0.0]);
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        v in proptest::collection::vec(-50.0f32..50.0, 1..12),
        c in -100.0f32..100.0,
        rows in 1usize..4,
    ) {
        let n = v.len();
        let data: Vec<f32> = (0..rows).flat_map(|r| v.iter().map(move |x| x + r as f32)).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(rows, n, data.clone()).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let shifted = g.input(Tensor::matrix(rows, n, data.iter().map(|x| x + c).collect()).unwrap());
        let s2 = g.softmax(shifted, 1).unwrap();
        for r in 0..rows {
            let row = g.value(s).row(r);
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            for (a, b) in row.iter().zip(g.value(s2).row(r)) {
                prop_assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn cosine_examples() {
    let mut g = Graph::new();
    let v = g.input(Tensor::vector(vec![1.0, -2.0, 3.0]));
    let nv = g.neg(v);
    let c = g.cosine_similarity(v, v).unwrap();
    assert!(close(g.value(c).item(), 1.0, 1e-6));
    let c = g.cosine_similarity(v, nv).unwrap();
    assert!(close(g.value(c).item(), -1.0, 1e-6));
    let a = g.input(Tensor::vector(vec![1.0, 0.0]));
    let b = g.input(Tensor::vector(vec![0.0, 1.0]));
    let c = g.cosine_similarity(a, b).unwrap();
    assert_eq!(g.value(c).item(), 0.0);
    let z = g.input(Tensor::vector(vec![0.0, 0.0]));
    assert!(matches!(
        g.cosine_similarity(a, z),
        Err(AutodiffError::DegenerateVector { .. })
    ));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let l = g.input(Tensor::zeros(&[3, 4]));
    let ce = g.cross_entropy_logits(l, &[0, 1, 3]).unwrap();
    assert!(close(g.value(ce).item(), 4f32.ln(), 1e-6));

    let l = g.input(Tensor::matrix(1, 3, vec![0.0, 1e4, 0.0]).unwrap());
    let ce = g.cross_entropy_logits(l, &[1]).unwrap();
    assert!(g.value(ce).item().abs() < 1e-6);

    assert!(matches!(
        g.cross_entropy_logits(l, &[3]),
        Err(AutodiffError::TargetOutOfRange { target: 3, classes: 3 })
    ));
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let mut r = rng(21);
    let logits = randn(&mut r, &[5, 7]);
    let targets = [0usize, 6, 3, 3, 1];
    let oracle: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row: Vec<f64> = logits.row(i).iter().map(|v| *v as f64).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum::<f64>()
        / targets.len() as f64;
    let mut g = Graph::new();
    let l = g.input(logits);
    let ce = g.cross_entropy_logits(l, &targets).unwrap();
    assert!((g.value(ce).item() as f64 - oracle).abs() < 1e-5);
}

fn single_param_store(values: Vec<f32>) -> (ParamStore, ssvc_autodiff::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(values)).unwrap();
    (store, id)
}

#[test]
fn adamw_zero_gradient_no_decay_is_noop() {
    let (mut store, id) = single_param_store(vec![1.0, -2.0, 0.5]);
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &store, vec![id]);
    opt.step(&mut store, &[(id, Tensor::zeros(&[3]))]).unwrap();
    assert_eq!(store.get(id).data(), &[1.0, -2.0, 0.5]);
}

#[test]
fn adamw_zero_gradient_applies_decoupled_decay() {
    let (mut store, id) = single_param_store(vec![1.0, -2.0, 0.5]);
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.01,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &store, vec![id]);
    opt.step(&mut store, &[(id, Tensor::zeros(&[3]))]).unwrap();
    let f = 1.0 - 0.1 * 0.01;
    for (p, p0) in store.get(id).data().iter().zip([1.0f32, -2.0, 0.5]) {
        assert!(close(*p, p0 * f, 1e-7));
    }
}

#[test]
fn adamw_single_step_closed_form() {
    // From fresh state with g = 1: m̂ = 1, v̂ = 1, so
    // p1 = p0·(1 − ηλ) − η / (1 + ε).
    let (mut store, id) = single_param_store(vec![0.3]);
    let cfg = AdamWConfig::default();
    let mut opt = AdamW::new(cfg, &store, vec![id]);
    opt.step(&mut store, &[(id, Tensor::vector(vec![1.0]))]).unwrap();
    let expected = 0.3 * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr / (1.0 + cfg.eps);
    assert!(close(store.get(id).data()[0], expected, 1e-9));
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn adamw_rejects_shape_mismatch() {
    let (mut store, id) = single_param_store(vec![0.3, 0.1]);
    let mut opt = AdamW::new(AdamWConfig::default(), &store, vec![id]);
    let err = opt.step(&mut store, &[(id, Tensor::zeros(&[3]))]).unwrap_err();
    assert!(matches!(err, AutodiffError::ShapeMismatch { .. }));
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let b = store.add("b", Tensor::vector(vec![3.0])).unwrap();
    let mut g = Graph::new();
    let av = g.param(&store, a);
    let l = g.sum(av);
    let grads = g.backward(l).unwrap().for_params(&store);
    assert_eq!(grads[0].1.data(), &[1.0, 1.0]);
    assert_eq!(grads[1], (b, Tensor::zeros(&[1])));
}

#[test]
fn causal_attention_ignores_future_rows() {
    let mut r = rng(8);
    let q = randn(&mut r, &[5, 4]);
    let k = randn(&mut r, &[5, 4]);
    let v = randn(&mut r, &[5, 4]);
    let out_of = |k: Tensor, v: Tensor| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k), g.input(v));
        let o = g.attention(qv, kv, vv, 2, &[5], true).unwrap();
        g.value(o).clone()
    };
    let base = out_of(k.clone(), v.clone());
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    k2.row_mut(4).iter_mut().for_each(|x| *x += 3.0);
    v2.row_mut(4).iter_mut().for_each(|x| *x -= 3.0);
    let changed = out_of(k2, v2);
    for row in 0..4 {
        assert_eq!(base.row(row), changed.row(row));
    }
    assert_ne!(base.row(4), changed.row(4));
}
