//! Central finite-difference oracle shared by the gradient tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssvc_autodiff::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        // Box-Muller keeps the oracle free of extra dependencies.
        let u1: f64 = rng.gen_range(1e-9..1.0);
        let u2: f64 = rng.gen::<f64>();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    })
}

/// Random values bounded away from zero (for kinked or singular ops).
pub fn rand_away_from_zero(rng: &mut impl Rng, shape: &[usize], lo: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..(lo + 1.5));
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Projects the output onto fixed random weights so any-shaped outputs give
/// a scalar; evaluated in f64 outside the graph.
fn projected(out: &Tensor, weights: &[f32]) -> f64 {
    out.data()
        .iter()
        .zip(weights)
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum()
}

/// Compares reverse-mode gradients of `build` against central differences.
/// Returns the worst relative error over all input entries.
pub fn check_grad<F>(inputs: &[Tensor], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let shape = g.shape(out).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let weights = randn(&mut r, &shape);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    let analytic = g.grad(loss, &vars).unwrap();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        projected(g.value(out), weights.data())
    };

    let mut worst = 0.0f64;
    let mut perturbed = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            perturbed[i].data_mut()[j] = (x0 as f64 + FD_STEP) as f32;
            let plus = eval(&perturbed);
            perturbed[i].data_mut()[j] = (x0 as f64 - FD_STEP) as f32;
            let minus = eval(&perturbed);
            perturbed[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

pub type Make = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
pub type Build = fn(&mut Graph, &[Var]) -> Var;

/// One differentiable op under test: input generator and graph builder.
pub struct OpCase {
    pub name: &'static str,
    pub make: Make,
    pub build: Build,
}

fn case(name: &'static str, make: Make, build: Build) -> OpCase {
    OpCase { name, make, build }
}

/// Worst relative error of `case` over `trials` random draws.
pub fn worst_error(case: &OpCase, trials: u64) -> f64 {
    (0..trials)
        .map(|trial| {
            let mut r = rng(1000 + trial);
            let inputs = (case.make)(&mut r);
            check_grad(&inputs, trial, case.build)
        })
        .fold(0.0, f64::max)
}

/// Every differentiable op of the graph.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |g, v| g.add(v[0], v[1]).unwrap()),
        case("sub", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |g, v| g.sub(v[0], v[1]).unwrap()),
        case("mul", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |g, v| g.mul(v[0], v[1]).unwrap()),
        case("mse", |r| vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |g, v| g.mse(v[0], v[1]).unwrap()),
        case("add_row", |r| vec![randn(r, &[5, 3]), randn(r, &[3])], |g, v| g.add_row(v[0], v[1]).unwrap()),
        case(
            "mul_scalar_var",
            |r| vec![randn(r, &[4, 2]), randn(r, &[])],
            |g, v| g.mul_scalar_var(v[0], v[1]).unwrap(),
        ),
        case("affine", |r| vec![randn(r, &[6])], |g, v| g.affine(v[0], -1.7, 0.3)),
        case("scale", |r| vec![randn(r, &[6])], |g, v| g.scale(v[0], 2.5)),
        case("neg", |r| vec![randn(r, &[6])], |g, v| g.neg(v[0])),
        case("tanh", |r| vec![randn(r, &[2, 5])], |g, v| g.tanh(v[0])),
        case("gelu", |r| vec![randn(r, &[2, 5])], |g, v| g.gelu(v[0])),
        case("exp", |r| vec![randn(r, &[2, 5])], |g, v| g.exp(v[0])),
        case("relu", |r| vec![rand_away_from_zero(r, &[2, 5], 0.05)], |g, v| g.relu(v[0])),
        case("abs", |r| vec![rand_away_from_zero(r, &[2, 5], 0.05)], |g, v| g.abs(v[0])),
        case("recip", |r| vec![rand_away_from_zero(r, &[2, 5], 0.5)], |g, v| g.recip(v[0])),
        case("log", |r| vec![rand_away_from_zero(r, &[2, 5], 0.5)], |g, v| {
            let a = g.abs(v[0]);
            g.log(a)
        }),
        case("matmul", |r| vec![randn(r, &[3, 4]), randn(r, &[4, 5])], |g, v| g.matmul(v[0], v[1]).unwrap()),
        case("matmul_vec", |r| vec![randn(r, &[3, 4]), randn(r, &[4])], |g, v| g.matmul(v[0], v[1]).unwrap()),
        case("transpose", |r| vec![randn(r, &[3, 4])], |g, v| g.transpose(v[0])),
        case("reshape", |r| vec![randn(r, &[3, 4])], |g, v| g.reshape(v[0], &[2, 6]).unwrap()),
        case("sum", |r| vec![randn(r, &[3, 4])], |g, v| g.sum(v[0])),
        case("mean", |r| vec![randn(r, &[3, 4])], |g, v| g.mean(v[0])),
        case("segment_mean", |r| vec![randn(r, &[6, 3])], |g, v| g.segment_mean(v[0], &[2, 1, 3]).unwrap()),
        case("repeat_rows", |r| vec![randn(r, &[3, 2])], |g, v| g.repeat_rows(v[0], &[2, 1, 3]).unwrap()),
        case("softmax_1d", |r| vec![randn(r, &[5])], |g, v| g.softmax(v[0], 0).unwrap()),
        case("softmax_rows", |r| vec![randn(r, &[3, 4])], |g, v| g.softmax(v[0], 1).unwrap()),
        case("softmax_cols", |r| vec![randn(r, &[3, 4])], |g, v| g.softmax(v[0], 0).unwrap()),
        case(
            "layer_norm",
            |r| vec![randn(r, &[4, 6]), randn(r, &[6]), randn(r, &[6])],
            |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(),
        ),
        case(
            "attention_full",
            |r| vec![randn(r, &[7, 4]), randn(r, &[7, 4]), randn(r, &[7, 4])],
            |g, v| g.attention(v[0], v[1], v[2], 2, &[3, 4], false).unwrap(),
        ),
        case(
            "attention_causal",
            |r| vec![randn(r, &[7, 4]), randn(r, &[7, 4]), randn(r, &[7, 4])],
            |g, v| g.attention(v[0], v[1], v[2], 2, &[3, 4], true).unwrap(),
        ),
        case(
            "attention_one_head",
            |r| vec![randn(r, &[7, 4]), randn(r, &[7, 4]), randn(r, &[7, 4])],
            |g, v| g.attention(v[0], v[1], v[2], 1, &[7], true).unwrap(),
        ),
        case(
            "conv1d",
            |r| vec![randn(r, &[7, 3]), randn(r, &[9, 2]), randn(r, &[2])],
            |g, v| g.conv1d(v[0], v[1], v[2], &[4, 3]).unwrap(),
        ),
        case(
            "concat_rows",
            |r| vec![randn(r, &[2, 3]), randn(r, &[1, 3])],
            |g, v| g.concat_rows(&[v[0], v[1]]).unwrap(),
        ),
        case(
            "concat_cols",
            |r| vec![randn(r, &[2, 3]), randn(r, &[2, 1])],
            |g, v| g.concat_cols(&[v[0], v[1]]).unwrap(),
        ),
        case("index_rows", |r| vec![randn(r, &[4, 3])], |g, v| g.index_rows(v[0], &[3, 0, 3, 1]).unwrap()),
        case("embedding", |r| vec![randn(r, &[5, 3])], |g, v| g.embedding(v[0], &[4, 0, 4, 2]).unwrap()),
        case(
            "cross_entropy",
            |r| vec![randn(r, &[4, 6])],
            |g, v| g.cross_entropy_logits(v[0], &[0, 5, 2, 2]).unwrap(),
        ),
        case(
            "cosine",
            |r| vec![randn(r, &[6]), randn(r, &[6])],
            |g, v| g.cosine_similarity(v[0], v[1]).unwrap(),
        ),
        case("normalize_rows", |r| vec![randn(r, &[3, 4])], |g, v| g.normalize_rows(v[0]).unwrap()),
        case(
            "mlp",
            |r| vec![randn(r, &[4, 5]), randn(r, &[5, 8]), randn(r, &[8]), randn(r, &[8, 3]), randn(r, &[3])],
            |g, v| {
                let h = g.matmul(v[0], v[1]).unwrap();
                let h = g.add_row(h, v[2]).unwrap();
                let h = g.tanh(h);
                let o = g.matmul(h, v[3]).unwrap();
                g.add_row(o, v[4]).unwrap()
            },
        ),
    ]
}

/// input → gradient_reversal → sum: the gradient must be exactly the
/// negated gradient of input → sum.
pub fn reversal_negates_exactly() -> bool {
    let x = Tensor::from_fn(&[4], |i| i as f32 - 1.5);
    let grad = |reverse: bool| {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = if reverse { g.gradient_reversal(v, 1.0) } else { v };
        let loss = g.sum(y);
        g.grad(loss, &[v]).unwrap().remove(0)
    };
    let (plain, reversed) = (grad(false), grad(true));
    plain.data().iter().zip(reversed.data()).all(|(a, b)| *b == -*a) && plain.data().iter().all(|a| *a == 1.0)
}
