#![allow(dead_code)]

use attrsteer::diff::gradcheck::max_rel_error;
use attrsteer::seed::rng;
use attrsteer::{Graph, Result, Tensor, Var};
use rand::Rng;

pub type Build = fn(&mut Graph<'_>, &[Var]) -> Result<Var>;

/// A differentiable op under test: input shapes and a graph builder.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    /// Inputs drawn from (0.5, 2) instead of a standard normal.
    pub positive: bool,
    pub build: Build,
}

pub fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, shapes: &'static [&'static [usize]], build: Build) -> OpCase {
        OpCase {
            name,
            shapes,
            positive: false,
            build,
        }
    }
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1])),
        case("add", &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1])),
        case("sub", &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1])),
        case("add_bias", &[&[3, 4], &[4]], |g, x| g.add_bias(x[0], x[1])),
        case("scale", &[&[2, 5]], |g, x| Ok(g.scale(x[0], -1.7))),
        case("relu", &[&[3, 4]], |g, x| Ok(g.relu(x[0]))),
        OpCase {
            name: "ln",
            shapes: &[&[3, 4]],
            positive: true,
            build: |g, x| g.ln(x[0]),
        },
        case("softmax_rows", &[&[3, 5]], |g, x| g.softmax(x[0], 1)),
        case("softmax_cols", &[&[3, 5]], |g, x| g.softmax(x[0], 0)),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |g, x| g.layer_norm(x[0], x[1], x[2])),
        case("embedding", &[&[6, 3]], |g, x| g.embedding(x[0], &[0, 2, 2, 5])),
        case("cross_entropy", &[&[4, 5]], |g, x| g.cross_entropy(x[0], &[0, 3, 1, 4], 0.1)),
        case("mean_rows", &[&[3, 4]], |g, x| g.mean_over_axis(x[0], 0)),
        case("mean_cols", &[&[3, 4]], |g, x| g.mean_over_axis(x[0], 1)),
        case("sum", &[&[3, 4]], |g, x| Ok(g.sum(x[0]))),
        case("concat_rows", &[&[2, 3], &[1, 3], &[3, 3]], |g, x| g.concat_rows(x)),
        case("slice_rows", &[&[5, 3]], |g, x| g.slice_rows(x[0], 1, 4)),
        case("attention", &[&[4, 6], &[5, 6], &[5, 6]], |g, x| {
            g.attention(x[0], x[1], x[2], &[(0, 2), (0, 5), (1, 4), (2, 3)], 2)
        }),
        case("dropout", &[&[4, 5]], |g, x| {
            // same mask on every evaluation
            Ok(g.dropout(x[0], 0.3, &mut rng(99)))
        }),
    ]
}

fn inputs(case: &OpCase, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    case.shapes
        .iter()
        .map(|s| {
            if case.positive {
                let n: usize = s.iter().product();
                Tensor::new(s.to_vec(), (0..n).map(|_| r.gen_range(0.5..2.0)).collect()).unwrap()
            } else {
                Tensor::normal(s, 1.0, &mut r)
            }
        })
        .collect()
}

/// `sum(w * op(x))` for a fixed random `w`, so every output entry matters.
fn scalar_loss(case: &OpCase, xs: &[Tensor], w: &Tensor, grads: bool) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod);
    let value = g.value(loss).item();
    if !grads {
        return Ok((value, vec![]));
    }
    let mut gr = g.backward(loss)?;
    let gs = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| gr.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    Ok((value, gs))
}

/// Largest relative error between analytic and central-difference
/// gradients over every input coordinate of one random instance.
pub fn op_gradient_error(case: &OpCase, seed: u64) -> f64 {
    let xs = inputs(case, seed);
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let out = (case.build)(&mut g, &vars).unwrap();
        g.value(out).shape().to_vec()
    };
    let w = Tensor::normal(&out_shape, 1.0, &mut rng(seed ^ 0x5eed));
    let (_, grads) = scalar_loss(case, &xs, &w, true).unwrap();
    let mut worst = 0.0f64;
    for j in 0..xs.len() {
        let err = max_rel_error(
            |t| {
                let mut p = xs.to_vec();
                p[j] = t.clone();
                Ok(scalar_loss(case, &p, &w, false)?.0)
            },
            &xs[j],
            &grads[j],
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

use attrsteer::seq2seq::{ModelConfig, ModelParams, StepDecoder, TokenId, EOS};

pub fn random_model(seed: u64, vocab_size: usize, d_model: usize) -> ModelParams {
    let cfg = ModelConfig {
        d_model,
        num_heads: 2,
        ffn_dim: 2 * d_model,
        vocab_size,
        max_positions: 16,
        dropout: 0.0,
        ..Default::default()
    };
    ModelParams::init(&cfg, seed).unwrap()
}

pub fn random_ids(seed: u64, vocab_size: usize, len: std::ops::RangeInclusive<usize>) -> Vec<TokenId> {
    let mut r = rng(seed);
    let n = r.gen_range(len);
    (0..n).map(|_| r.gen_range(1..vocab_size)).collect()
}

/// Best length-normalised finished sequence of at most `max_len` tokens
/// (EOS included), by depth-first enumeration of every sequence.
pub fn exhaustive_best<D: StepDecoder>(dec: &D, tag: TokenId, max_len: usize, penalty: f64) -> (Vec<TokenId>, f64) {
    fn walk<D: StepDecoder>(
        dec: &D,
        state: &D::State,
        inputs: &mut Vec<TokenId>,
        log_prob: f64,
        max_len: usize,
        penalty: f64,
        best: &mut (Vec<TokenId>, f64),
    ) {
        let (lp, next) = dec.step(state, inputs).unwrap();
        let generated = inputs.len() - 1;
        let score = (log_prob + lp[EOS]) / ((generated + 1) as f64).powf(penalty);
        if score > best.1 {
            *best = (inputs[1..].to_vec(), score);
        }
        if generated + 1 == max_len {
            return;
        }
        for tok in 1..lp.len() {
            inputs.push(tok);
            walk(dec, &next, inputs, log_prob + lp[tok], max_len, penalty, best);
            inputs.pop();
        }
    }
    let mut best = (vec![], f64::NEG_INFINITY);
    let init = dec.initial().unwrap();
    walk(dec, &init, &mut vec![tag], 0.0, max_len, penalty, &mut best);
    best
}
