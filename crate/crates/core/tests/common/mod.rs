//! Finite-difference gradient oracle shared by the gradient and acceptance
//! test targets.
#![allow(dead_code)]

use plastinet::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const SHAPES_PER_OP: usize = 20;
pub const REL_TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

#[derive(Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub shapes: usize,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps entries whose true
/// gradient is zero from dividing by rounding noise.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn loss_of(case: &Case, inputs: &[Tensor], weights: &Tensor) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = (case.build)(&mut g, &vars)?;
    let w = g.constant(weights.clone());
    let wy = g.mul(y, w)?;
    let loss = g.sum(wy);
    Ok((g, vars, loss))
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `sum(f(inputs) * W)` for a random fixed `W`.
pub fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<f64> {
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = (case.build)(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let weights = Tensor::uniform(&out_shape, 1.0, rng);
    let (g, vars, loss) = loss_of(case, &case.inputs, &weights)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("leaf requires grad").clone();
        for i in 0..case.inputs[k].numel() {
            let at = |delta: f64| -> Result<f64> {
                let mut inputs = case.inputs.clone();
                inputs[k].data_mut()[i] += delta;
                let (g, _, l) = loss_of(case, &inputs, &weights)?;
                Ok(g.value(l).item())
            };
            let numeric = (at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values at least `margin` away from every point in `kinks`.
fn away_from(shape: &[usize], kinks: &[f64], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = rand_t(shape, rng);
    for v in t.data_mut() {
        while kinks.iter().any(|k| (*v - k).abs() < margin) {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    t
}

/// Shapes sharing trailing axes, with size-1 axes on either side.
fn broadcast_pair(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 5));
    match rng.random_range(0..4) {
        0 => (vec![r, c], vec![r, c]),
        1 => (vec![r, c], vec![c]),
        2 => (vec![1, c], vec![r, 1]),
        _ => (vec![r, c], vec![1, 1]),
    }
}

fn case(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { inputs, build: Box::new(build) }
}

pub fn op_names() -> Vec<&'static str> {
    vec![
        "matmul", "transpose", "add", "sub", "mul", "scale", "relu", "exp", "clamp", "minimum", "conv2d",
        "maxpool2", "layernorm", "softmax", "log_softmax", "gather", "sum", "mean", "reshape", "concat", "narrow",
    ]
}

pub fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            case(vec![rand_t(&[m, k], rng), rand_t(&[k, n], rng)], |g, v| g.matmul(v[0], v[1]))
        }
        "transpose" => {
            let s = [dim(rng, 1, 5), dim(rng, 1, 5)];
            case(vec![rand_t(&s, rng)], |g, v| g.transpose(v[0]))
        }
        "add" | "sub" | "mul" => {
            let (a, b) = broadcast_pair(rng);
            let (ta, tb) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
            let inputs = vec![rand_t(&ta, rng), rand_t(&tb, rng)];
            match op {
                "add" => case(inputs, |g, v| g.add(v[0], v[1])),
                "sub" => case(inputs, |g, v| g.sub(v[0], v[1])),
                _ => case(inputs, |g, v| g.mul(v[0], v[1])),
            }
        }
        "scale" => {
            let k = rng.random_range(-3.0..3.0);
            let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
            case(vec![rand_t(&s, rng)], move |g, v| Ok(g.scale(v[0], k)))
        }
        "relu" => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
            case(vec![away_from(&s, &[0.0], 0.01, rng)], |g, v| Ok(g.relu(v[0])))
        }
        "exp" => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
            case(vec![rand_t(&s, rng)], |g, v| Ok(g.exp(v[0])))
        }
        "clamp" => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
            case(vec![away_from(&s, &[-0.5, 0.5], 0.01, rng)], |g, v| Ok(g.clamp(v[0], -0.5, 0.5)))
        }
        "minimum" => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
            let a = rand_t(&s, rng);
            let mut b = a.clone();
            for x in b.data_mut() {
                *x += if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.01..1.0);
            }
            case(vec![a, b], |g, v| g.minimum(v[0], v[1]))
        }
        "conv2d" => {
            let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = dim(rng, 1, 3);
            let (h, w) = (dim(rng, k, 6), dim(rng, k, 6));
            let (stride, pad) = (dim(rng, 1, 2), dim(rng, 0, 1));
            case(vec![rand_t(&[n, c, h, w], rng), rand_t(&[o, c, k, k], rng)], move |g, v| {
                g.conv2d(v[0], v[1], stride, pad)
            })
        }
        "maxpool2" => {
            let s = [dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 2, 5), dim(rng, 2, 5)];
            let numel: usize = s.iter().product();
            let mut vals: Vec<f64> = (0..numel).map(|i| i as f64 * 0.05).collect();
            for i in (1..numel).rev() {
                vals.swap(i, rng.random_range(0..=i));
            }
            case(vec![Tensor::new(s.to_vec(), vals).unwrap()], |g, v| g.maxpool2(v[0]))
        }
        "layernorm" => {
            let (r, c) = (dim(rng, 1, 4), dim(rng, 2, 6));
            case(vec![rand_t(&[r, c], rng), rand_t(&[c], rng), rand_t(&[c], rng)], |g, v| {
                g.layernorm(v[0], v[1], v[2], 1e-5)
            })
        }
        "softmax" | "log_softmax" => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 6)];
            let x = Tensor::uniform(&s, 3.0, rng);
            if op == "softmax" {
                case(vec![x], |g, v| g.softmax(v[0]))
            } else {
                case(vec![x], |g, v| g.log_softmax(v[0]))
            }
        }
        "gather" => {
            let (r, c) = (dim(rng, 1, 5), dim(rng, 1, 5));
            let idx: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            case(vec![rand_t(&[r, c], rng)], move |g, v| g.gather(v[0], &idx))
        }
        "sum" | "mean" => {
            let s = [dim(rng, 1, 4), dim(rng, 1, 5)];
            if op == "sum" {
                case(vec![rand_t(&s, rng)], |g, v| Ok(g.sum(v[0])))
            } else {
                case(vec![rand_t(&s, rng)], |g, v| Ok(g.mean(v[0])))
            }
        }
        "reshape" => {
            let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
            case(vec![rand_t(&[a, b, c], rng)], move |g, v| g.reshape(v[0], &[a * b, c]))
        }
        "concat" => {
            let axis = rng.random_range(0..2);
            let parts = dim(rng, 2, 3);
            let fixed = dim(rng, 1, 4);
            let inputs = (0..parts)
                .map(|_| {
                    let n = dim(rng, 1, 3);
                    let s = if axis == 0 { [n, fixed] } else { [fixed, n] };
                    rand_t(&s, rng)
                })
                .collect();
            case(inputs, move |g, v| g.concat(v, axis))
        }
        "narrow" => {
            let s = [dim(rng, 1, 5), dim(rng, 1, 5)];
            let axis = rng.random_range(0..2);
            let len = dim(rng, 1, s[axis]);
            let start = rng.random_range(0..=s[axis] - len);
            case(vec![rand_t(&s, rng)], move |g, v| g.narrow(v[0], axis, start, len))
        }
        other => panic!("no case for op {other}"),
    }
}

pub fn check_op(op: &'static str, seed: u64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..SHAPES_PER_OP {
        let c = make_case(op, &mut rng);
        worst = worst.max(check_case(&c, &mut rng)?);
    }
    Ok(OpReport { op, shapes: SHAPES_PER_OP, max_rel_err: worst })
}

pub fn gradient_suite(seed: u64) -> Result<Vec<OpReport>> {
    op_names().into_iter().enumerate().map(|(i, op)| check_op(op, seed + i as u64)).collect()
}

/// Advantages as explicit discounted sums of TD errors, truncated after the
/// first terminal step. Quadratic in the sequence length.
pub fn brute_force_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let t = rewards.len();
    let delta = |k: usize| {
        let next = if dones[k] { 0.0 } else { values[k + 1] };
        rewards[k] + gamma * next - values[k]
    };
    (0..t)
        .map(|start| {
            let mut sum = 0.0;
            for k in start..t {
                sum += (gamma * lambda).powi((k - start) as i32) * delta(k);
                if dones[k] {
                    break;
                }
            }
            sum
        })
        .collect()
}

pub fn random_episode(rng: &mut ChaCha8Rng, len: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let rewards = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let values = (0..=len).map(|_| rng.random_range(-2.0..2.0)).collect();
    let dones = (0..len).map(|_| rng.random_bool(0.15)).collect();
    (rewards, values, dones)
}
