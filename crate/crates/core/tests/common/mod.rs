#![allow(dead_code)]

use mdmt_core::model::ModelConfig;
use mdmt_core::tensor::Trainable;
use mdmt_core::{Graph, Model, Result, RngStream, Tensor, Var};

pub const FD_STEP: f64 = 1e-6;

/// `||a - b|| / max(||a||, ||b||)`, or `||a - b||` when both are tiny.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-7 {
        diff
    } else {
        diff / scale
    }
}

/// Reduce any output to a scalar with fixed random weights so every output
/// element contributes to the checked gradient.
fn to_scalar(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let t = g.value(out).clone();
    if t.numel() == 1 {
        return Ok(out);
    }
    let cols = t.as_matrix_dims().1;
    let mut rng = RngStream::new(seed);
    let w = Tensor::from_f64(vec![cols, 1], &(0..cols).map(|_| rng.normal()).collect::<Vec<_>>())?;
    let w = g.constant(w);
    let y = g.matmul(out, w)?;
    Ok(g.sum(y))
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `f` with respect to each of `inputs`.
pub fn check_op<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(Trainable::Nothing);
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        let s = to_scalar(&mut g, out, 99)?;
        Ok(g.value(s).data()[0])
    };
    let mut g = Graph::new(Trainable::Nothing);
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let s = to_scalar(&mut g, out, 99)?;
    g.backward(s)?;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(vars[i])
            .map(|v| v.to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        let mut numeric = vec![0.0; x.numel()];
        let mut xs = inputs.to_vec();
        for j in 0..x.numel() {
            let orig = x.data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

/// Worst relative error of parameter gradients of a model loss, over the
/// parameters whose names start with one of `prefixes`.
pub fn check_model_loss<F>(model: &Model<f64>, prefixes: &[&str], loss: F) -> Result<f64>
where
    F: Fn(&Model<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new(Trainable::prefixes(prefixes));
    let l = loss(model, &mut g)?;
    g.backward(l)?;
    let grads = g.param_grads();
    let mut worst: f64 = 0.0;
    let mut m = model.clone();
    for (name, analytic) in &grads {
        let n = analytic.len();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = m.params.get(name)?.data()[j];
            m.params.get_mut(name)?.data_mut()[j] = orig + FD_STEP;
            let up = value_of(&m, &loss)?;
            m.params.get_mut(name)?.data_mut()[j] = orig - FD_STEP;
            let down = value_of(&m, &loss)?;
            m.params.get_mut(name)?.data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(analytic, &numeric));
    }
    if grads.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(worst)
}

fn value_of<F>(m: &Model<f64>, loss: &F) -> Result<f64>
where
    F: Fn(&Model<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new(Trainable::Nothing);
    let l = loss(m, &mut g)?;
    Ok(g.value(l).data()[0])
}

pub fn random_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape.to_vec(), &(0..n).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
}

/// Like [`random_tensor`] but with every entry at least `margin` away from 0.
pub fn random_tensor_off_zero(shape: &[usize], margin: f64, rng: &mut RngStream) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.normal();
            if v.abs() < margin {
                margin.copysign(v) * 2.0
            } else {
                v
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// A model small enough for exhaustive finite differences.
pub fn tiny_config(src_vocab: usize, tgt_vocab: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        src_vocab,
        tgt_vocab,
        max_len: 16,
        num_experts: 3,
        expert_inner_dim: 4,
        routing_k: 2,
        seed,
        ..ModelConfig::desk()
    }
}

/// Random sentences of token ids in `first..vocab` with lengths in `1..=max_len`.
pub fn random_sentences(n: usize, vocab: usize, first: usize, max_len: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let len = 1 + rng.below(max_len);
            (0..len).map(|_| first + rng.below(vocab - first)).collect()
        })
        .collect()
}

/// Overwrite every tensor whose name starts with `prefix` with small random values.
pub fn randomize(model: &mut Model<f64>, prefix: &str, scale: f64, rng: &mut RngStream) {
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_string)
        .collect();
    for n in names {
        for v in model.params.get_mut(&n).unwrap().data_mut() {
            *v = scale * rng.normal();
        }
    }
}
pub mod grad;
