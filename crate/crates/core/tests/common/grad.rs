use mdmt_core::model::discriminator;
use mdmt_core::model::{ExpertPlan, BACKBONE_PREFIXES};
use mdmt_core::tensor::ops::AttentionSpec;
use mdmt_core::{Model, Result, RngStream};

use super::{check_model_loss, check_op, random_sentences, random_tensor, random_tensor_off_zero, randomize, tiny_config};

pub const TRIALS: u64 = 10;

pub type Case = (&'static str, fn(u64) -> Result<f64>);

fn attention_case(seed: u64, causal: bool) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let (batch, q_len, heads, dim) = (2, 3, 2, 4);
    let k_len = if causal { q_len } else { 4 };
    let mut key_valid = vec![true; batch * k_len];
    key_valid[k_len - 1] = false;
    if !causal {
        key_valid[2 * k_len - 2] = false;
        key_valid[2 * k_len - 1] = false;
    }
    let q = random_tensor(&[batch * q_len, dim], &mut rng);
    let k = random_tensor(&[batch * k_len, dim], &mut rng);
    let v = random_tensor(&[batch * k_len, dim], &mut rng);
    check_op(&[q, k, v], move |g, x| {
        let spec = AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            causal,
            key_valid: key_valid.clone(),
        };
        g.attention(x[0], x[1], x[2], spec)
    })
}

/// Every differentiable tape operation, one random instance per seed.
pub fn op_cases() -> Vec<Case> {
    vec![
        ("matmul", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor(&[3, 4], &mut r), random_tensor(&[4, 2], &mut r)], |g, x| g.matmul(x[0], x[1]))
        }),
        ("add", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor(&[3, 4], &mut r), random_tensor(&[3, 4], &mut r)], |g, x| g.add(x[0], x[1]))
        }),
        ("add_bias", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor(&[3, 4], &mut r), random_tensor(&[4], &mut r)], |g, x| g.add_bias(x[0], x[1]))
        }),
        ("linear", |s| {
            let mut r = RngStream::new(s);
            let ins = [random_tensor(&[3, 4], &mut r), random_tensor(&[4, 5], &mut r), random_tensor(&[5], &mut r)];
            check_op(&ins, |g, x| g.linear(x[0], x[1], x[2]))
        }),
        ("scale", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor(&[3, 4], &mut r)], |g, x| Ok(g.scale(x[0], -0.7)))
        }),
        ("relu", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor_off_zero(&[4, 5], 1e-3, &mut r)], |g, x| Ok(g.relu(x[0])))
        }),
        ("tanh", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor(&[4, 5], &mut r)], |g, x| Ok(g.tanh(x[0])))
        }),
        ("softmax", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor(&[3, 5], &mut r)], |g, x| Ok(g.softmax(x[0])))
        }),
        ("sum", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor(&[3, 4], &mut r)], |g, x| Ok(g.sum(x[0])))
        }),
        ("dropout", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor(&[4, 6], &mut r)], move |g, x| {
                let mut mask_rng = RngStream::new(s + 1000);
                Ok(g.dropout(x[0], 0.3, Some(&mut mask_rng)))
            })
        }),
        ("layer_norm", |s| {
            let mut r = RngStream::new(s);
            let ins = [random_tensor(&[3, 6], &mut r), random_tensor(&[6], &mut r), random_tensor(&[6], &mut r)];
            check_op(&ins, |g, x| g.layer_norm(x[0], x[1], x[2]))
        }),
        ("cross_entropy", |s| {
            let mut r = RngStream::new(s);
            let targets: Vec<usize> = (0..5).map(|_| r.below(6)).chain([0]).collect();
            check_op(&[random_tensor(&[6, 6], &mut r)], move |g, x| {
                g.cross_entropy(x[0], &targets, Some(0))
            })
        }),
        ("embedding", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor(&[7, 4], &mut r)], |g, x| g.embedding(x[0], &[1, 3, 3, 6, 0]))
        }),
        ("attention", |s| attention_case(s, false)),
        ("causal_attention", |s| attention_case(s, true)),
        ("masked_mean_pool", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor(&[6, 4], &mut r)], |g, x| {
                g.masked_mean_pool(x[0], &[true, true, false, true, false, false], 2)
            })
        }),
        ("gather_rows", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor(&[5, 3], &mut r)], |g, x| g.gather_rows(x[0], &[4, 0, 0, 2]))
        }),
        ("assemble_rows", |s| {
            let mut r = RngStream::new(s);
            check_op(&[random_tensor(&[2, 3], &mut r), random_tensor(&[2, 3], &mut r)], |g, x| {
                g.assemble_rows(vec![(x[0], vec![1, 3]), (x[1], vec![0, 2])], 4)
            })
        }),
    ]
}

const SRC_V: usize = 11;
const TGT_V: usize = 10;

fn batch(seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut r = RngStream::new(seed ^ 0xbeef);
    let src = random_sentences(3, SRC_V, 4, 5, &mut r);
    let tgt = random_sentences(3, TGT_V, 4, 5, &mut r);
    (src, tgt)
}

/// Translation loss, distillation loss and translation loss through experts.
pub fn loss_cases() -> Vec<Case> {
    vec![
        ("translation_loss", |s| {
            let model = Model::<f64>::new(tiny_config(SRC_V, TGT_V, s))?;
            let (src, tgt) = batch(s);
            check_model_loss(&model, &BACKBONE_PREFIXES, move |m, g| Ok(m.loss(g, &src, &tgt, None, None)?.0))
        }),
        ("distillation_loss", |s| {
            let mut model = Model::<f64>::new(tiny_config(SRC_V, TGT_V, s))?;
            model.init_discriminator(s);
            let (src, _) = batch(s);
            let mut r = RngStream::new(s);
            let labels: Vec<usize> = src.iter().map(|_| r.below(3)).collect();
            check_model_loss(&model, &["disc.", "enc.", "shared."], move |m, g| {
                let enc = m.encode(g, &src, None)?;
                let f = discriminator::pool(g, &enc)?;
                discriminator::distillation_loss(g, &m.params, f, &labels)
            })
        }),
        ("expert_translation_loss", |s| {
            let mut model = Model::<f64>::new(tiny_config(SRC_V, TGT_V, s))?;
            model.init_experts(s);
            let mut r = RngStream::new(s);
            randomize(&mut model, "expert.", 0.3, &mut r);
            let (src, tgt) = batch(s);
            let plan = ExpertPlan::shared(src.iter().map(|_| r.below(3)).collect(), model.config.num_layers);
            check_model_loss(&model, &["expert.", "dec.", "enc.", "shared."], move |m, g| {
                Ok(m.loss(g, &src, &tgt, Some(&plan), None)?.0)
            })
        }),
    ]
}

/// Worst error of each case over `TRIALS` seeds.
pub fn run_cases(cases: &[Case]) -> Result<Vec<(&'static str, f64)>> {
    cases
        .iter()
        .map(|(name, f)| {
            let mut worst: f64 = 0.0;
            for t in 0..TRIALS {
                worst = worst.max(f(t + 1)?);
            }
            Ok((*name, worst))
        })
        .collect()
}
