#![allow(dead_code)]

pub mod reference;

use caat::train::{Batch, CaatModel, ModelConfig, ModelGrads, StepOptions};
use caat::{CommLedger, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn model_config(
    layers: usize,
    hidden: usize,
    heads: usize,
    vocab: usize,
    seq: usize,
    ranks: usize,
    p: f64,
) -> ModelConfig {
    ModelConfig {
        vocab,
        hidden,
        heads,
        layers,
        ranks,
        max_seq: seq,
        p,
        scale_private: true,
    }
}

pub fn random_batch(vocab: usize, batch: usize, seq: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..batch * seq)
        .map(|_| rng.random_range(0..vocab))
        .collect();
    let targets = (0..batch * seq)
        .map(|_| rng.random_range(0..vocab))
        .collect();
    Batch::new(inputs, targets, batch, seq).unwrap()
}

/// Redraws every parameter from a wider distribution so that gradients are
/// far from zero in every coordinate.
pub fn randomize(model: &mut CaatModel<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        let gain = p.ndim() == 1;
        for v in p.data_mut() {
            let u: f64 = rng.random_range(-1.0..1.0);
            *v = if gain {
                1.0 + 0.3 * u
            } else {
                std * u * 3f64.sqrt()
            };
        }
    }
}

/// Shards gathered back into full matrices, named like the reference model.
pub fn full_grads(g: &ModelGrads<f64>) -> Vec<(String, Vec<f64>)> {
    let cols = |v: &[Tensor<f64>]| Tensor::concat_cols(v).unwrap().data().to_vec();
    let rows = |v: &[Tensor<f64>]| Tensor::concat_rows(v).unwrap().data().to_vec();
    let mut out = vec![
        ("embed".to_string(), g.embed.data().to_vec()),
        ("pos".to_string(), g.pos.data().to_vec()),
    ];
    for (i, l) in g.layers.iter().enumerate() {
        out.push((
            format!("layers.{i}.attn_norm"),
            l.attn_norm.synced().data().to_vec(),
        ));
        out.push((format!("layers.{i}.attn.wq"), cols(&l.attn.wq)));
        out.push((format!("layers.{i}.attn.wk"), cols(&l.attn.wk)));
        out.push((format!("layers.{i}.attn.wv"), cols(&l.attn.wv)));
        out.push((format!("layers.{i}.attn.wo"), rows(&l.attn.wo)));
        out.push((
            format!("layers.{i}.mlp_norm"),
            l.mlp_norm.synced().data().to_vec(),
        ));
        out.push((format!("layers.{i}.mlp.up"), cols(&l.mlp.up)));
        out.push((format!("layers.{i}.mlp.down"), rows(&l.mlp.down)));
    }
    out.push(("final_norm".to_string(), g.final_norm.data().to_vec()));
    out.push(("head".to_string(), g.head.data().to_vec()));
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central finite differences of the loss for every coordinate of every
/// parameter, in `params()` order.
pub fn fd_grads(
    model: &CaatModel<f64>,
    batch: &Batch,
    opts: &StepOptions,
    step: f64,
) -> Vec<Vec<f64>> {
    let mut work = model.clone();
    let shapes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    let mut ledger = CommLedger::new();
    let mut out = Vec::with_capacity(shapes.len());
    for (pi, &len) in shapes.iter().enumerate() {
        let mut g = Vec::with_capacity(len);
        for j in 0..len {
            let orig = work.params()[pi].data()[j];
            work.params_mut()[pi].data_mut()[j] = orig + step;
            let up = work.loss(batch, opts, &mut ledger).unwrap();
            work.params_mut()[pi].data_mut()[j] = orig - step;
            let down = work.loss(batch, opts, &mut ledger).unwrap();
            work.params_mut()[pi].data_mut()[j] = orig;
            g.push((up - down) / (2.0 * step));
        }
        out.push(g);
    }
    out
}
