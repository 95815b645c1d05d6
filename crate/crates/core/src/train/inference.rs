use super::model::{merge_ranks, CaatModel};
use crate::collectives::{PartialReduceSpec, RankSet};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{linear, rmsnorm, Tensor};

/// Sums shared channels over ranks in rank order and scales private ones,
/// with no communication.
fn local_channel_sum<T: Scalar>(
    partial: &RankSet<T>,
    spec: &PartialReduceSpec,
) -> Result<RankSet<T>> {
    let shared = spec.shared_count();
    let factor: T = spec.private_factor();
    let scale = spec.scale_private() && shared < spec.hidden();
    let rows = partial.rank(0).rows();
    let mut sums = Tensor::zeros(&[rows, shared.max(1)]);
    if partial.ranks() > 1 && shared > 0 {
        for i in 0..rows {
            for j in 0..shared {
                let mut acc = partial.rank(0).row(i)[j];
                for m in 1..partial.ranks() {
                    acc += partial.rank(m).row(i)[j];
                }
                sums.row_mut(i)[j] = acc;
            }
        }
    }
    Ok(partial.map(|_, t| {
        let mut out = t.clone();
        for i in 0..rows {
            let row = out.row_mut(i);
            if partial.ranks() > 1 && shared > 0 {
                row[..shared].copy_from_slice(&sums.row(i)[..shared]);
            }
            if scale {
                for v in &mut row[shared..] {
                    *v *= factor;
                }
            }
        }
        out
    }))
}

/// Next-token logits `[t, V]` of a tensor-parallel model evaluated on one
/// device: the ranks run one after another and each collective becomes a
/// local sum in the same order the simulated collective uses.
pub fn logical_device_inference<T: Scalar>(
    model: &CaatModel<T>,
    tokens: &[usize],
) -> Result<Tensor<T>> {
    let spec = model.spec();
    let x = model.embed_tokens(tokens, 1, tokens.len())?;
    let mut xs = RankSet::replicate(&x, model.ranks());
    for layer in &model.layers {
        xs = layer.forward_with(&xs, |partial| local_channel_sum(partial, &spec))?;
    }
    let merged = merge_ranks(&xs, None);
    let normed = rmsnorm(&merged, &model.final_norm)?;
    linear(&normed.as_matrix(), &model.head)
}

/// Index of the largest value in the last row, ties resolved to the lowest.
pub fn argmax_last<T: Scalar>(logits: &Tensor<T>) -> usize {
    let row = logits.row(logits.rows() - 1);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Appends `count` greedy tokens to `prompt`, running `logits` on at most the
/// model's last `max_seq` tokens each time.
pub fn greedy_continue<T: Scalar>(
    model: &CaatModel<T>,
    prompt: &[usize],
    count: usize,
    mut logits: impl FnMut(&[usize]) -> Result<Tensor<T>>,
) -> Result<Vec<usize>> {
    let max_seq = model.config().max_seq;
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let start = seq.len().saturating_sub(max_seq);
        let next = argmax_last(&logits(&seq[start..])?);
        seq.push(next);
        out.push(next);
    }
    Ok(out)
}
