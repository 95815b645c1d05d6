use rand::Rng;

use super::{
    attention_backward, attention_forward, mlp_backward, mlp_forward, AttnCache, AttnGrads,
    BackwardPlacement, BlockSync, MlpCache, MlpGrads, ShardedAttention, ShardedMlp,
};
use crate::collectives::{
    sync_replicated_grad, CollectiveKind, CommLedger, MaskSpec, PartialReduceSpec, RankSet,
};
use crate::error::{Error, Result};
use crate::precision::PrecisionMode;
use crate::scalar::Scalar;
use crate::tensor::{rmsnorm, rmsnorm_backward, Tensor};

/// Pre-norm transformer layer with per-rank residual streams:
/// `x ← x + Attn(norm(x))`, then `x ← x + Mlp(norm(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaatLayer<T> {
    pub attn_norm: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub attn: ShardedAttention<T>,
    pub mlp: ShardedMlp<T>,
    pub spec: PartialReduceSpec,
}

/// Normalization-gain gradient. Per-rank values must be all-reduced before
/// the optimizer may use them.
#[derive(Clone, Debug, PartialEq)]
pub enum NormGrad<T> {
    PerRank(RankSet<T>),
    Synced(Tensor<T>),
}

impl<T: Scalar> NormGrad<T> {
    pub fn needs_sync(&self) -> bool {
        matches!(self, NormGrad::PerRank(_))
    }

    /// Returns the synchronized gradient; panics if it still needs a sync.
    pub fn synced(&self) -> &Tensor<T> {
        match self {
            NormGrad::Synced(t) => t,
            NormGrad::PerRank(_) => panic!("normalization gradient used before synchronization"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub attn_norm: NormGrad<T>,
    pub mlp_norm: NormGrad<T>,
    pub attn: AttnGrads<T>,
    pub mlp: MlpGrads<T>,
}

#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    input: RankSet<T>,
    mid: RankSet<T>,
    attn: AttnCache<T>,
    mlp: MlpCache<T>,
}

impl<T: Scalar> CaatLayer<T> {
    pub fn init<R: Rng + ?Sized>(
        hidden: usize,
        heads: usize,
        ranks: usize,
        spec: PartialReduceSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.hidden() != hidden {
            return Err(Error::Config(
                "reduce spec hidden size differs from the layer".into(),
            ));
        }
        let attn = ShardedAttention::init(hidden, heads, ranks, rng)?;
        let mlp = ShardedMlp::init(hidden, ranks, rng)?;
        Ok(Self {
            attn_norm: Tensor::ones(&[hidden]),
            mlp_norm: Tensor::ones(&[hidden]),
            attn,
            mlp,
            spec,
        })
    }

    pub fn hidden(&self) -> usize {
        self.spec.hidden()
    }

    pub fn ranks(&self) -> usize {
        self.mlp.ranks()
    }

    fn block_syncs(&self, opts: &LayerSync) -> (BlockSync, BlockSync) {
        let make = |salt: u64| BlockSync {
            spec: self.spec,
            grad_precision: opts.grad_precision,
            mask: opts.mask.map(|m| m.derive(salt)),
            step: opts.step,
        };
        (make(0), make(1))
    }

    /// One rank's layer output when the collectives are replaced by
    /// `combine`, which receives each block's per-rank partial outputs.
    pub fn forward_with(
        &self,
        x: &RankSet<T>,
        mut combine: impl FnMut(&RankSet<T>) -> Result<RankSet<T>>,
    ) -> Result<RankSet<T>> {
        let normed = x.try_map(|_, t| rmsnorm(t, &self.attn_norm))?;
        let partial = normed.try_map(|m, t| self.attn.rank_partial(m, t))?;
        let mid = x.add(&combine(&partial)?);
        let normed = mid.try_map(|_, t| rmsnorm(t, &self.mlp_norm))?;
        let partial = normed.try_map(|m, t| self.mlp.rank_partial(m, t))?;
        Ok(mid.add(&combine(&partial)?))
    }
}

/// Per-step synchronization options shared by both blocks of a layer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerSync {
    pub grad_precision: PrecisionMode,
    pub mask: Option<MaskSpec>,
    pub step: u64,
}

pub fn layer_forward<T: Scalar>(
    x: &RankSet<T>,
    layer: &CaatLayer<T>,
    opts: &LayerSync,
    ledger: &mut CommLedger,
) -> Result<(RankSet<T>, LayerCache<T>)> {
    let (attn_sync, mlp_sync) = layer.block_syncs(opts);
    let normed = x.try_map(|_, t| rmsnorm(t, &layer.attn_norm))?;
    let (z, attn) = attention_forward(&normed, &layer.attn, &attn_sync, ledger)?;
    let mid = x.add(&z);
    let normed = mid.try_map(|_, t| rmsnorm(t, &layer.mlp_norm))?;
    let (z, mlp) = mlp_forward(&normed, &layer.mlp, &mlp_sync, ledger)?;
    let out = mid.add(&z);
    Ok((
        out,
        LayerCache {
            input: x.clone(),
            mid,
            attn,
            mlp,
        },
    ))
}

/// Backward through one layer. Under `HAfterNorm` the gain gradients come
/// back per rank and must go through [`sync_norm_param_grads`]; under
/// `GBeforeNorm` rank 0's value is taken as already synchronized.
pub fn layer_backward<T: Scalar>(
    upstream: &RankSet<T>,
    cache: &LayerCache<T>,
    layer: &CaatLayer<T>,
    placement: BackwardPlacement,
    ledger: &mut CommLedger,
) -> Result<(RankSet<T>, LayerGrads<T>)> {
    if upstream.shape() != cache.input.shape() || upstream.ranks() != cache.input.ranks() {
        return Err(Error::CacheMismatch(format!(
            "upstream {:?} does not match cached input {:?}",
            upstream.shape(),
            cache.input.shape()
        )));
    }
    let (dnormed, mlp_grads) = mlp_backward(upstream, &cache.mlp, &layer.mlp, placement, ledger)?;
    let (dmid, dgamma_mlp) = norm_backward(&cache.mid, &layer.mlp_norm, &dnormed, upstream)?;
    let (dnormed, attn_grads) =
        attention_backward(&dmid, &cache.attn, &layer.attn, placement, ledger)?;
    let (dx, dgamma_attn) = norm_backward(&cache.input, &layer.attn_norm, &dnormed, &dmid)?;
    let wrap = |g: RankSet<T>| match placement {
        BackwardPlacement::HAfterNorm => NormGrad::PerRank(g),
        BackwardPlacement::GBeforeNorm => NormGrad::Synced(g.rank(0).clone()),
    };
    Ok((
        dx,
        LayerGrads {
            attn_norm: wrap(dgamma_attn),
            mlp_norm: wrap(dgamma_mlp),
            attn: attn_grads,
            mlp: mlp_grads,
        },
    ))
}

/// Per-rank RMSNorm backward plus the residual branch.
fn norm_backward<T: Scalar>(
    x: &RankSet<T>,
    gamma: &Tensor<T>,
    dnormed: &RankSet<T>,
    residual: &RankSet<T>,
) -> Result<(RankSet<T>, RankSet<T>)> {
    let mut dxs = Vec::with_capacity(x.ranks());
    let mut dgs = Vec::with_capacity(x.ranks());
    for m in 0..x.ranks() {
        let (mut dx, dg) = rmsnorm_backward(x.rank(m), gamma, dnormed.rank(m))?;
        dx.add_assign(residual.rank(m));
        dxs.push(dx);
        dgs.push(dg);
    }
    Ok((RankSet::new(dxs)?, RankSet::new(dgs)?))
}

/// All-reduce of per-rank normalization-gain gradients.
pub fn sync_norm_param_grads<T: Scalar>(
    grads: &RankSet<T>,
    precision: PrecisionMode,
    ledger: &mut CommLedger,
) -> Tensor<T> {
    sync_replicated_grad(grads, CollectiveKind::NormSync, precision, ledger)
}

impl<T: Scalar> LayerGrads<T> {
    /// Synchronizes any per-rank gain gradients in place.
    pub fn sync_norms(&mut self, precision: PrecisionMode, ledger: &mut CommLedger) {
        for g in [&mut self.attn_norm, &mut self.mlp_norm] {
            if let NormGrad::PerRank(per_rank) = g {
                *g = NormGrad::Synced(sync_norm_param_grads(per_rank, precision, ledger));
            }
        }
    }
}
