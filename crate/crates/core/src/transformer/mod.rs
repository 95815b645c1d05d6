//! Tensor-parallel transformer blocks whose outputs are synchronized with a
//! partial channel-reduce.
//!
//! Gradients follow one of two conventions, fixed by [`BackwardPlacement`]:
//!
//! * `HAfterNorm`: a per-rank gradient is the derivative with respect to that
//!   rank's copy of an activation. The gradient reduce is the adjoint of the
//!   forward reduce and sits at the same place, after the block output; the
//!   normalization is differentiated per rank and its gains need a separate
//!   all-reduce before the optimizer step. Exact for every `p`.
//! * `GBeforeNorm`: gradients of synchronized activations are held in full on
//!   every rank, the block output's backward is the identity, and the reduce
//!   happens on the block-input gradient before the normalization backward.
//!   This is the usual tensor-parallel backward; it is exact only for `p = 1`
//!   and is kept to exhibit the mismatch otherwise.

mod attention;
mod layer;
mod mlp;

pub use attention::{
    attention_backward, attention_forward, AttnCache, AttnGrads, ShardedAttention,
};
pub use layer::{
    layer_backward, layer_forward, sync_norm_param_grads, CaatLayer, LayerCache, LayerGrads,
    LayerSync, NormGrad,
};
pub use mlp::{mlp_backward, mlp_forward, MlpCache, MlpGrads, ShardedMlp};

use std::fmt;
use std::str::FromStr;

use crate::collectives::{
    all_gather, all_reduce, apply_mask, partial_channel_reduce, partial_channel_reduce_vjp,
    reduce_scatter_masked, CommLedger, MaskSpec, PartialReduceSpec, Pass, RankMask, RankSet,
};
use crate::error::{Error, Result};
use crate::precision::PrecisionMode;
use crate::scalar::Scalar;

/// Standard deviation of the normal initialization of every projection.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackwardPlacement {
    /// Reduce neural gradients before the normalization backward.
    GBeforeNorm,
    /// Reduce after the normalization backward, mirroring the forward reduce.
    #[default]
    HAfterNorm,
}

impl fmt::Display for BackwardPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackwardPlacement::GBeforeNorm => "g",
            BackwardPlacement::HAfterNorm => "h",
        })
    }
}

impl FromStr for BackwardPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g" | "g_before_norm" => Ok(BackwardPlacement::GBeforeNorm),
            "h" | "h_after_norm" => Ok(BackwardPlacement::HAfterNorm),
            other => Err(Error::Config(format!(
                "unknown placement `{other}` (expected g or h)"
            ))),
        }
    }
}

/// How a block synchronizes its per-rank output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSync {
    pub spec: PartialReduceSpec,
    /// Accumulation mode of gradient reduces.
    pub grad_precision: PrecisionMode,
    /// Compression baseline: mask each rank's output, then all-reduce. Only
    /// valid with a full-width `spec`.
    pub mask: Option<MaskSpec>,
    pub step: u64,
}

impl BlockSync {
    pub fn new(spec: PartialReduceSpec) -> Self {
        Self {
            spec,
            grad_precision: PrecisionMode::Full64,
            mask: None,
            step: 0,
        }
    }

    pub(crate) fn forward<T: Scalar>(
        &self,
        partial: &RankSet<T>,
        ledger: &mut CommLedger,
    ) -> Result<(RankSet<T>, Option<RankMask>)> {
        let Some(mask) = &self.mask else {
            return Ok((
                partial_channel_reduce(partial, &self.spec, PrecisionMode::Full64, ledger)?,
                None,
            ));
        };
        if !self.spec.is_full() {
            return Err(Error::Config(
                "activation masks require full synchronization (p = 1)".into(),
            ));
        }
        let (_, saved) = apply_mask(partial, mask, self.step);
        let scattered = reduce_scatter_masked(
            partial,
            &saved,
            PrecisionMode::Full64,
            Pass::Forward,
            ledger,
        )?;
        let shape = partial.shape().to_vec();
        let gathered = all_gather(&scattered, Pass::Forward, ledger)
            .try_map(|_, t| t.clone().reshape(&shape))?;
        Ok((gathered, Some(saved)))
    }

    /// Gradient with respect to the per-rank block output, before the block's
    /// own weight backward.
    pub(crate) fn backward<T: Scalar>(
        &self,
        upstream: &RankSet<T>,
        mask: Option<&RankMask>,
        placement: BackwardPlacement,
        ledger: &mut CommLedger,
    ) -> Result<RankSet<T>> {
        let g = match placement {
            BackwardPlacement::HAfterNorm => {
                partial_channel_reduce_vjp(upstream, &self.spec, self.grad_precision, ledger)?
            }
            BackwardPlacement::GBeforeNorm => {
                // Identity only undoes the forward map when nothing is scaled.
                let factor: T = self.spec.private_factor();
                if factor == T::one() {
                    upstream.clone()
                } else {
                    let shared = self.spec.shared_count();
                    upstream.map(|_, t| {
                        let mut out = t.clone();
                        for i in 0..out.rows() {
                            for v in &mut out.row_mut(i)[shared..] {
                                *v *= factor;
                            }
                        }
                        out
                    })
                }
            }
        };
        Ok(match mask {
            Some(m) => m.apply(&g),
            None => g,
        })
    }

    /// Reduce of the block-input gradient used by `GBeforeNorm`.
    pub(crate) fn input_grad_reduce<T: Scalar>(
        &self,
        dx: RankSet<T>,
        placement: BackwardPlacement,
        ledger: &mut CommLedger,
    ) -> RankSet<T> {
        match placement {
            BackwardPlacement::HAfterNorm => dx,
            BackwardPlacement::GBeforeNorm => {
                all_reduce(&dx, self.grad_precision, Pass::Backward, ledger)
            }
        }
    }
}

pub(crate) fn check_ranks<T: Scalar>(
    x: &RankSet<T>,
    ranks: usize,
    hidden: usize,
    op: &'static str,
) -> Result<()> {
    if x.ranks() != ranks || x.hidden() != hidden {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![x.ranks(), x.hidden()],
            rhs: vec![ranks, hidden],
        });
    }
    Ok(())
}
