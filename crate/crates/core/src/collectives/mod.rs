//! Simulated tensor-parallel collectives with exact communication accounting.
//!
//! Each operation is a barrier over a [`RankSet`]: it sees every rank's
//! tensor at once and merges them in ascending rank order, so results are
//! bitwise reproducible. Traffic is recorded per rank in a [`CommLedger`].
//! A single rank has no peers and records nothing.

mod ledger;
mod mask;
mod rank_set;

pub use ledger::{CollectiveKind, CommLedger, Counter, LedgerKey, Pass};
pub use mask::{apply_mask, MaskKind, MaskSpec, RankMask};
pub use rank_set::RankSet;

use crate::error::{Error, Result};
use crate::precision::PrecisionMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which hidden channels a partial channel-reduce synchronizes.
///
/// Shared channels are always the leading `floor(h·p)` indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartialReduceSpec {
    p: f64,
    hidden: usize,
    shared: usize,
    scale_private: bool,
    scale_ranks: usize,
}

impl PartialReduceSpec {
    /// `scale_ranks` is the `r` of the `√r` private-channel factor, normally
    /// the tensor-parallel degree.
    pub fn new(p: f64, hidden: usize, scale_private: bool, scale_ranks: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "synchronization factor p={p} outside [0, 1]"
            )));
        }
        if hidden == 0 || scale_ranks == 0 {
            return Err(Error::Config(
                "hidden size and rank count must be positive".into(),
            ));
        }
        let shared = ((hidden as f64) * p).floor() as usize;
        Ok(Self {
            p,
            hidden,
            shared,
            scale_private,
            scale_ranks,
        })
    }

    /// `p = 1`: an ordinary all-reduce.
    pub fn full(hidden: usize) -> Self {
        Self::new(1.0, hidden, false, 1).expect("valid full-reduce spec")
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn shared_count(&self) -> usize {
        self.shared
    }

    pub fn private_count(&self) -> usize {
        self.hidden - self.shared
    }

    pub fn scale_private(&self) -> bool {
        self.scale_private
    }

    pub fn scale_ranks(&self) -> usize {
        self.scale_ranks
    }

    pub fn is_full(&self) -> bool {
        self.shared == self.hidden
    }

    /// Multiplier applied to private channels after the reduce.
    pub fn private_factor<T: Scalar>(&self) -> T {
        if self.scale_private {
            T::cst((self.scale_ranks as f64).sqrt())
        } else {
            T::one()
        }
    }
}

/// Sums `values` in the given order under `precision`.
#[inline]
pub(crate) fn reduce_values<T: Scalar>(
    precision: PrecisionMode,
    values: impl IntoIterator<Item = T>,
) -> T {
    let mut it = values.into_iter();
    let first = precision.round(it.next().expect("at least one value"));
    it.fold(first, |acc, v| precision.accumulate(acc, v))
}

/// Every rank receives the elementwise sum over ranks.
pub fn all_reduce<T: Scalar>(
    rs: &RankSet<T>,
    precision: PrecisionMode,
    pass: Pass,
    ledger: &mut CommLedger,
) -> RankSet<T> {
    if rs.ranks() == 1 {
        return rs.clone();
    }
    let summed = sum_columns(rs, rs.hidden(), precision)
        .reshape(rs.shape())
        .expect("sum keeps the element count");
    ledger.record(
        CollectiveKind::AllReduce,
        pass,
        precision.wire_bits(),
        2 * summed.len() as u64,
    );
    RankSet::replicate(&summed, rs.ranks())
}

/// Forward partial channel-reduce: channels `[0, shared)` are summed and
/// replicated, the rest stay per rank (optionally scaled by `√r`).
pub fn partial_channel_reduce<T: Scalar>(
    rs: &RankSet<T>,
    spec: &PartialReduceSpec,
    precision: PrecisionMode,
    ledger: &mut CommLedger,
) -> Result<RankSet<T>> {
    channel_reduce(rs, spec, precision, Pass::Forward, ledger)
}

/// Vector-Jacobian product of [`partial_channel_reduce`].
///
/// The forward map is symmetric in its rank/channel structure, so its
/// transpose is the same operation applied to the upstream gradients.
pub fn partial_channel_reduce_vjp<T: Scalar>(
    upstream: &RankSet<T>,
    spec: &PartialReduceSpec,
    precision: PrecisionMode,
    ledger: &mut CommLedger,
) -> Result<RankSet<T>> {
    channel_reduce(upstream, spec, precision, Pass::Backward, ledger)
}

fn channel_reduce<T: Scalar>(
    rs: &RankSet<T>,
    spec: &PartialReduceSpec,
    precision: PrecisionMode,
    pass: Pass,
    ledger: &mut CommLedger,
) -> Result<RankSet<T>> {
    if rs.hidden() != spec.hidden() {
        return Err(Error::ShapeMismatch {
            op: "partial_channel_reduce",
            lhs: rs.shape().to_vec(),
            rhs: vec![spec.hidden()],
        });
    }
    let shared = spec.shared_count();
    let h = spec.hidden();
    let factor: T = spec.private_factor();
    let scale = spec.scale_private() && shared < h;
    let reduce = rs.ranks() > 1 && shared > 0;
    if !reduce && !scale {
        return Ok(rs.clone());
    }
    let summed = reduce.then(|| sum_columns(rs, shared, precision));
    let out = rs.map(|_, t| {
        let mut out = t.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            if let Some(s) = &summed {
                row[..shared].copy_from_slice(s.row(i));
            }
            if scale {
                for v in &mut row[shared..] {
                    *v *= factor;
                }
            }
        }
        out
    });
    if let Some(s) = summed {
        ledger.record(
            CollectiveKind::PartialReduce,
            pass,
            precision.wire_bits(),
            2 * s.len() as u64,
        );
    }
    Ok(out)
}

/// Sum over ranks of channels `[0, count)`, as a `rows × count` matrix.
/// Each element is accumulated in rank order, as in [`reduce_values`].
fn sum_columns<T: Scalar>(rs: &RankSet<T>, count: usize, precision: PrecisionMode) -> Tensor<T> {
    let rows = rs.rank(0).rows();
    let mut out = Tensor::zeros(&[rows, count]);
    for i in 0..rows {
        let dst = out.row_mut(i);
        for (d, &v) in dst.iter_mut().zip(&rs.rank(0).row(i)[..count]) {
            *d = precision.round(v);
        }
        for t in rs.iter().skip(1) {
            for (d, &v) in dst.iter_mut().zip(&t.row(i)[..count]) {
                *d = precision.accumulate(*d, v);
            }
        }
    }
    out
}

/// First half of an all-reduce: rank `m` receives the summed `m`-th block of
/// rows. The row count must be divisible by the rank count.
pub fn reduce_scatter<T: Scalar>(
    rs: &RankSet<T>,
    precision: PrecisionMode,
    pass: Pass,
    ledger: &mut CommLedger,
) -> Result<RankSet<T>> {
    let (out, elements) = scatter_sum(rs, precision)?;
    if rs.ranks() > 1 {
        ledger.record(
            CollectiveKind::ReduceScatter,
            pass,
            precision.wire_bits(),
            elements,
        );
    }
    Ok(out)
}

/// Reduce-scatter of masked activations: only surviving entries travel, so
/// the ledger records the mask's keep count instead of the full payload.
pub fn reduce_scatter_masked<T: Scalar>(
    rs: &RankSet<T>,
    mask: &RankMask,
    precision: PrecisionMode,
    pass: Pass,
    ledger: &mut CommLedger,
) -> Result<RankSet<T>> {
    if mask.ranks() != rs.ranks() || mask.hidden() != rs.hidden() {
        return Err(Error::RankSet("mask does not match the rank set".into()));
    }
    let (out, _) = scatter_sum(&mask.apply(rs), precision)?;
    if rs.ranks() > 1 {
        ledger.record(
            CollectiveKind::ReduceScatter,
            pass,
            precision.wire_bits(),
            mask.kept_per_rank(),
        );
    }
    Ok(out)
}

fn scatter_sum<T: Scalar>(rs: &RankSet<T>, precision: PrecisionMode) -> Result<(RankSet<T>, u64)> {
    let m = rs.ranks();
    let rows = rs.rank(0).rows();
    if !rows.is_multiple_of(m) {
        return Err(Error::RankSet(format!(
            "{rows} rows cannot be scattered over {m} ranks"
        )));
    }
    if m == 1 {
        return Ok((RankSet::new(vec![rs.rank(0).as_matrix()])?, 0));
    }
    let full = sum_columns(rs, rs.hidden(), precision);
    let chunk = rows / m;
    let parts = (0..m)
        .map(|r| full.slice_rows(r * chunk, (r + 1) * chunk))
        .collect();
    Ok((RankSet::new(parts)?, full.len() as u64))
}

/// Second half of an all-reduce: every rank receives the row-concatenation
/// of all ranks' blocks.
pub fn all_gather<T: Scalar>(rs: &RankSet<T>, pass: Pass, ledger: &mut CommLedger) -> RankSet<T> {
    let gathered = Tensor::concat_rows(&rs.iter().cloned().collect::<Vec<_>>())
        .expect("rank set tensors share a shape");
    if rs.ranks() > 1 {
        // Gathered values were accumulated upstream; the wire width is the
        // activation width.
        ledger.record(CollectiveKind::AllGather, pass, 32, gathered.len() as u64);
    }
    RankSet::replicate(&gathered, rs.ranks())
}

/// All-reduce of per-rank gradient tensors, returning the single synchronized
/// value.
pub fn sync_replicated_grad<T: Scalar>(
    grads: &RankSet<T>,
    kind: CollectiveKind,
    precision: PrecisionMode,
    ledger: &mut CommLedger,
) -> Tensor<T> {
    if grads.ranks() == 1 {
        return grads.rank(0).clone();
    }
    let n = grads.rank(0).len();
    let data = (0..n)
        .map(|i| reduce_values(precision, grads.iter().map(|t| t.data()[i])))
        .collect();
    ledger.record(kind, Pass::Backward, precision.wire_bits(), 2 * n as u64);
    Tensor::new(grads.shape().to_vec(), data).expect("shape preserved")
}
